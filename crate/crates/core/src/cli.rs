//! Command-line entry point.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attention::SequenceBatch;
use crate::construct::{
    construct_slt_mha, construct_slt_transformer, measure_mha_error, measure_transformer, required_dims_mha,
    SourceMhaConfig,
};
use crate::error::{invalid, Result, SltError};
use crate::harness::{
    angular_batches, build_trained_target, calibrate_c, circle_batches, random_block, sweep_blocks, sweep_hidden_dim,
    sweep_seq_len, trial_seeds, write_records_csv, write_rows_csv, BlockSweepConfig, CalibrationConfig, DimSweepConfig,
    ExperimentRecord, Manifest, SeqSweepConfig, TrainedTargetConfig, VERSION,
};
use crate::popup::{scale_sweep, PopupConfig};
use crate::rng::RngStream;
use crate::selftest::run_selftest;
use crate::subset_sum::{FactorizeOptions, DEFAULT_C_HAT};
use crate::train::gen_dataset;

const SCHEMAS: &str = "\
CSV schemas (header row, RFC 4180, '.' decimals):
  approx-mha.csv              experiment,seed,param,value,measured,hit,n_V,qk_max_err,vo_max_err
  approx-transformer.csv      experiment,seed,param,value,measured,hit,n_FC,n_MHA,schedule_ok
  sweep-dim.csv               experiment,seed,param,value,measured,budget_ok,hit,logit_bound,logit_pert,qk_max_err,vo_max_err
  sweep-dim.summary.csv       n,trials,mean,std,positive,fit_gamma,fit_delta,fit_r2,fit_pred
  sweep-seq.csv               experiment,seed,param,value,measured,n
  sweep-seq.summary.csv       n,T,trials,mean,std
  sweep-blocks.csv            experiment,seed,param,value,measured,hit,n,schedule_ok
  sweep-blocks.summary.csv    B,n,trials,mean,std,fit_gamma,fit_delta,fit_r2,fit_pred,log_resid
  edge-popup-sweep.csv        scale,seed,epoch,train_loss,val_loss
  edge-popup-sweep.summary.csv scale,seed,final_val_loss
  calibrate-c.csv             block_size,seeds,successes,rate
Every run also writes <experiment>.manifest.json; passing it back via --config reruns it.";

#[derive(Parser, Debug)]
#[command(name = "slt-forge", version = VERSION, about = "Prune random attention networks into approximations of target networks", after_help = SCHEMAS)]
struct Cli {
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Worker threads; falls back to SLT_FORGE_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Construct single-MHA SLTs against a trained target.
    ApproxMha,
    /// Construct transformer SLTs against random block targets.
    ApproxTransformer,
    /// Error against source hidden dimension, with exponential fit.
    SweepDim,
    /// Error against sequence length for fixed SLTs.
    SweepSeq,
    /// Error against block count with a shared decay rate.
    SweepBlocks,
    /// Edge-popup validation loss against query/key init scale.
    EdgePopupSweep,
    /// Fit C_hat from the per-matrix success rate.
    CalibrateC {
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Run the invariant checks.
    Selftest,
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::ApproxMha => "approx-mha",
            Cmd::ApproxTransformer => "approx-transformer",
            Cmd::SweepDim => "sweep-dim",
            Cmd::SweepSeq => "sweep-seq",
            Cmd::SweepBlocks => "sweep-blocks",
            Cmd::EdgePopupSweep => "edge-popup-sweep",
            Cmd::CalibrateC { .. } => "calibrate-c",
            Cmd::Selftest => "selftest",
        }
    }

    fn default_trials(&self) -> usize {
        match self {
            Cmd::SweepDim | Cmd::SweepBlocks => 100,
            Cmd::SweepSeq => 20,
            Cmd::EdgePopupSweep => 3,
            Cmd::CalibrateC { .. } => CalibrationConfig::default().seeds,
            _ => 1,
        }
    }
}

enum Failure {
    Usage(String),
    Run(SltError),
}

impl From<SltError> for Failure {
    fn from(e: SltError) -> Self {
        Failure::Run(e)
    }
}

struct Loaded<C> {
    config: C,
    seed: Option<u64>,
    trials: Option<usize>,
}

/// Reads either a bare config or a manifest of the same experiment.
fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>, experiment: &str) -> std::result::Result<Loaded<C>, Failure> {
    let Some(path) = path else {
        return Ok(Loaded { config: C::default(), seed: None, trials: None });
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("malformed config {}: {e}", path.display())))?;
    let bad = |e: serde_json::Error| Failure::Usage(format!("malformed config {}: {e}", path.display()));
    if value.get("experiment").is_some() && value.get("config").is_some() {
        let m: Manifest = serde_json::from_value(value).map_err(bad)?;
        if m.experiment != experiment {
            return Err(Failure::Usage(format!("manifest is for {}, not {experiment}", m.experiment)));
        }
        return Ok(Loaded { config: serde_json::from_value(m.config).map_err(bad)?, seed: Some(m.seed), trials: Some(m.trials) });
    }
    Ok(Loaded { config: serde_json::from_value(value).map_err(bad)?, seed: None, trials: None })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ApproxMhaConfig {
    target: TrainedTargetConfig,
    eps: f64,
    #[serde(rename = "n_K")]
    n_k: Option<usize>,
    #[serde(rename = "n_V")]
    n_v: Option<usize>,
    c_hat: f64,
    n_eval: usize,
    eval_t_choices: Vec<usize>,
    search: FactorizeOptions,
}

impl Default for ApproxMhaConfig {
    fn default() -> Self {
        ApproxMhaConfig {
            target: TrainedTargetConfig::default(),
            eps: 0.5,
            n_k: None,
            n_v: None,
            c_hat: DEFAULT_C_HAT,
            n_eval: 64,
            eval_t_choices: vec![4, 8, 16],
            search: FactorizeOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ApproxTransformerConfig {
    blocks: usize,
    eps: f64,
    n_mha: Option<usize>,
    n_fc: Option<usize>,
    c_hat: f64,
    #[serde(rename = "H")]
    h: usize,
    d1: usize,
    #[serde(rename = "d_K")]
    d_k: usize,
    #[serde(rename = "d_V")]
    d_v: usize,
    n_eval: usize,
    eval_t: usize,
    search: FactorizeOptions,
}

impl Default for ApproxTransformerConfig {
    fn default() -> Self {
        ApproxTransformerConfig {
            blocks: 2,
            eps: 1.5,
            n_mha: Some(64),
            n_fc: Some(64),
            c_hat: DEFAULT_C_HAT,
            h: 1,
            d1: 2,
            d_k: 8,
            d_v: 8,
            n_eval: 16,
            eval_t: 8,
            search: FactorizeOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PopupSweepConfig {
    popup: PopupConfig,
    /// Defaults to `n_K^(1/4) 2^(i/2)`, `i = -3..=2`.
    scales: Option<Vec<f64>>,
}

struct Ctx {
    out: PathBuf,
    seed: u64,
    trials: usize,
}

fn approx_mha(cfg: &ApproxMhaConfig, ctx: &Ctx, manifest: &mut Manifest) -> Result<()> {
    let root = RngStream::new(ctx.seed);
    let target = build_trained_target(&cfg.target, &root.derive("target"))?;
    let w = &target.weights;
    let eval = gen_dataset(cfg.n_eval, &cfg.eval_t_choices, &mut root.derive("eval"))?;
    let batches = angular_batches(&eval, &target.reg_token, w.d2())?;
    let alpha = batches.iter().map(|b| b.alpha).fold(0.0, f64::max);
    let (req_k, req_v) = required_dims_mha(cfg.eps, w.h(), w.d1(), w.d2(), alpha, cfg.c_hat)?;
    let (n_k, n_v) = (cfg.n_k.unwrap_or(req_k), cfg.n_v.unwrap_or(req_v));
    let mut records = Vec::new();
    let mut first_report = Value::Null;
    for s in trial_seeds(ctx.seed, ctx.trials) {
        let src = SourceMhaConfig::new(n_k, n_v, w.h(), w.d1(), w.d2())?;
        let masked = construct_slt_mha(w, &src, cfg.eps, alpha, &RngStream::new(s).derive("source"), &cfg.search)?;
        let err = measure_mha_error(w, &masked, &batches)?;
        if first_report.is_null() {
            first_report = json!({ "measured": err, "construction": serde_json::to_value(&masked)? });
        }
        records.push(ExperimentRecord {
            experiment: "approx-mha".into(),
            seed: s,
            param: "n_K".into(),
            value: n_k as f64,
            measured: err,
            extra: BTreeMap::from([
                ("n_V".to_string(), n_v as f64),
                ("hit".to_string(), f64::from(u8::from(masked.all_hit()))),
                ("qk_max_err".to_string(), masked.max_qk_err()),
                ("vo_max_err".to_string(), masked.max_vo_err()),
            ]),
        });
    }
    write_records_csv(&ctx.out.join("approx-mha.csv"), &records)?;
    fs::write(ctx.out.join("approx-mha.report.json"), serde_json::to_string_pretty(&first_report)? + "\n")?;
    manifest.outputs = vec!["approx-mha.csv".into(), "approx-mha.report.json".into()];
    manifest.results = json!({
        "n_K": n_k, "n_V": n_v, "required_n_K": req_k, "required_n_V": req_v, "alpha": alpha,
        "max_measured": records.iter().map(|r| r.measured).fold(0.0, f64::max),
        "target": serde_json::to_value(&target.report)?,
    });
    Ok(())
}

fn approx_transformer(cfg: &ApproxTransformerConfig, ctx: &Ctx, manifest: &mut Manifest) -> Result<()> {
    let root = RngStream::new(ctx.seed);
    let targets = (0..cfg.blocks)
        .map(|b| random_block(cfg.h, cfg.d1, cfg.d_k, cfg.d_v, &root.derive_index("target_block", b as u64)))
        .collect::<Result<Vec<_>>>()?;
    let batches: Vec<SequenceBatch> = circle_batches(cfg.n_eval, cfg.eval_t, cfg.d1, &mut root.derive("eval"))?;
    let alpha = batches.iter().map(|b| b.alpha).fold(0.0, f64::max);
    let dims = match (cfg.n_mha, cfg.n_fc) {
        (Some(a), Some(b)) => Some((a, b)),
        (None, None) => None,
        _ => return Err(invalid("set both n_mha and n_fc, or neither")),
    };
    let mut records = Vec::new();
    let mut first_report = Value::Null;
    for s in trial_seeds(ctx.seed, ctx.trials) {
        let masked = construct_slt_transformer(&targets, cfg.eps, alpha, cfg.c_hat, dims, &RngStream::new(s).derive("source"), &cfg.search)?;
        let meas = measure_transformer(&targets, &masked.pruned()?, &batches)?;
        let hit = masked.all_hit();
        let within = meas.deviations.iter().zip(&masked.budgets).all(|(d, bb)| *d <= bb.deviation_budget);
        if first_report.is_null() {
            first_report = json!({ "budgets": serde_json::to_value(&masked.budgets)?, "measurement": serde_json::to_value(&meas)? });
        }
        records.push(ExperimentRecord {
            experiment: "approx-transformer".into(),
            seed: s,
            param: "B".into(),
            value: cfg.blocks as f64,
            measured: meas.final_err,
            extra: BTreeMap::from([
                ("n_MHA".to_string(), masked.budgets[0].n_mha as f64),
                ("n_FC".to_string(), masked.budgets[0].n_fc as f64),
                ("hit".to_string(), f64::from(u8::from(hit))),
                ("schedule_ok".to_string(), f64::from(u8::from(!hit || within))),
            ]),
        });
    }
    write_records_csv(&ctx.out.join("approx-transformer.csv"), &records)?;
    fs::write(ctx.out.join("approx-transformer.report.json"), serde_json::to_string_pretty(&first_report)? + "\n")?;
    manifest.outputs = vec!["approx-transformer.csv".into(), "approx-transformer.report.json".into()];
    manifest.results = json!({ "alpha": alpha, "max_measured": records.iter().map(|r| r.measured).fold(0.0, f64::max) });
    Ok(())
}

fn run_sweep_dim(cfg: &DimSweepConfig, ctx: &Ctx, manifest: &mut Manifest) -> Result<()> {
    let r = sweep_hidden_dim(cfg, ctx.seed, ctx.trials)?;
    write_records_csv(&ctx.out.join("sweep-dim.csv"), &r.records)?;
    write_rows_csv(&ctx.out.join("sweep-dim.summary.csv"), &r.summary)?;
    manifest.outputs = vec!["sweep-dim.csv".into(), "sweep-dim.summary.csv".into()];
    manifest.notes.push("default dimension grid is a stand-in; the reference grid is unstated".into());
    manifest.results = json!({ "fit": r.fit, "audit": r.audit, "target": r.target });
    Ok(())
}

fn run_sweep_seq(cfg: &SeqSweepConfig, ctx: &Ctx, manifest: &mut Manifest) -> Result<()> {
    let r = sweep_seq_len(cfg, ctx.seed, ctx.trials)?;
    write_records_csv(&ctx.out.join("sweep-seq.csv"), &r.records)?;
    write_rows_csv(&ctx.out.join("sweep-seq.summary.csv"), &r.summary)?;
    manifest.outputs = vec!["sweep-seq.csv".into(), "sweep-seq.summary.csv".into()];
    let slopes: BTreeMap<String, f64> = r.slopes.iter().map(|(n, s)| (n.to_string(), *s)).collect();
    manifest.results = json!({ "log_log_slopes": slopes, "target": r.target });
    Ok(())
}

fn run_sweep_blocks(cfg: &BlockSweepConfig, ctx: &Ctx, manifest: &mut Manifest) -> Result<()> {
    let r = sweep_blocks(cfg, ctx.seed, ctx.trials)?;
    write_records_csv(&ctx.out.join("sweep-blocks.csv"), &r.records)?;
    write_rows_csv(&ctx.out.join("sweep-blocks.summary.csv"), &r.summary)?;
    manifest.outputs = vec!["sweep-blocks.csv".into(), "sweep-blocks.summary.csv".into()];
    let fits: BTreeMap<String, Value> =
        r.fits.iter().map(|(b, f)| Ok((b.to_string(), serde_json::to_value(f)?))).collect::<Result<_>>()?;
    manifest.results = json!({ "fits": fits, "hit_trials": r.hit_trials, "schedule_violations": r.schedule_violations });
    Ok(())
}

fn run_popup(cfg: &PopupSweepConfig, ctx: &Ctx, manifest: &mut Manifest) -> Result<()> {
    let scales = cfg.scales.clone().unwrap_or_else(|| cfg.popup.default_scales());
    let seeds = trial_seeds(ctx.seed, ctx.trials);
    let (rows, curve) = scale_sweep(&scales, &seeds, &cfg.popup, &RngStream::new(ctx.seed).derive("data"))?;
    write_rows_csv(&ctx.out.join("edge-popup-sweep.csv"), &curve)?;
    write_rows_csv(&ctx.out.join("edge-popup-sweep.summary.csv"), &rows)?;
    manifest.outputs = vec!["edge-popup-sweep.csv".into(), "edge-popup-sweep.summary.csv".into()];
    let means: Vec<Value> = scales
        .iter()
        .map(|&s| json!({ "scale": s, "mean_best_val_loss": crate::popup::mean_loss_at(&rows, s) }))
        .collect();
    manifest.results = json!({ "scales": scales, "theory_scale": cfg.popup.theory_scale(), "means": means });
    Ok(())
}

fn run_calibrate(cfg: &CalibrationConfig, ctx: &Ctx, manifest: &mut Manifest) -> Result<()> {
    let cfg = CalibrationConfig { seeds: ctx.trials, ..cfg.clone() };
    let c = calibrate_c(&cfg, ctx.seed)?;
    write_rows_csv(&ctx.out.join("calibrate-c.csv"), &c.rows)?;
    manifest.outputs = vec!["calibrate-c.csv".into()];
    manifest.results = json!({ "C_hat": c.c_hat, "block_size": c.block_size });
    println!("C_hat = {}", c.c_hat);
    Ok(())
}

fn thread_count(flag: Option<usize>) -> std::result::Result<Option<usize>, Failure> {
    if let Some(n) = flag {
        return if n == 0 { Err(Failure::Usage("--threads must be positive".into())) } else { Ok(Some(n)) };
    }
    match std::env::var("SLT_FORGE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::Usage(format!("SLT_FORGE_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn execute<C, F>(cli: &Cli, name: &str, default_trials: usize, config: Option<C>, run: F) -> std::result::Result<(), Failure>
where
    C: Serialize + DeserializeOwned + Default,
    F: FnOnce(&C, &Ctx, &mut Manifest) -> Result<()>,
{
    let loaded = match config {
        Some(c) => Loaded { config: c, seed: None, trials: None },
        None => load_config::<C>(cli.config.as_deref(), name)?,
    };
    let seed = cli.seed.or(loaded.seed).unwrap_or(0);
    let trials = cli.trials.or(loaded.trials).unwrap_or(default_trials);
    if trials == 0 {
        return Err(Failure::Usage("--trials must be positive".into()));
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).map_err(SltError::from)?;
    let ctx = Ctx { out, seed, trials };
    let mut manifest = Manifest::new(name, seed, trials, &loaded.config)?;
    let outcome = run(&loaded.config, &ctx, &mut manifest);
    if let Err(e) = &outcome {
        manifest.results = json!({ "error": e.to_string() });
    }
    let path = manifest.write(&ctx.out)?;
    outcome?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> std::result::Result<(), Failure> {
    let name = cli.cmd.name();
    let trials = cli.cmd.default_trials();
    match &cli.cmd {
        Cmd::ApproxMha => execute::<ApproxMhaConfig, _>(cli, name, trials, None, approx_mha),
        Cmd::ApproxTransformer => execute::<ApproxTransformerConfig, _>(cli, name, trials, None, approx_transformer),
        Cmd::SweepDim => execute::<DimSweepConfig, _>(cli, name, trials, None, run_sweep_dim),
        Cmd::SweepSeq => execute::<SeqSweepConfig, _>(cli, name, trials, None, run_sweep_seq),
        Cmd::SweepBlocks => execute::<BlockSweepConfig, _>(cli, name, trials, None, run_sweep_blocks),
        Cmd::EdgePopupSweep => execute::<PopupSweepConfig, _>(cli, name, trials, None, run_popup),
        Cmd::CalibrateC { eps } => {
            let mut loaded = load_config::<CalibrationConfig>(cli.config.as_deref(), name)?;
            if let Some(e) = eps {
                loaded.config.eps = *e;
            }
            let trials = cli.trials.or(loaded.trials).unwrap_or(loaded.config.seeds);
            let cli2 = Cli { seed: cli.seed.or(loaded.seed), trials: Some(trials), out: cli.out.clone(), config: None, threads: cli.threads, cmd: Cmd::Selftest };
            execute(&cli2, name, trials, Some(loaded.config), run_calibrate)
        }
        Cmd::Selftest => {
            let checks = run_selftest()?;
            let mut ok = true;
            for c in &checks {
                println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            if ok {
                Ok(())
            } else {
                Err(Failure::Run(invalid("selftest failed")))
            }
        }
    }
}

/// Parses `argv` (program name first) and runs; returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = match thread_count(cli.threads) {
        Ok(t) => t,
        Err(Failure::Usage(m)) | Err(Failure::Run(SltError::InvalidArgument(m))) => {
            eprintln!("error: {m}");
            return 2;
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}
