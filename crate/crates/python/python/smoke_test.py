"""Smoke test for the slt_forge extension module."""

import json
import math
import random

import slt_forge as sf


def rand_matrix(rng, rows, cols, bound=1.0):
    return [[rng.uniform(-bound, bound) for _ in range(cols)] for _ in range(rows)]


def main():
    rng = random.Random(0)

    chosen, err, hit = sf.solve_subset_sum([0.5, -0.25, 0.125, 0.75], 0.875, optimal=True)
    items = [0.5, -0.25, 0.125, 0.75]
    assert hit and err == 0.0
    assert sum(items[i] for i in chosen) == 0.875

    block = sf.required_block_size(2, 2, 0.1)
    assert block == 15, block

    w = rand_matrix(rng, 2, 2, 0.5)
    w1 = rand_matrix(rng, 2 * block, 2)
    w2 = rand_matrix(rng, 2, 2 * block)
    m1, m2, max_err, all_hit = sf.approx_matrix_product(w, w1, w2, 0.025)
    assert all(v in (0.0, 1.0) for row in m1 + m2 for v in row)
    assert all_hit == (max_err <= 0.025)

    q = [[0.3, 0.0], [0.0, 0.3]]
    k = [[0.2, 0.1], [0.0, 0.2]]
    v = [[0.5, 0.0], [0.0, 0.5]]
    o = [[0.4], [0.3]]
    target = sf.MhaWeights([(q, k, v, o)])
    assert target.shape == (1, 2, 1, 2, 2)
    assert target.is_theory_compliant()

    alpha = math.sqrt(2.0)
    masked = sf.construct_slt_mha(target, 64, 64, 0.5, alpha, seed=1, optimal=True)
    xs = []
    for _ in range(8):
        t = rng.randint(2, 6)
        x = []
        for _ in range(t):
            a = rng.uniform(0, 2 * math.pi)
            x.append([math.cos(a), math.sin(a)])
        xs.append(x)
    error = sf.measure_mha_error(target, masked, xs)
    assert error >= 0.0
    if masked.all_hit():
        assert error <= 0.5, error
    pruned = masked.pruned()
    assert pruned.shape[0] == 1
    assert json.loads(masked.to_json())

    mask = sf.topk_mask([[0.1, 0.9, 0.5], [0.3, 0.7, 0.2]], 50.0)
    assert sum(map(sum, mask)) == 3

    assert sf.softmax_perturbation_bound(0.0, 2, 1.0) == 0.0

    dims = sf.sweep_hidden_dim(0, 2, json.dumps({"dims": [16, 24], "n_eval": 4}))
    assert len(dims["records"]) == 4 and dims["fit"] is not None

    try:
        sf.sweep_hidden_dim(0, 1, json.dumps({"colour": 1}))
    except ValueError:
        pass
    else:
        raise AssertionError("unknown config field accepted")

    print("smoke test ok, version", sf.__version__)


if __name__ == "__main__":
    main()
