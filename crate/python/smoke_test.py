"""Smoke test for the `peso` extension module.

Build first:  maturin develop -m crates/py/Cargo.toml --release
"""

import json
import math
import random

import peso


def matmul(a, b):
    return [[sum(x * y for x, y in zip(row, col)) for col in zip(*b)] for row in a]


def max_abs_diff(a, b):
    return max(abs(x - y) for ra, rb in zip(a, b) for x, y in zip(ra, rb))


def scale_cols(u, s):
    return [[x * si for x, si in zip(row, s)] for row in u]


def main():
    rng = random.Random(0)
    a = [[rng.gauss(0, 1) for _ in range(5)] for _ in range(7)]

    u, s, vt = peso.svd_full(a)
    assert max_abs_diff(matmul(scale_cols(u, s), vt), a) < 1e-10
    assert all(x >= y for x, y in zip(s, s[1:]))

    u2, s2, vt2 = peso.svd_top_r(a, 2)
    assert len(s2) == 2 and len(u2[0]) == 2 and len(vt2) == 2

    q, r = peso.qr_thin(a)
    assert max_abs_diff(matmul(q, r), a) < 1e-10

    rot = peso.orthogonal_procrustes(q[:][:], q)
    ident = [[1.0 if i == j else 0.0 for j in range(5)] for i in range(5)]
    assert max_abs_diff(rot, ident) < 1e-10

    r_l, sig, r_r = peso.polar_refactor([[2.0, 0.0], [0.0, 3.0]])
    assert sig == sorted(sig, reverse=True) and abs(sig[0] - 3.0) < 1e-12

    assert abs(peso.rms_norm([[3.0, 4.0]]) - math.sqrt(12.5)) < 1e-15

    g = [[rng.gauss(0, 1) for _ in range(4)] for _ in range(6)]
    ad_a, ad_b = peso.restart_adapters_from_gradient(g, 2, 2.0)
    top_u, top_s, top_vt = peso.svd_top_r(g, 2)
    want = [[-x / 2.0 for x in row] for row in matmul(scale_cols(top_u, top_s), top_vt)]
    assert max_abs_diff(matmul(ad_a, ad_b), want) < 1e-12

    assert peso.beta2_at(10, 30, 10) == 0.95
    assert abs(peso.beta2_at(40, 30, 10) - 0.999) < 1e-15
    try:
        peso.beta2_at(5, 30, 10)
    except ValueError:
        pass
    else:
        raise AssertionError("beta2_at before the restart step should raise")

    cfg = {
        "problem": {"kind": "quadratic", "a": 10, "n": 8, "r_ones": 4},
        "method": {"kind": "peso-lora-r", "K": 10},
        "total_steps": 100,
    }
    out = peso.run(json.dumps(cfg))
    lines = out["trace_csv"].splitlines()
    assert lines[0] == peso.TRACE_HEADER
    assert len(lines) == 101
    assert out["aborted_at"] is None
    assert out["restart_steps"] == list(range(1, 101, 10))
    assert peso.trace_summary(out["trace_csv"]) == out["summary"]
    assert out["summary"]["final_loss"] < 100.0

    try:
        peso.run(json.dumps({"method": {"K": 0}}))
    except ValueError as e:
        assert "method.K" in str(e)
    else:
        raise AssertionError("K = 0 should be rejected")

    print("python smoke test passed; final_loss=%.3e" % out["summary"]["final_loss"])


if __name__ == "__main__":
    main()
