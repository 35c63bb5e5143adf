"""Acceptance criteria 1-10, one test each.

Every test records a ``[PASS]``/``[FAIL]`` line; the lines are printed in the
terminal summary (see conftest.py) and by ``python3 tests/test_acceptance.py``.
"""

import shutil
import time

import numpy as np
import pytest

from conftest import emb1d
from test_encoder import fd_check
from xdmmd import attribution, dmmd, encoder, influence, repro, synthgen
from xdmmd.attribution import Variant
from xdmmd.embedding import EmbeddingSet

LINES: dict[int, str] = {}


def record(number, name, passed, detail):
    LINES[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {name}: {detail}"
    assert passed, LINES[number]


@pytest.fixture(scope="module")
def dsprites():
    t0 = time.perf_counter()
    run = repro.run_dsprites(seed=42, B=999)
    return run, time.perf_counter() - t0


def test_c01_hand_statistic():
    a = dmmd.statistic(emb1d([1], [3]))
    b = dmmd.statistic(emb1d([0, 2], [1, 3]))
    ok = abs(a - 2.0) <= 1e-12 and abs(b - 1.0) <= 1e-12
    record(1, "hand-computed statistic", ok, f"S({{1}},{{3}})={a!r}, S({{0,2}},{{1,3}})={b!r}")


def test_c02_influence_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst, violations = 0.0, 0
    for _ in range(120):
        h = int(rng.integers(1, 11))
        n, m = rng.integers(2, 51, size=2)
        e = EmbeddingSet.from_arrays(rng.normal(size=(n, h)), rng.normal(rng.normal(), 1, size=(m, h)))
        a = influence.influence_scores(e).scores
        b = influence.influence_scores_naive(e).scores
        err = np.abs(a - b)
        violations += int(np.count_nonzero(err > np.maximum(1e-9 * np.abs(b), 1e-12)))
        big = np.abs(b) >= 1e-6
        if big.any():
            worst = max(worst, float((err[big] / np.abs(b[big])).max()))
    amp = influence.influence_of(emb1d([0, 2], [4]), "X0000")
    sup = influence.influence_of(emb1d([-1, 1], [0]), "X0001")
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and amp == 4.0 and sup == -0.5 and elapsed < 5
    record(2, "influence exactness", ok,
           f"120 random sets, {violations} entries outside 1e-9 rel / 1e-12 abs, "
           f"max rel err {worst:.2e} where |IF| >= 1e-6; IF={amp!r}, IF={sup!r}; {elapsed:.2f}s (< 5s)")


def test_c03_gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst_a = 0.0
    for _ in range(20):
        n, m, h = rng.integers(1, 30, size=3)
        e = EmbeddingSet.from_arrays(rng.normal(size=(n, h)), rng.normal(0.5, 1, size=(m, h)))
        sid = e.ids[int(rng.integers(len(e)))]
        i = e.index(sid)
        g = dmmd.statistic_gradient_wrt_sample(e, sid)
        fd = np.empty(h)
        eps = 1e-3
        for k in range(h):
            vp, vm = e.vectors.copy(), e.vectors.copy()
            vp[i, k] += eps
            vm[i, k] -= eps
            sp = dmmd.statistic(EmbeddingSet(e.ids, e.groups, e.subgroups, vp, e.dim))
            sm = dmmd.statistic(EmbeddingSet(e.ids, e.groups, e.subgroups, vm, e.dim))
            fd[k] = (sp - sm) / (2 * eps)
        worst_a = max(worst_a, float(np.max(np.abs(g - fd)) / max(np.max(np.abs(g)), 1e-12)))
    checked, worst_b = 0, 0.0
    for pair in range(6):
        model = encoder.build_random(500 + pair)
        img = rng.uniform(size=(64, 64)) if pair % 2 == 0 else synthgen.render_shape(
            synthgen.sample_spec(synthgen.ShapeKind.ELLIPSE, rng)).pixels
        for layer in model.conv_indices:
            c, w = fd_check(model, img, layer, rng.normal(size=10), rng, count=25)
            checked += c
            worst_b = max(worst_b, w)
    elapsed = time.perf_counter() - t0
    ok = worst_a < 1e-8 and checked >= 200 and worst_b < 1e-4 and elapsed < 60
    record(3, "gradient checks", ok,
           f"(a) statistic rel err {worst_a:.2e} (< 1e-8); (b) encoder {checked} entries over 6 pairs, "
           f"max rel err {worst_b:.2e} (< 1e-4); {elapsed:.1f}s (< 60s)")


def test_c04_type_one_calibration():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    rejections = 0
    for t in range(200):
        e = EmbeddingSet.from_arrays(rng.normal(size=(50, 10)), rng.normal(size=(50, 10)))
        rejections += dmmd.permutation_pvalue(e, B=200, seed=t).p_value <= 0.05
    rate = rejections / 200
    elapsed = time.perf_counter() - t0
    ok = 0.013 <= rate <= 0.10 and elapsed < 120
    record(4, "type-I calibration", ok, f"rejection rate {rate:.3f} in [0.013, 0.10]; {elapsed:.1f}s (< 120s)")


def test_c05_dsprites_significance(dsprites):
    run, elapsed = dsprites
    check = repro.significance_trend(run.high)
    record(5, "dSprites significance trend", check.passed and elapsed < 180,
           f"{check.detail}; full run {elapsed:.1f}s (< 180s)")


def test_c06_subgroup_medians(dsprites):
    check = repro.subgroup_medians(dsprites[0].table)
    record(6, "subgroup medians", check.passed, check.detail)


def test_c07_low_influence_removal(dsprites):
    run = dsprites[0]
    check = repro.low_removal(run.test, run.low)
    record(7, "low-influence removal", check.passed, check.detail)


def test_c08_attribution_sanity(dsprites):
    run = dsprites[0]
    cov = repro.coverage_check(run.coverage)
    # duplicate groups: mu_X = mu_Y exactly
    x = run.emb.x[:20]
    dup = EmbeddingSet.from_arrays(x, x, y_ids=[f"copy{i}" for i in range(len(x))])
    im = run.images[0]
    zero = all(
        not attribution.attribute(run.model, im, dup, layer, v, sample_id=run.emb.ids[0]).raw.any()
        for layer in run.model.conv_indices
        for v in Variant
    )
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        c = int(rng.integers(1, 33))
        A, G = np.abs(rng.normal(size=(c, 8, 8))), rng.normal(size=(c, 8, 8))
        p = rng.permutation(c)
        for v in Variant:
            worst = max(worst, float(np.abs(attribution.aggregate(A, G, v) - attribution.aggregate(A[p], G[p], v)).max()))
    ok = cov.passed and zero and worst <= 1e-12
    record(8, "attribution sanity", ok,
           f"{cov.detail}; zero maps for mu_X=mu_Y: {zero}; channel permutation max diff {worst:.1e} (<= 1e-12)")


def test_c09_cli_determinism(tmp_path):
    from xdmmd.cli import main

    data = tmp_path / "data"
    main(["gen", "--seed", "9", "--x", "square:20", "--y", "square:4,ellipse:16", "--out", str(data)])
    main(["embed", "--manifest", str(data / "manifest.csv"), "--seed", "9", "--save-model", str(tmp_path / "m.dmex"),
          "--out", str(tmp_path / "e.csv")])
    emb = str(tmp_path / "e.csv")
    commands = {
        "test": ["test", "--emb", emb, "--B", "300", "--seed", "3", "--out", "{o}/t.json"],
        "influence": ["influence", "--emb", emb, "--out", "{o}/i.csv", "--summary", "{o}/s.json", "--cdf", "{o}/c.csv"],
        "ablate": ["ablate", "--emb", emb, "--fractions", "0,0.1,0.2,0.3", "--B", "300", "--seed", "3", "--out", "{o}/a.csv"],
        "attribute": ["attribute", "--manifest", str(data / "manifest.csv"), "--emb", emb, "--model",
                      str(tmp_path / "m.dmex"), "--variant", "all", "--limit", "8", "--out", "{o}/maps"],
    }
    out = tmp_path / "out"
    same = {}
    for name, argv in commands.items():
        snaps = []
        for threads in (1, 1, 8):
            shutil.rmtree(out, ignore_errors=True)
            out.mkdir()
            code = main([a.replace("{o}", str(out)) for a in argv] + ["--threads", str(threads)])
            snaps.append((code, {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}))
        same[name] = snaps[0][0] == 0 and len(snaps[0][1]) > 0 and snaps[0] == snaps[1] == snaps[2]
    record(9, "determinism", all(same.values()),
           ", ".join(f"{k}={'identical' if v else 'DIFFERS'}" for k, v in same.items()) + " (2 runs, threads 1 vs 8)")


def test_c10_format_round_trips(tmp_path):
    model = encoder.build_random(42)
    encoder.save_model(model, tmp_path / "m.dmex")
    back = encoder.load_model(tmp_path / "m.dmex")
    model_ok = back.layers == model.layers and all(
        a.tobytes() == b.tobytes() for pa, pb in zip(model.params, back.params) for a, b in zip(pa, pb)
    )
    encoder.save_model(back, tmp_path / "m2.dmex")
    model_ok &= (tmp_path / "m.dmex").read_bytes() == (tmp_path / "m2.dmex").read_bytes()
    rng = np.random.default_rng(10)
    vec = rng.normal(size=(300, 10)) * 10.0 ** rng.integers(-300, 300, size=(300, 10))
    vec[0, :3] = [np.nextafter(1.0, 2.0), 5e-324, -0.0]
    emb = EmbeddingSet.from_arrays(vec[:150], vec[150:])
    emb.write_csv(tmp_path / "e.csv")
    emb_ok = EmbeddingSet.read_csv(tmp_path / "e.csv").vectors.tobytes() == emb.vectors.tobytes()
    record(10, "format round-trips", model_ok and emb_ok,
           f"model save/load bit-identical: {model_ok}; 3000 embedding doubles exact: {emb_ok}")


if __name__ == "__main__":
    import sys

    # the summary lines are printed by the conftest terminal-summary hook
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
