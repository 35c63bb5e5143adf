"""End-to-end synthetic-shape experiment.

Group X holds 200 squares, group Y 40 squares and 160 ellipses; a seeded
random-feature encoder embeds both. The run computes the test, influence
scores, high- and low-influence removal curves and attribution maps, and
evaluates the expected qualitative outcomes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from xdmmd import attribution, dmmd, encoder, influence, report, synthgen
from xdmmd.embedding import EmbeddingSet
from xdmmd.influence import Direction

X_COMPOSITION = {"square": 200}
Y_COMPOSITION = {"square": 40, "ellipse": 160}
FRACTIONS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
# removal restricted to group Y, the group carrying the extra factor
SCOPE = "Y"
COVERAGE_SAMPLES = 20
COVERAGE_THRESHOLD = 0.5


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


@dataclass
class ReproRun:
    seed: int
    B: int
    images: list
    model: encoder.EncoderModel
    emb: EmbeddingSet
    test: dmmd.TestResult
    table: influence.InfluenceTable
    summary: influence.DistributionSummary
    high: influence.AblationCurve
    low: influence.AblationCurve
    coverage: dict[str, float]
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def significance_trend(curve: influence.AblationCurve, alpha: float = 0.01) -> Check:
    fr = [p.fraction for p in curve.points]
    ps = [p.p_value for p in curve.points]
    rho = spearmanr(fr, ps).correlation if len(set(ps)) > 1 else float("nan")
    ok = ps[0] <= alpha and bool(rho > 0) and ps[-1] > ps[0]
    return Check(
        "high-influence removal raises p",
        ok,
        f"base p={ps[0]:.4g} (<= {alpha}), spearman(fraction, p)={rho:.3f} (> 0), final p={ps[-1]:.4g} (> base); p={ps}",
    )


def subgroup_medians(table: influence.InfluenceTable) -> Check:
    ell = [r.influence for r in table.rows if r.group == "Y" and r.subgroup == "ellipse"]
    sq = [r.influence for r in table.rows if r.group == "Y" and r.subgroup == "square"]
    med_e, med_s = float(np.median(ell)), float(np.median(sq))
    # right shift: at either median the ellipse CDF sits at or below the square CDF
    dom = all(influence.cdf_at(ell, t) <= influence.cdf_at(sq, t) for t in (med_e, med_s))
    return Check(
        "subgroup influence medians",
        med_e > 0 and med_s < 0 and dom,
        f"median IF ellipse(Y)={med_e:.4g} (> 0), square(Y)={med_s:.4g} (< 0), ellipse CDF right-shifted={dom}",
    )


def low_removal(base: dmmd.TestResult, low: influence.AblationCurve) -> Check:
    p = low.points[-1].p_value
    return Check(
        "low-influence removal does not raise p",
        p <= base.p_value,
        f"p after removing {low.points[-1].fraction:g} lowest={p:.4g} (<= base {base.p_value:.4g})",
    )


def coverage_check(values: dict[str, float]) -> Check:
    mean = float(np.mean(list(values.values())))
    return Check(
        "attribution mass inside ellipse masks",
        len(values) >= COVERAGE_SAMPLES and mean >= COVERAGE_THRESHOLD,
        f"mean coverage over {len(values)} ellipses={mean:.3f} (>= {COVERAGE_THRESHOLD}) at the penultimate conv layer",
    )


def run_dsprites(seed: int = 42, B: int = 999, threads: int = 1, out: str | Path | None = None) -> ReproRun:
    images, manifest = synthgen.generate_two_groups(X_COMPOSITION, Y_COMPOSITION, seed)
    model = encoder.build_random(seed)
    emb = encoder.embed_images(
        model,
        images,
        [e.id for e in manifest.entries],
        [e.group for e in manifest.entries],
        [e.subgroup for e in manifest.entries],
        threads,
    )
    test = dmmd.permutation_pvalue(emb, B, seed, threads)
    table = influence.influence_scores(emb, threads)
    summary = influence.summarize(table)
    high = influence.ablation_curve(emb, table, FRACTIONS, Direction.REMOVE_HIGHEST, B, seed, SCOPE, threads)
    low = influence.ablation_curve(emb, table, (0.0, 0.2), Direction.REMOVE_LOWEST, B, seed, SCOPE, threads)

    layer = encoder.resolve_layer(model, "penultimate")
    att = attribution.Attributor(model, emb)
    ellipses = [im for im in images if im.spec.kind is synthgen.ShapeKind.ELLIPSE][:COVERAGE_SAMPLES]
    maps = {im.id: att.attribute(im, im.id, layer, attribution.Variant.GRADIENT_WEIGHTED) for im in ellipses}
    cov = {sid: attribution.coverage(m, im.mask) for (sid, m), im in zip(maps.items(), ellipses)}

    run = ReproRun(seed, B, images, model, emb, test, table, summary, high, low, cov)
    run.checks = [significance_trend(high), subgroup_medians(table), low_removal(test, low), coverage_check(cov)]
    if out is not None:
        _write_outputs(run, manifest, maps, ellipses, Path(out))
    return run


def _write_outputs(run: ReproRun, manifest, maps, ellipses, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    synthgen.write_images(run.images, manifest, out / "images")
    manifest.write_csv(out / "images" / "manifest.csv")
    encoder.save_model(run.model, out / "model.dmex")
    run.emb.write_csv(out / "embeddings.csv")
    (out / "test.json").write_text(run.test.to_json())
    run.table.write_csv(out / "influence.csv")
    (out / "summary.json").write_text(run.summary.to_json())
    run.summary.write_cdf_csv(out / "cdf.csv")
    run.high.write_csv(out / "ablation_highest.csv")
    run.low.write_csv(out / "ablation_lowest.csv")
    for im in ellipses:
        attribution.write_map_files(maps[im.id], im, out / "maps")
    attribution.write_coverage_csv(
        out / "coverage.csv",
        [(sid, "ellipse", attribution.Variant.GRADIENT_WEIGHTED.value, c) for sid, c in run.coverage.items()],
    )
    figs = out / "figures"
    figs.mkdir(exist_ok=True)
    report.ablation_figure({"remove highest": out / "ablation_highest.csv"}, figs / "removal_effect.svg")
    report.box_figure(out / "influence.csv", figs / "influence_box.svg")
    report.cdf_figure(out / "influence.csv", figs / "influence_cdf.svg")
    (out / "acceptance.txt").write_text("".join(c.line() + "\n" for c in run.checks))
    (out / "run.json").write_text(
        json.dumps({"seed": run.seed, "B": run.B, "scope": SCOPE, "fractions": list(FRACTIONS)}, indent=2) + "\n"
    )
