"""Command-line entry point: ``xdmmd <subcommand> ...``.

Exit codes: 0 success, 1 pipeline failure, 2 usage error. Nothing is read
from the environment; every stochastic step is seeded from a flag.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

from xdmmd import __version__, attribution, dmmd, encoder, influence, report, repro, synthgen
from xdmmd.embedding import EmbeddingSet
from xdmmd.errors import XdmmdError

DEFAULT_FRACTIONS = "0,0.05,0.1,0.15,0.2,0.25,0.3,0.35,0.4,0.45,0.5"


def _fractions(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad fraction list {text!r}") from None


def _composition(text: str) -> dict[str, int]:
    try:
        return synthgen.parse_composition(text)
    except XdmmdError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _pair(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}") from None
    return lo, hi


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="xdmmd", description="Explainable two-sample testing on neural embeddings.", formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, help: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help, description=help, formatter_class=fmt)
        sp.add_argument("--threads", type=_positive, default=1, help="worker threads; results do not depend on it")
        return sp

    g = add("gen", "generate square/ellipse images and a manifest")
    g.add_argument("--x", type=_composition, default="square:200", help="group X composition kind:count,...")
    g.add_argument("--y", type=_composition, default="square:40,ellipse:160", help="group Y composition")
    g.add_argument("--seed", type=int, required=True, help="generator seed")
    g.add_argument("--scale-range", type=_pair, default=(0.5, 1.0), help="uniform scale factor range lo,hi")
    g.add_argument("--out", type=Path, required=True, help="output directory (images + manifest.csv)")

    e = add("embed", "embed manifest images with the encoder")
    e.add_argument("--manifest", type=Path, required=True, help="manifest CSV; image paths are relative to it")
    e.add_argument("--model", type=Path, help="model file; a seeded random encoder is built when omitted")
    e.add_argument("--seed", type=int, help="seed of the random encoder (required without --model)")
    e.add_argument("--save-model", type=Path, help="also write the encoder used")
    e.add_argument("--out", type=Path, required=True, help="embeddings CSV")

    t = add("test", "DMMD permutation test")
    t.add_argument("--emb", type=Path, required=True, help="embeddings CSV")
    t.add_argument("--B", type=_positive, default=dmmd.DEFAULT_B, help="number of permutations")
    t.add_argument("--seed", type=int, required=True, help="permutation seed")
    t.add_argument("--out", type=Path, help="result JSON (stdout when omitted)")
    t.add_argument("--dump-perms", type=Path, help="write permuted statistics as one-column CSV")

    i = add("influence", "leave-one-out influence scores")
    i.add_argument("--emb", type=Path, required=True, help="embeddings CSV")
    i.add_argument("--out", type=Path, required=True, help="influence CSV")
    i.add_argument("--summary", type=Path, help="per-subgroup summary JSON")
    i.add_argument("--cdf", type=Path, help="CDF CSV")
    i.add_argument("--whisker", type=float, default=1.5, help="Tukey fence multiplier for outliers")

    a = add("ablate", "p-value after removing influence-ranked samples")
    a.add_argument("--emb", type=Path, required=True, help="embeddings CSV")
    a.add_argument("--influence", type=Path, help="influence CSV (computed when omitted)")
    a.add_argument("--fractions", type=_fractions, default=DEFAULT_FRACTIONS, help="comma-separated, starting at 0")
    a.add_argument("--direction", choices=[d.value for d in influence.Direction], default="highest",
                   help="remove the highest- or lowest-influence samples first")
    a.add_argument("--scope", choices=influence.SCOPES, default="global",
                   help="remove across both groups, per group, or from one group only")
    a.add_argument("--B", type=_positive, default=dmmd.DEFAULT_B)
    a.add_argument("--seed", type=int, required=True, help="permutation seed of the first point")
    a.add_argument("--out", type=Path, required=True, help="ablation CSV")

    at = add("attribute", "attribution maps of the statistic for individual samples")
    at.add_argument("--manifest", type=Path, required=True, help="manifest CSV")
    at.add_argument("--emb", type=Path, required=True, help="embeddings CSV the statistic is computed on")
    at.add_argument("--model", type=Path, help="model file; a seeded random encoder is built when omitted")
    at.add_argument("--seed", type=int, help="seed of the random encoder (required without --model)")
    at.add_argument("--layer", default="final", help="final, penultimate or a conv layer index")
    at.add_argument("--variant", choices=[v.value for v in attribution.Variant] + ["all"], default="gradient-weighted",
                    help="channel aggregation")
    at.add_argument("--ids", help="comma-separated sample ids; all manifest entries when omitted")
    at.add_argument("--subgroup", help="only samples of this subgroup")
    at.add_argument("--limit", type=int, help="at most this many samples")
    at.add_argument("--out", type=Path, required=True, help="output directory (maps + coverage.csv)")

    r = add("report", "SVG figures from pipeline outputs")
    r.add_argument("--ablation", type=Path, action="append", default=[], help="ablation CSV; repeatable")
    r.add_argument("--influence", type=Path, help="influence CSV (box and CDF figures)")
    r.add_argument("--out", type=Path, required=True, help="output directory")

    d = add("repro-dsprites", "full synthetic-shape experiment with acceptance summary")
    d.add_argument("--seed", type=int, default=42, help="seed for data, encoder and permutations")
    d.add_argument("--B", type=_positive, default=999, help="number of permutations")
    d.add_argument("--out", type=Path, required=True, help="output directory")
    return p


def _model(args) -> encoder.EncoderModel:
    if args.model is not None:
        return encoder.load_model(args.model)
    return encoder.build_random(args.seed)


def _config(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "threads"}


def cmd_gen(args) -> int:
    geometry = synthgen.ShapeGeometry(scale_range=args.scale_range)
    images, manifest = synthgen.generate_two_groups(args.x, args.y, args.seed, geometry)
    synthgen.write_images(images, manifest, args.out)
    manifest.write_csv(args.out / "manifest.csv")
    print(f"wrote {len(images)} images to {args.out}")
    return 0


def cmd_embed(args) -> int:
    model = _model(args)
    manifest = synthgen.GroupManifest.read_csv(args.manifest)
    emb = encoder.embed_dataset(model, manifest, args.manifest.parent, args.threads)
    emb.write_csv(args.out)
    if args.save_model:
        encoder.save_model(model, args.save_model)
    print(f"wrote {len(emb)} x {emb.dim} embeddings to {args.out}")
    return 0


def cmd_test(args) -> int:
    emb = EmbeddingSet.read_csv(args.emb)
    res = dmmd.permutation_pvalue(emb, args.B, args.seed, args.threads)
    text = res.to_json(config=_config(args))
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    if args.dump_perms:
        res.write_permutations(args.dump_perms)
    return 0


def cmd_influence(args) -> int:
    emb = EmbeddingSet.read_csv(args.emb)
    table = influence.influence_scores(emb, args.threads)
    table.write_csv(args.out)
    if args.summary or args.cdf:
        summary = influence.summarize(table, args.whisker)
        if args.summary:
            doc = json.loads(summary.to_json())
            doc["base_statistic"] = table.base_statistic
            doc["config"] = _config(args)
            args.summary.write_text(json.dumps(doc, indent=2) + "\n")
        if args.cdf:
            summary.write_cdf_csv(args.cdf)
    return 0


def cmd_ablate(args) -> int:
    emb = EmbeddingSet.read_csv(args.emb)
    table = influence.InfluenceTable.read_csv(args.influence) if args.influence else influence.influence_scores(emb, args.threads)
    curve = influence.ablation_curve(
        emb, table, args.fractions, influence.Direction(args.direction), args.B, args.seed, args.scope, args.threads
    )
    curve.write_csv(args.out)
    return 0


def cmd_attribute(args) -> int:
    from xdmmd._parallel import pmap

    model = _model(args)
    manifest = synthgen.GroupManifest.read_csv(args.manifest)
    emb = EmbeddingSet.read_csv(args.emb)
    layer = encoder.resolve_layer(model, args.layer)
    variants = list(attribution.Variant) if args.variant == "all" else [attribution.Variant(args.variant)]
    entries = list(manifest.entries)
    if args.ids:
        wanted = [s.strip() for s in args.ids.split(",") if s.strip()]
        by_id = {e.id: e for e in entries}
        missing = [s for s in wanted if s not in by_id]
        if missing:
            raise XdmmdError(f"ids not in manifest: {', '.join(missing)}")
        entries = [by_id[s] for s in wanted]
    if args.subgroup:
        entries = [e for e in entries if e.subgroup == args.subgroup]
    if args.limit is not None:
        entries = entries[: args.limit]
    att = attribution.Attributor(model, emb)
    base = args.manifest.parent

    def one(entry):
        image = encoder.load_image(base / entry.path, entry.id)
        mask = image > 0.5
        rows = []
        for v in variants:
            amap = att.attribute(image, entry.id, layer, v)
            attribution.write_map_files(amap, image, args.out)
            rows.append((entry.id, entry.subgroup, v.value, attribution.coverage(amap, mask)))
        return rows

    args.out.mkdir(parents=True, exist_ok=True)
    rows = [r for part in pmap(one, entries, args.threads) for r in part]
    attribution.write_coverage_csv(args.out / "coverage.csv", rows)
    return 0


def cmd_report(args) -> int:
    if not args.ablation and not args.influence:
        raise XdmmdError("nothing to plot: pass --ablation and/or --influence")
    args.out.mkdir(parents=True, exist_ok=True)
    if args.ablation:
        report.ablation_figure({p.stem: p for p in args.ablation}, args.out / "removal_effect.svg")
    if args.influence:
        report.box_figure(args.influence, args.out / "influence_box.svg")
        report.cdf_figure(args.influence, args.out / "influence_cdf.svg")
    return 0


def cmd_repro(args) -> int:
    run = repro.run_dsprites(args.seed, args.B, args.threads, args.out)
    for c in run.checks:
        print(c.line())
    print("ALL PASS" if run.passed else "SOME CRITERIA FAILED")
    return 0 if run.passed else 1


COMMANDS = {
    "gen": cmd_gen,
    "embed": cmd_embed,
    "test": cmd_test,
    "influence": cmd_influence,
    "ablate": cmd_ablate,
    "attribute": cmd_attribute,
    "report": cmd_report,
    "repro-dsprites": cmd_repro,
}


def _origin(exc: BaseException) -> str:
    """Innermost package module on the traceback, e.g. ``dmmd``."""
    mods = [Path(f.filename).stem for f in traceback.extract_tb(exc.__traceback__) if "xdmmd" in Path(f.filename).parts]
    mods = [m for m in mods if m not in ("errors", "_parallel")]
    return mods[-1] if mods else "cli"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("embed", "attribute") and args.model is None and args.seed is None:
        parser.error(f"{args.command}: either --model or --seed is required to build the encoder")
    try:
        return COMMANDS[args.command](args)
    except XdmmdError as exc:
        print(f"xdmmd {args.command}: [{_origin(exc)}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"xdmmd {args.command}: [{_origin(exc)}] {exc}", file=sys.stderr)
        return 1
