"""Command-line entry points."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .config import load_config
from .errors import AdgveError, ConfigError
from .fusion import FusionModel, train_fusion
from .pipeline import (
    MODULES,
    ablate,
    exit_code,
    filter_manifest,
    load_default_model,
    manifest_entries,
    score_many,
    write_report,
    write_reports,
    zero_model,
)
from .prompts import load_catalog
from .synth import ScenarioSpec, gen_scenario, random_spec, write_scenario

log = logging.getLogger("adgve")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'section.key = value' file (default: $ADGVE_CONFIG)")
    p.add_argument("--threshold", type=float, default=None, help="keep videos with S_overall above this")
    p.add_argument("--model", help="fusion model file (default: bundled model)")
    p.add_argument("--vlm-mode", choices=("remote", "hash_stub", "oracle_stub", "replay"))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--record", help="write every backend response to this transcript file")
    p.add_argument("--transcript", help="transcript to serve responses from in replay mode")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adgve", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="score annotation files into a reports file")
    p.add_argument("annotations", nargs="+")
    _common(p)

    p = sub.add_parser("filter", help="keep manifest entries scoring above the threshold")
    p.add_argument("manifest")
    _common(p)

    p = sub.add_parser("train-fusion", help="fit the fusion head on labelled annotations")
    p.add_argument("manifest")
    _common(p)

    p = sub.add_parser("gen-synthetic", help="write synthetic scenes with planted violations")
    p.add_argument("--spec", help="JSON file: one spec object or a list of them")
    p.add_argument("--count", type=int, default=0, help="additionally generate this many random specs")
    _common(p)

    p = sub.add_parser("ablate", help="threshold sweep and module-drop rank correlations")
    p.add_argument("manifest")
    p.add_argument("--thresholds", default="0.1,0.2,0.3")
    p.add_argument("--drop", default=",".join(MODULES + ("all",)))
    _common(p)

    p = sub.add_parser("report", help="summary, plot data and figures for a reports file")
    p.add_argument("reports")
    p.add_argument("--no-figures", action="store_true")
    _common(p)
    return parser


def _config(args):
    cfg = load_config(args.config)
    overrides = {}
    if args.vlm_mode:
        overrides["vlm.mode"] = args.vlm_mode
    if getattr(args, "record", None):
        overrides["vlm.record_path"] = args.record
    if getattr(args, "transcript", None):
        overrides["vlm.transcript_path"] = args.transcript
    if args.seed is not None:
        overrides["vlm.seed"] = args.seed
        overrides["fusion.seed"] = args.seed
    return cfg.with_values(overrides) if overrides else cfg


def _model(args) -> FusionModel:
    return FusionModel.load(args.model) if args.model else load_default_model()


def _threshold(args, cfg) -> float:
    return float(cfg["fusion.threshold"]) if args.threshold is None else args.threshold


def cmd_score(args) -> int:
    cfg = _config(args)
    scored = score_many([Path(a) for a in args.annotations], cfg, _model(args), _threshold(args, cfg), args.jobs)
    write_reports(scored, args.out)
    return exit_code(scored)


def cmd_filter(args) -> int:
    cfg = _config(args)
    result = filter_manifest(args.manifest, _threshold(args, cfg), cfg, _model(args), args.out, args.jobs)
    print(f"kept {len(result.kept)} of {len(result.scored)} (coverage {result.coverage:.3f})")
    return exit_code(result.scored)


def cmd_train(args) -> int:
    cfg = _config(args)
    entries = manifest_entries(args.manifest)
    # features do not depend on the model; a zero model avoids needing one
    scored = score_many([p for _, p in entries], cfg, zero_model(), 0.5, args.jobs)
    usable = [s for s in scored if s.bundle is not None and s.label is not None]
    if len(usable) < 2:
        log.error("need at least two labelled, scorable videos; found %d", len(usable))
        return 3
    hyper = {k.split(".", 1)[1]: cfg[k] for k in cfg if k.startswith("fusion.") and k != "fusion.threshold"}
    model = train_fusion([s.bundle for s in usable], [s.label for s in usable], hyper, load_catalog().checksum)
    model.save(args.out)
    print(json.dumps(model.report, sort_keys=True))
    return exit_code(scored)


def cmd_gen(args) -> int:
    specs = []
    if args.spec:
        doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        specs += [ScenarioSpec.from_dict(d) for d in (doc if isinstance(doc, list) else [doc])]
    base = args.seed or 0
    specs += [random_spec(base + i) for i in range(args.count)]
    if not specs:
        log.error("nothing to generate: pass --spec and/or --count")
        return 1
    out = Path(args.out)
    names = []
    for spec in specs:
        path = write_scenario(*gen_scenario(spec), out)
        names.append(path.name)
    (out / "manifest.txt").write_text("".join(n + "\n" for n in names), encoding="utf-8")
    print(f"wrote {len(names)} scenes to {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    model = _model(args)
    entries = manifest_entries(args.manifest)
    scored = score_many([p for _, p in entries], cfg, model, _threshold(args, cfg), args.jobs)
    thresholds = [float(t) for t in args.thresholds.split(",") if t]
    drops = [d for d in args.drop.split(",") if d]
    unknown = [d for d in drops if d not in MODULES + ("all",)]
    if unknown:
        log.error("unknown modules: %s", ", ".join(unknown))
        return 1
    table = ablate(scored, model, thresholds, drops)
    Path(args.out).write_text("\n".join(table.lines()) + "\n", encoding="utf-8")
    print("\n".join(table.lines()))
    return exit_code(scored)


def cmd_report(args) -> int:
    summary = write_report(args.reports, args.out, figures=not args.no_figures)
    print(json.dumps(summary, sort_keys=True, indent=1))
    return 0


COMMANDS = {
    "score": cmd_score,
    "filter": cmd_filter,
    "train-fusion": cmd_train,
    "gen-synthetic": cmd_gen,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        log.error("configuration: %s", exc)
        return 1
    except AdgveError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 3 if args.command != "gen-synthetic" else 1
    except OSError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
