"""Command-line entry point: ``python -m redlab <command> ...``.

Commands: gen-data, train, ablate, verify-bound, report.  Each writes its
fully resolved configuration to ``<out>/config.resolved`` before working.

Exit codes: 0 success, 1 failed ordering assertion or report self-check,
2 config/usage error, 3 numeric abort, 4 bound violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_BOUND = 0, 1, 2, 3, 4
RESOLVED = "config.resolved"


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, sections: dict[str, object]) -> None:
    parts = []
    for title, obj in sections.items():
        body = cfgmod.dump(obj) if not isinstance(obj, dict) else "".join(
            f"{k} = {v}\n" for k, v in obj.items())
        parts.append(f"# {title}\n{body}")
    (out / RESOLVED).write_text("\n".join(parts), encoding="utf-8")


def _load_spec(path):
    from .synthgen import SynthSpec

    return cfgmod.load(SynthSpec, path) if path else SynthSpec()


def _load_run_config(path):
    from .trainer import RunConfig

    return cfgmod.load(RunConfig, path) if path else RunConfig()


def _threads(default: int = 1) -> int:
    raw = os.environ.get("RED_LAB_THREADS", "")
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"RED_LAB_THREADS: expected an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("RED_LAB_THREADS: must be at least 1")
    return n


def cmd_gen_data(args) -> int:
    from .synthgen import generate, save_dataset

    spec = _load_spec(args.spec)
    out = _out_dir(args.out)
    _write_resolved(out, {"SynthSpec": spec})
    src, tgt, _ = generate(spec)
    save_dataset(src, tgt, out)
    print(f"wrote {len(src)} source and {len(tgt)} target rows to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .nets import save_checkpoint
    from .synthgen import TARGET_LABELS_FILE, load_dataset, load_hidden_labels
    from .trainer import NumericAbort, dump_abort, init_model, train, write_metrics_csv

    cfg = _load_run_config(args.config)
    src = tgt = None
    if args.data:
        src, tgt = load_dataset(args.data)
        cfg = _resolve_dims(cfg, src.x.shape[1], int(src.y.max()) + 1)
    if args.dry_run:
        print(cfgmod.dump(cfg), end="")
        return EXIT_OK
    if src is None:
        raise ConfigError("train: --data is required unless --dry-run is given")
    out = _out_dir(args.out)
    _write_resolved(out, {"RunConfig": cfg})
    yt = None
    if not args.no_eval and (Path(args.data) / TARGET_LABELS_FILE).exists():
        yt = load_hidden_labels(args.data, len(tgt))
    t0 = time.perf_counter()
    try:
        model, records = train(init_model(cfg), src.x, src.y, tgt.x, cfg, yt_eval=yt)
    except NumericAbort as exc:
        dump_abort(exc, out / "abort_dump.npz")
        print(f"numeric abort: {exc}; state written to {out / 'abort_dump.npz'}", file=sys.stderr)
        return EXIT_NUMERIC
    write_metrics_csv(records, out / "metrics.csv")
    save_checkpoint(model, out / "checkpoint.npz", dataclasses.asdict(cfg))
    last = records[-1] if records else None
    msg = f"trained {len(records)} iterations in {time.perf_counter() - t0:.1f}s"
    if last is not None:
        msg += f"; lambda={last.lam:.4f} trace_soft={last.trace_soft:.4f}"
        if last.tgt_acc is not None:
            msg += f" tgt_acc={last.tgt_acc:.4f}"
    print(msg)
    return EXIT_OK


def _resolve_dims(cfg, input_dim: int, num_classes: int):
    from .trainer import RunConfig

    defaults = RunConfig()
    for name, actual in (("input_dim", input_dim), ("C", num_classes)):
        given = getattr(cfg, name)
        if given != getattr(defaults, name) and given != actual:
            raise ConfigError(f"{name}: config says {given} but the data has {actual}")
    try:
        return cfg.replace(input_dim=input_dim, C=num_classes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def ordering_violations(table: list[dict], margin: float = 0.05) -> list[str]:
    """Directional checks on ablation means: red >= wo_ltr, red >= wo_both + margin, red >= source_adv + margin."""
    means = {row["variant"]: row["mean"] for row in table}
    out = []
    red = means.get("red")
    checks = (("red_wo_ltr", 0.0), ("red_wo_ldt_ltr", margin), ("source_adv", margin))
    for name, gap in checks:
        if red is not None and name in means and not red >= means[name] + gap:
            out.append(f"red {red:.4f} < {name} {means[name]:.4f} + {gap}")
    return out


def cmd_ablate(args) -> int:
    from .trainer import VARIANTS, ablate, write_ablation_csv

    cfg = _load_run_config(args.config)
    spec = _load_spec(args.spec)
    if args.seeds < 1:
        raise ConfigError("--seeds: must be at least 1")
    out = _out_dir(args.out)
    workers = min(_threads(), args.seeds * len(VARIANTS))
    seeds = [cfg.seed + i for i in range(args.seeds)]
    _write_resolved(out, {"RunConfig": cfg, "SynthSpec": spec,
                          "ablation": {"seeds": ",".join(map(str, seeds)), "workers": workers}})
    table = ablate(cfg, spec, seeds, workers=workers)
    write_ablation_csv(table, out / "ablation.csv")
    for row in table:
        print(f"{row['variant']:16s} {100 * row['mean']:6.2f} ± {100 * row['std']:5.2f}  (n={row['n']})")
    if args.assert_ordering:
        bad = ordering_violations(table)
        for line in bad:
            print(f"ordering violated: {line}", file=sys.stderr)
        if bad:
            return EXIT_CHECK
    return EXIT_OK


def cmd_verify_bound(args) -> int:
    from .boundlab import run_campaign, summary_line

    if args.instances < 0 or not 1 <= args.max_n <= 8:
        raise ConfigError("--instances must be >= 0 and --max-n in 1..8")
    out = _out_dir(args.out)
    _write_resolved(out, {"verify-bound": {"instances": args.instances, "max_n": args.max_n,
                                           "seed": args.seed}})
    summary = run_campaign(args.instances, args.max_n, args.seed, out / "bound_report.csv",
                           counterexample_dir=out / "counterexamples")
    print(summary_line(summary))
    ok = summary["holds"] == summary["instances"] == summary["steps_ok"]
    return EXIT_OK if ok else EXIT_BOUND


def cmd_report(args) -> int:
    from .report import emit_report

    out = _out_dir(args.out)
    _write_resolved(out, {"report": {"runs": ",".join(args.run), "out": args.out}})
    result = emit_report(args.run, out)
    for f in result["files"]:
        print(f)
    if result["problems"]:
        print("self-check failed: " + "; ".join(result["problems"]), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="redlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic two-domain dataset")
    g.add_argument("--spec", help="key=value file with SynthSpec fields (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model on a dataset directory")
    t.add_argument("--config", help="key=value file with RunConfig fields")
    t.add_argument("--data")
    t.add_argument("--out", default="run")
    t.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    t.add_argument("--no-eval", action="store_true", help="skip hidden-label evaluation")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="run the five ablation variants over k seeds")
    a.add_argument("--config")
    a.add_argument("--spec")
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--out", required=True)
    a.add_argument("--assert-ordering", action="store_true")
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("verify-bound", help="enumerate random finite instances of the bound")
    v.add_argument("--instances", type=int, default=10_000)
    v.add_argument("--max-n", type=int, default=6)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default="bound")
    v.set_defaults(func=cmd_verify_bound)

    r = sub.add_parser("report", help="plots and summary from run directories")
    r.add_argument("--run", action="append", required=True, help="run directory (repeatable)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    from .report import ReportError
    from .synthgen import HiddenLabelsMissing, ParseError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError, ReportError, HiddenLabelsMissing) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RuntimeError as exc:
        # ablation wraps per-run failures with the variant tag
        cause = exc.__cause__
        from .trainer import NumericAbort

        if isinstance(cause, (NumericAbort, FloatingPointError)):
            print(f"numeric abort: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":
    sys.exit(main())
