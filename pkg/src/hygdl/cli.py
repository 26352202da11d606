"""Command line: ``hygdl {pretrain,probe,diagnose,plot} CONFIG``.

Failures exit nonzero after printing one JSON error line to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .errors import ConfigParseError, HyGDLError, MissingInput, UnknownCommand

COMMANDS = ("pretrain", "probe", "diagnose", "plot")

USAGE = """usage: hygdl COMMAND CONFIG

commands:
  pretrain   train to completion, writing checkpoints and metrics.jsonl
  probe      linear-probe every checkpoint on in-domain and OOD test sets
  diagnose   peak / rise-and-fall analysis of a probe sweep table
  plot       probe curves and a reconstruction grid as PNG files

CONFIG is a YAML run config. `diagnose` and `plot` also accept a sweep table
(.csv) in place of the config."""


def _error(exc: BaseException, code: int = 2) -> int:
    record = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("field", "line"):
        if getattr(exc, attr, None) is not None:
            record[attr] = getattr(exc, attr)
    print(json.dumps(record), file=sys.stderr)
    return code


def _table_and_config(path: str) -> tuple[Path, RunConfig | None]:
    p = Path(path)
    if p.suffix == ".csv":
        if not p.is_file():
            raise MissingInput(f"sweep table {p} not found")
        return p, None
    cfg = load_config(p)
    table = Path(cfg.diagnose.table) if cfg.diagnose.table else Path(cfg.output_dir) / "probe_sweep.csv"
    if not table.is_file():
        raise MissingInput(f"sweep table {table} not found; run `hygdl probe` first")
    return table, cfg


def cmd_pretrain(path: str) -> int:
    from .runs import pretrain

    cfg = load_config(path)
    state = pretrain(cfg)
    print(json.dumps({"status": "ok", "output_dir": cfg.output_dir, "epoch": state.epoch, "step": state.step}))
    return 0


def cmd_probe(path: str) -> int:
    from .runs import probe_sweep

    cfg = load_config(path)
    results = probe_sweep(cfg)
    for r in results:
        print(f"epoch={r.checkpoint_epoch} domain={r.domain_tag} top1={r.top1:.4f} top5={r.top5:.4f}")
    return 0


def cmd_diagnose(path: str) -> int:
    from .runs import diagnose

    table, cfg = _table_and_config(path)
    metric = cfg.diagnose.metric if cfg else "top1"
    report = diagnose(table, metric)
    for domain, a in sorted(report.items()):
        print(f"domain={domain} peak_epoch={a['peak_epoch']} peak={a['peak_value']:g} "
              f"final={a['final_value']:g} rise_and_fall={str(a['rise_and_fall']).lower()}")
    if cfg is not None:
        (Path(cfg.output_dir) / "diagnosis.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_plot(path: str) -> int:
    from .runs import list_checkpoints, load_dataset, load_styles, plot_curves, plot_reconstructions

    table, cfg = _table_and_config(path)
    out = Path(cfg.output_dir) if cfg else table.parent
    written = [plot_curves(table, out / "probe_curves.png", cfg.diagnose.metric if cfg else "top1")]
    if cfg is not None:
        ckpt = cfg.plot.checkpoint
        if ckpt is None:
            found = list_checkpoints(Path(cfg.output_dir))
            ckpt = str(found[-1][1]) if found else None
        if ckpt is not None:
            r = cfg.resolved()
            data = load_dataset(r)
            written.append(plot_reconstructions(ckpt, data.test_x[: cfg.plot.n_images], load_styles(r),
                                                out / "reconstructions.png"))
    for p in written:
        print(p)
    return 0


HANDLERS = {"pretrain": cmd_pretrain, "probe": cmd_probe, "diagnose": cmd_diagnose, "plot": cmd_plot}


def dispatch(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = argparse.ArgumentParser(prog="hygdl", usage=USAGE, add_help=True)
    parser.add_argument("command")
    parser.add_argument("config")
    parser.add_argument("-v", "--verbose", action="store_true")
    if not argv or argv[0] not in COMMANDS:
        if argv and argv[0] in ("-h", "--help"):
            print(USAGE)
            return 0
        print(USAGE, file=sys.stderr)
        return _error(UnknownCommand(f"unknown command {argv[0]!r}" if argv else "no command given"))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return _error(ConfigParseError("expected exactly one config path"), int(exc.code or 2))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return HANDLERS[args.command](args.config)
    except HyGDLError as exc:
        return _error(exc, 1)


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
