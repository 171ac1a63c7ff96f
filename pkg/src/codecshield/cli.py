"""Command-line interface for codecshield."""

from __future__ import annotations

import argparse
import json
from pathlib import Path
from typing import Iterable

from rich.markup import escape
from rich.panel import Panel

from . import __version__
from .config import ExperimentConfig, load_config, save_config
from .console import STYLE, console, setup_logging, simple_table
from .errors import CodecShieldError

DEFAULT_CONFIG = Path("configs/reference.yaml")


def _context(args: argparse.Namespace):
    from .pipeline import PipelineContext

    return PipelineContext(load_config(args.config), force=args.force, jobs=args.jobs)


def _stage_command(stage: str):
    def _cmd(args: argparse.Namespace) -> None:
        from .pipeline import run_stage

        ran = run_stage(_context(args), stage)
        status = "done" if ran else "up to date"
        console.print(f"[{STYLE['success']}]{stage}: {status}[/]")

    _cmd.__name__ = f"cmd_{stage.replace('-', '_')}"
    return _cmd


def cmd_run_all(args: argparse.Namespace) -> None:
    from .pipeline import run_all

    ctx = _context(args)
    results = run_all(ctx)
    table = simple_table(["Stage", "Status"], header_style=f"bold {STYLE['accent_alt']}", title="run-all")
    for stage, ran in results.items():
        table.add_row(stage, "ran" if ran else "skipped")
    console.print(table)
    console.print(f"Reports in [bold]{ctx.workspace.reports_dir}[/]")


def cmd_check(args: argparse.Namespace) -> None:
    from .acceptance import all_passed, run_checks, summary

    results = run_checks(load_config(args.config))
    table = simple_table(["Check", "Value", "Bound", "Status"], header_style=f"bold {STYLE['accent_alt']}")
    colors = {"pass": STYLE["success"], "FAIL": STYLE["error"], "skipped": STYLE["warning"]}
    for r in results:
        value = "-" if r.value is None else f"{r.value:.4f}"
        table.add_row(r.name, value, r.bound, f"[{colors[r.status]}]{r.status}[/]")
    console.print(table)
    counts = summary(results)
    console.print(f"{counts['pass']} passed, {counts['FAIL']} failed, {counts['skipped']} skipped")
    if not all_passed(results):
        raise SystemExit(1)


def cmd_show_config(args: argparse.Namespace) -> None:
    config = load_config(args.config)
    console.print(f"Config path: {args.config}")
    console.print(f"Fingerprint: {config.fingerprint()}")
    console.print_json(json.dumps(config.to_dict(), sort_keys=True))


def cmd_init_config(args: argparse.Namespace) -> None:
    path = Path(args.path)
    if path.exists() and not args.force:
        raise CodecShieldError(f"{path} exists; pass --force to overwrite")
    save_config(ExperimentConfig(), path)
    console.print(Panel(f"Wrote reference config to [bold]{path}[/]", border_style=STYLE["success"]))


def cmd_show_report(args: argparse.Namespace) -> None:
    from .detector import read_csv
    from .pipeline import Workspace

    ws = Workspace(load_config(args.config).work_dir)
    shown = False
    for name in ("detection_report.csv", "eer.csv", "tradeoff.csv", "codec_quality.csv", "acceptance.csv"):
        path = ws.report(name)
        if not path.is_file():
            continue
        rows = read_csv(path)
        if not rows:
            continue
        table = simple_table(list(rows[0].keys()), header_style=f"bold {STYLE['accent']}", title=name)
        for row in rows:
            table.add_row(*row.values())
        console.print(table)
        shown = True
    if not shown:
        raise CodecShieldError(f"No reports under {ws.reports_dir}. Run `codecshield evaluate` first.")


STAGE_HELP = {
    "gen-data": "Generate the synthetic corpus and trial list.",
    "train-asv": "Train the speaker embedding model.",
    "train-codec": "Train the RVQ codec on genuine training audio.",
    "attack": "Run BIM on every trial for each epsilon.",
    "calibrate": "Calibrate detection thresholds on genuine audio.",
    "evaluate": "Write detection, EER, histogram and trade-off reports.",
}


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=DEFAULT_CONFIG, help="Experiment config (YAML).")
    parser.add_argument("--force", action="store_true", help="Recompute stages whose fingerprint changed.")
    parser.add_argument("--jobs", type=int, default=1, help="Worker threads for per-trial work.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="codecshield",
        description="codecshield - codec resynthesis detection of adversarial speaker-verification inputs.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    parser.set_defaults(func=None)

    subparsers = parser.add_subparsers(dest="command")

    for stage, help_text in STAGE_HELP.items():
        stage_parser = subparsers.add_parser(stage, help=help_text)
        _add_run_options(stage_parser)
        stage_parser.set_defaults(func=_stage_command(stage))

    run_parser = subparsers.add_parser("run-all", help="Run every stage in order, skipping up-to-date ones.")
    _add_run_options(run_parser)
    run_parser.set_defaults(func=cmd_run_all)

    check_parser = subparsers.add_parser("check", help="Evaluate the regression bounds on a finished run.")
    check_parser.add_argument("--config", type=Path, default=DEFAULT_CONFIG)
    check_parser.set_defaults(func=cmd_check)

    show_parser = subparsers.add_parser("show-config", help="Display the resolved configuration.")
    show_parser.add_argument("--config", type=Path, default=DEFAULT_CONFIG)
    show_parser.set_defaults(func=cmd_show_config)

    report_parser = subparsers.add_parser("show-report", help="Render the report CSVs of a finished run.")
    report_parser.add_argument("--config", type=Path, default=DEFAULT_CONFIG)
    report_parser.set_defaults(func=cmd_show_report)

    init_parser = subparsers.add_parser("init-config", help="Write the reference configuration.")
    init_parser.add_argument("path", nargs="?", default=str(DEFAULT_CONFIG))
    init_parser.add_argument("--force", action="store_true", help="Overwrite an existing file.")
    init_parser.set_defaults(func=cmd_init_config)

    return parser


def main(argv: Iterable[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(list(argv) if argv is not None else None)

    if not hasattr(args, "func") or args.func is None:
        parser.print_help()
        return 0

    setup_logging(args.verbose)
    try:
        args.func(args)
    except CodecShieldError as exc:
        console.print(f"[{STYLE['error']}]{escape(str(exc))}[/]")
        raise SystemExit(1) from exc
    return 0


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
