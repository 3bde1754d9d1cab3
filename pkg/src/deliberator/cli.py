"""Command-line entry point.

Exit codes: 0 terminated-success (or a tool command that succeeded),
1 terminated-failure or max-steps, 2 aborted-error, 3 usage/config/IO error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .actions import ActionParseError, parse_call_string
from .datatools import (
    DEFAULT_RULES,
    RULES,
    filter_samples,
    fleiss_kappa,
    parse_label_lines,
    parse_rating_matrix,
    tally_failures,
    unroll_trajectories,
    write_samples,
)
from .demo import EPISODES, record_cassette, write_scenario
from .environment import AdbDevice, MockEnvironment, load_scenario
from .gateway import (
    Cassette,
    GatewayError,
    OpenAIChatBackend,
    RecordingBackend,
    ReplayBackend,
)
from .imaging import RasterImage, diff_regions, draw_boxes, render_action_marker
from .orchestrator import (
    ABORTED,
    ROLES,
    SUCCESS,
    EpisodeConfig,
    RoleBackends,
    run_episode,
    read_trace,
    write_trace,
)
from .tips import default_tip_base, format_tips, load_tip_file, tips_for_task

EXIT_OK, EXIT_FAILED, EXIT_ABORTED, EXIT_USAGE = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def status_exit_code(status: Optional[str]) -> int:
    if status == SUCCESS:
        return EXIT_OK
    if status == ABORTED:
        return EXIT_ABORTED
    return EXIT_FAILED


def _backends(args, config: EpisodeConfig) -> RoleBackends:
    if args.cassette and args.cassette_mode == "replay":
        return RoleBackends.shared(ReplayBackend(args.cassette))
    live = {role: OpenAIChatBackend(config.model_for(role)) for role in ROLES}
    if not args.cassette:
        return RoleBackends(**live)
    # every role appends to one cassette, in call order
    shared = Cassette()
    recs = {}
    for role in ROLES:
        rec = RecordingBackend(live[role], args.cassette)
        rec.cassette = shared
        recs[role] = rec
    return RoleBackends(**recs)


def _finish_episode(trace, out: Path) -> int:
    path = write_trace(trace, out / "trace.jsonl")
    print(f"status: {trace.status}")
    print(f"steps: {len(trace.steps)}")
    print(f"trace: {path}")
    for st in trace.steps:
        if st.error:
            print(f"step {st.index} error: {st.error['type']}: {st.error['message']}", file=sys.stderr)
    return status_exit_code(trace.status)


def cmd_run(args) -> int:
    config = EpisodeConfig.load(args.config) if args.config else EpisodeConfig.from_dict({})
    if args.max_steps is not None:
        config = replace(config, max_steps=args.max_steps)
    if args.scenario:
        env = MockEnvironment(load_scenario(args.scenario))
    else:
        env = AdbDevice(serial=args.device or None)
    trace = run_episode(args.task, env, _backends(args, config), config)
    return _finish_episode(trace, Path(args.out))


def cmd_demo(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scenario(out / "scenario")
    cassette, _ = record_cassette(args.name)
    cassette.save(out / "cassette.txt")
    trace = run_episode(
        EPISODES[args.name].task,
        MockEnvironment(load_scenario(out / "scenario" / "scenario.json")),
        ReplayBackend(out / "cassette.txt"),
        EpisodeConfig.from_dict({}),
    )
    print(f"scenario: {out / 'scenario' / 'scenario.json'}")
    print(f"cassette: {out / 'cassette.txt'}")
    return _finish_episode(trace, out)


def cmd_visualize(args) -> int:
    image = RasterImage.from_png(args.image)
    action = parse_call_string(args.action)
    marked = render_action_marker(image, action)
    marked.image.save(args.out)
    if not marked.visualized:
        print(f"{action.name} has no visual marker; image copied unchanged")
    return EXIT_OK


def cmd_diff(args) -> int:
    before = RasterImage.from_png(args.before)
    after = RasterImage.from_png(args.after)
    regions = diff_regions(before, after, args.threshold, args.min_area)
    if args.out:
        draw_boxes(after, regions).save(args.out)
    for r in regions:
        print(r)
    return EXIT_OK


def cmd_tips(args) -> int:
    base = load_tip_file(args.base) if args.base else default_tip_base()
    sel = tips_for_task(base, args.task)
    print(format_tips(sel))
    for app in sel.missing:
        print(f"note: no tips for detected app {app!r}", file=sys.stderr)
    return EXIT_OK


def cmd_unroll(args) -> int:
    traces = [read_trace(p) for p in args.traces]
    samples = unroll_trajectories(traces)
    rules = tuple(args.rules.split(",")) if args.rules is not None else DEFAULT_RULES
    rules = tuple(r for r in rules if r)
    kept, report = filter_samples(samples, rules)
    path = write_samples(kept, args.out, report)
    print(f"samples: {report.total}")
    for rule, n in report.removed.items():
        print(f"removed by {rule}: {n}")
    print(f"kept: {report.kept} -> {path}")
    return EXIT_OK


def cmd_kappa(args) -> int:
    matrix = parse_rating_matrix(Path(args.matrix).read_text(encoding="utf-8"))
    print(f"{fleiss_kappa(matrix):.6f}")
    return EXIT_OK


def cmd_analyze_errors(args) -> int:
    tasks = parse_label_lines(Path(args.labels).read_text(encoding="utf-8"))
    for label, share in tally_failures(tasks).items():
        print(f"{label.value}: {share:.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deliberator", description="Deliberative mobile GUI agent tooling.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one episode and write its trace")
    run.add_argument("task")
    target = run.add_mutually_exclusive_group(required=True)
    target.add_argument("--scenario", help="mock scenario JSON file")
    target.add_argument("--device", nargs="?", const="", help="adb device serial (default device if empty)")
    run.add_argument("--config", help="JSON configuration file")
    run.add_argument("--cassette", help="cassette file to replay or record")
    run.add_argument("--cassette-mode", choices=("replay", "record"), default="replay")
    run.add_argument("--out", required=True, help="directory for trace.jsonl and screenshots")
    run.add_argument("--max-steps", type=int)
    run.set_defaults(func=cmd_run)

    demo = sub.add_parser("demo", help="write and replay a built-in scripted episode")
    demo.add_argument("--name", choices=tuple(EPISODES), default="markor-note")
    demo.add_argument("--out", required=True)
    demo.set_defaults(func=cmd_demo)

    vis = sub.add_parser("visualize", help="draw an action marker on a screenshot")
    vis.add_argument("--image", required=True)
    vis.add_argument("--action", required=True, help="call string, e.g. 'click(coordinate=[500, 500])'")
    vis.add_argument("--out", required=True)
    vis.set_defaults(func=cmd_visualize)

    diff = sub.add_parser("diff", help="box the regions that changed between two screenshots")
    diff.add_argument("--before", required=True)
    diff.add_argument("--after", required=True)
    diff.add_argument("--out")
    diff.add_argument("--threshold", type=int, default=12)
    diff.add_argument("--min-area", type=int, default=64)
    diff.set_defaults(func=cmd_diff)

    tips = sub.add_parser("tips", help="print the tips section for a task")
    tips.add_argument("--task", required=True)
    tips.add_argument("--base", help="tip base file (default: built-in)")
    tips.set_defaults(func=cmd_tips)

    unroll = sub.add_parser("unroll", help="turn traces into gate training samples")
    unroll.add_argument("--traces", nargs="+", required=True)
    unroll.add_argument("--out", required=True, help="samples .jsonl path")
    unroll.add_argument("--rules", help=f"comma-separated filter rules from {sorted(RULES)}")
    unroll.set_defaults(func=cmd_unroll)

    kappa = sub.add_parser("kappa", help="Fleiss' kappa of a CSV rating matrix")
    kappa.add_argument("--matrix", required=True)
    kappa.set_defaults(func=cmd_kappa)

    errs = sub.add_parser("analyze-errors", help="share of each failure label")
    errs.add_argument("--labels", required=True, help="one failed task per line, comma-separated labels")
    errs.set_defaults(func=cmd_analyze_errors)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, ActionParseError, GatewayError, json.JSONDecodeError) as exc:
        print(f"deliberator {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
