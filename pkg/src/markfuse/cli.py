"""Command-line entry point: simulate, run, eval, profile and ablate."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import plotting
from .config import ConfigError, RunConfig, parse_override, parse_window
from .detection import Pose
from .io import (
    RecordError,
    dumps,
    read_frames,
    read_gt,
    read_jsonl,
    snapshot_lines_world,
    write_frames,
    write_gt,
)
from .local_map import FrameOrderError
from .runner import evaluate_raw, evaluate_records, run_stream, timing_summary
from .sim import NoiseSpec, ScenarioError, ScenarioSpec, build_scenario, render_stream

log = logging.getLogger("markfuse")

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_DATA = 5

LOG_ENV = "MARKFUSE_LOG_LEVEL"

DEFAULT_GRID = ("alpha_n=0,10", "filters_enabled=true,false")


class UsageError(Exception):
    pass


# -- helpers -----------------------------------------------------------------------


def _setup_logging() -> None:
    name = os.environ.get(LOG_ENV, "WARNING").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if level == logging.WARNING and name != "WARNING":
        log.warning("%s=%r is not a log level; using WARNING", LOG_ENV, name)


def _need(args, *names) -> None:
    missing = [f"--{n}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command} needs {', '.join(missing)}")


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    values = {}
    if args.window:
        win = parse_window(args.window)
        values.update(win)
        # grow the retention range so it still contains a wider window
        for key, v in win.items():
            keep = getattr(cfg, "retain_" + key)
            values["retain_" + key] = min(keep, v) if key.endswith("min") else max(keep, v)
    for item in args.set or ():
        values.update(parse_override(item, cfg))
    return cfg.updated(values) if values else cfg


def _output(path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def _is_snapshot_stream(path) -> bool:
    for _, rec in read_jsonl(path):
        return "instances" in rec
    return False


def _gt_world(gt) -> list:
    return [(l.marking_type, l.points) for l in gt.lines]


def _fmt(v, digits: int = 2) -> str:
    if v is None:
        return "-"
    return f"{v:.{digits}f}" if isinstance(v, float) else str(v)


def _metrics_line(name: str, m: dict) -> str:
    counts = " ".join(f"{k}={m[k]}" for k in ("tp", "fp", "fn"))
    scores = " ".join(f"{k}={_fmt(m[k])}" for k in ("precision", "recall", "f1"))
    return f"{name} {counts} {scores} acd={_fmt(m['acd'], 4)}"


# -- simulate ----------------------------------------------------------------------


def _scenario_file(path) -> tuple[dict, dict]:
    if path is None:
        return {}, {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict) or set(data) - {"scenario", "noise"}:
        raise ConfigError(f"{path}: expected an object with 'scenario' and/or 'noise' sections")
    return dict(data.get("scenario", {})), dict(data.get("noise", {}))


def _sim_override(text: str, scenario: dict, noise: dict) -> None:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = (s.strip() for s in text.split("=", 1))
    section, _, name = key.partition(".")
    if section not in ("scenario", "noise") or not name:
        raise ConfigError(f"simulate overrides look like scenario.<key>=... or noise.<key>=..., got {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    (scenario if section == "scenario" else noise)[name] = value


def cmd_simulate(args) -> int:
    _need(args, "output")
    scen, noise = _scenario_file(args.input)
    for item in args.set or ():
        _sim_override(item, scen, noise)
    if args.seed is not None:
        scen["seed"] = args.seed
    try:
        spec = ScenarioSpec.from_dict(scen)
        noise_spec = NoiseSpec.from_dict(noise)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    scenario = build_scenario(spec)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    n = write_frames(out / "frames.jsonl", render_stream(scenario, noise_spec))
    write_gt(out / "gt.jsonl", scenario.gt)
    (out / "scenario.json").write_text(
        json.dumps({"scenario": spec.__dict__, "noise": {**noise_spec.__dict__}}, indent=2, sort_keys=True) + "\n"
    )
    traj = np.array([p.translation for p in scenario.poses])
    plotting.plot_snapshot(
        [(l.marking_type.label, l.points) for l in scenario.gt.lines] + [("trajectory", traj)],
        out / "scenario.png",
        title=f"{spec.kind}: {len(scenario.gt.lines)} lines, {n} frames",
    )
    print(f"wrote {n} frames and {len(scenario.gt.lines)} groundtruth lines to {out}")
    return EXIT_OK


# -- run -------------------------------------------------------------------------------


def cmd_run(args) -> int:
    _need(args, "input", "output")
    cfg = load_config(args)
    out = _output(args.output)
    cfg.dump(_sibling(out, ".config.json"))
    last = None
    n = 0
    with open(out, "w") as fh:
        for _, rec in run_stream(read_frames(args.input), cfg):
            fh.write(dumps(rec) + "\n")
            last = rec
            n += 1
    if last is not None:
        origin = Pose.from_flat(last["origin"])
        lines = [(t.label, p) for t, p in snapshot_lines_world(last)]
        centers = [origin.apply(np.asarray(l["centerline"]).reshape(-1, 3)) for l in last["lanes"]]
        gt = _gt_world(read_gt(args.gt)) if args.gt else ()
        plotting.plot_snapshot(
            lines, _sibling(out, ".png"),
            title=f"frame {last['frame']}: {len(lines)} instances, {len(centers)} lanes",
            centerlines=centers, gt_lines=gt,
        )
    print(f"processed {n} frames into {out}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------------


def _write_series(path: Path, rows: list[dict]) -> None:
    keys = ("frame", "timestamp", "tp", "fp", "fn", "precision", "recall", "f1", "acd")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow(["" if r[k] is None else r[k] for k in keys])


def evaluate_path(path, gt, cfg: RunConfig, warmup: int):
    """Score a snapshot stream or, for a raw frame stream, the per-frame detections."""
    if _is_snapshot_stream(path):
        report, rows = evaluate_records((rec for _, rec in read_jsonl(path)), gt, cfg, warmup)
        return "fused", report, rows
    report, rows = evaluate_raw(read_frames(path), gt, cfg, warmup)
    return "raw", report, rows


def cmd_eval(args) -> int:
    _need(args, "input", "gt", "output")
    cfg = load_config(args)
    gt = read_gt(args.gt)
    source, report, rows = evaluate_path(args.input, gt, cfg, args.warmup)
    out = _output(args.output)
    record = {"source": source, "frames": len(rows), "warmup": args.warmup, "metrics": report.to_dict()}
    out.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    _write_series(_sibling(out, ".series.csv"), rows)
    plotting.plot_series(rows, _sibling(out, ".png"))
    print(_metrics_line(source, record["metrics"]["total"]))
    return EXIT_OK


# -- profile ---------------------------------------------------------------------------


def cmd_profile(args) -> int:
    _need(args, "input")
    cfg = load_config(args)
    timings = [snap.timings for snap, _ in run_stream(read_frames(args.input), cfg)]
    summary = timing_summary(timings)
    print(f"{'stage':<10} {'mean':>8} {'p50':>8} {'p99':>8}  (ms, {len(timings)} frames)")
    for stage, v in summary.items():
        print(f"{stage:<10} {v['mean']:>8.2f} {v['p50']:>8.2f} {v['p99']:>8.2f}")
    if args.output:
        out = _output(args.output)
        out.write_text(json.dumps({"frames": len(timings), "stages": summary}, indent=2) + "\n")
        plotting.plot_profile(summary, _sibling(out, ".png"))
    return EXIT_OK


# -- ablate ----------------------------------------------------------------------------


def parse_grid(items, base: RunConfig) -> list[dict]:
    """``key=v1,v2`` items to the cartesian product of settings."""
    axes = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"grid item {item!r} is not key=v1,v2,...")
        key, raw = item.split("=", 1)
        values = [parse_override(f"{key}={v}", base)[key.strip()] for v in raw.split(",") if v.strip()]
        if not values:
            raise ConfigError(f"grid item {item!r} has no values")
        axes.append([(key.strip(), v) for v in values])
    return [dict(combo) for combo in itertools.product(*axes)]


def _setting_label(setting: dict) -> str:
    return " ".join(f"{k}={str(v).lower() if isinstance(v, bool) else v}" for k, v in setting.items())


def cmd_ablate(args) -> int:
    _need(args, "input", "gt", "output")
    cfg = load_config(args)
    gt = read_gt(args.gt)
    frames = list(read_frames(args.input))
    settings = parse_grid(args.vary or DEFAULT_GRID, cfg)
    configs = [cfg.updated(s) for s in settings]

    def one(c: RunConfig) -> dict:
        records = [rec for _, rec in run_stream(frames, c)]
        return evaluate_records(records, gt, c, args.warmup)[0].total.metrics()

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(one, configs))
    rows = [{"setting": _setting_label(s), **m} for s, m in zip(settings, results)]
    raw = evaluate_raw(frames, gt, cfg, args.warmup)[0].total.metrics()
    rows.append({"setting": "single-frame detections", **raw})

    out = _output(args.output)
    keys = ("setting", "tp", "fp", "fn", "precision", "recall", "f1", "acd")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow(["" if r[k] is None else r[k] for k in keys])
    plotting.plot_ablation(rows, _sibling(out, ".png"))
    for r in rows:
        print(_metrics_line(f"[{r['setting']}]", r))
    return EXIT_OK


# -- entry -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="markfuse", description="Online temporal fusion of road marking detections.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, gt=False):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--input", help="input file")
        sp.add_argument("--output", help="output path")
        sp.add_argument("--window", help='output window "lat_min,lat_max,lon_min,lon_max" in meters')
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value")
        sp.add_argument("--seed", type=int, help="random seed")
        if gt:
            sp.add_argument("--gt", help="groundtruth map (line-delimited JSON)")
        else:
            sp.set_defaults(gt=None)

    sp = sub.add_parser("simulate", help="generate a scenario: frame stream and groundtruth")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("run", help="fuse a frame stream into per-frame map snapshots")
    common(sp, gt=True)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("eval", help="score snapshots or raw frames against groundtruth")
    common(sp, gt=True)
    sp.add_argument("--warmup", type=int, default=0, help="frames to skip before scoring")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("profile", help="per-stage timing of a run")
    common(sp)
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("ablate", help="metrics over a parameter grid")
    common(sp, gt=True)
    sp.add_argument("--vary", action="append", metavar="KEY=V1,V2", help="grid axis (repeatable)")
    sp.add_argument("--warmup", type=int, default=0, help="frames to skip before scoring")
    sp.add_argument("--jobs", type=int, default=1, help="worker threads")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ConfigError, ScenarioError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RecordError, FrameOrderError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
