"""Command line entry point: ``aft <verb> [--scenario FILE] [--out DIR] ...``.

Result files are deterministic for a fixed scenario and seed. Wall-clock
measurements go to ``timings.json`` only.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Sequence

from pydantic import ValidationError

from . import experiments as ex
from .control import write_trace_csv
from .refmodel import save_model
from .sim import save_frames

VERBS = ("build-reference", "track", "sweep-occlusion", "sweep-viewpoint", "ablate", "control", "replay")

EXIT_USAGE = 2
EXIT_TRACKING_LOST = 3


def _json_dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_jsonl(path: Path, scenario: dict, records: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"scenario": scenario}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _write_csv(path: Path, scenario: dict, rows: Sequence[dict]) -> None:
    """Plot-ready CSV whose first line is a ``#`` comment holding the scenario."""
    with open(path, "w", newline="") as fh:
        fh.write("# scenario=" + json.dumps(scenario, sort_keys=True) + "\n")
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _fmt(stat: dict, scale: float = 100.0, unit: str = "%") -> str:
    if stat.get("mean") is None:
        return "n/a"
    return f"{stat['mean'] * scale:.3f} +/- {stat['std'] * scale:.3f}{unit}"


def cmd_build_reference(sc: ex.Scenario, out: Path, args) -> int:
    model = ex.build_model(sc)
    save_model(model, out / "reference.aftref")
    info = {"n_points": model.n_points, "n_partitions": model.n_partitions,
            "scale_dims": list(model.scale_dims),
            "boundaries": [float(b) for b in model.boundaries]}
    _json_dump(out / "build-reference.json", {"scenario": sc.resolved(), "model": info})
    print(f"reference model: {model.n_points} points, {model.n_partitions} partitions -> "
          f"{out / 'reference.aftref'}")
    return 0


def _report_track(report: ex.TrackReport, sc: ex.Scenario, out: Path, stem: str, strict: bool) -> int:
    _write_jsonl(out / f"{stem}.jsonl", sc.resolved(), report.records)
    _json_dump(out / f"{stem}-summary.json", {"scenario": sc.resolved(), "summary": report.summary})
    _json_dump(out / "timings.json", {"per_frame_seconds": report.timings})
    s = report.summary
    print(f"{s['sequences']} sequence(s), {s['frames']} frame(s), tracking lost: {s['tracking_lost']}")
    print(f"relative tip error:   {_fmt(s['tip_error'])}")
    print(f"relative shape error: {_fmt(s['shape_error'])}")
    if "total" in report.timings:
        print(f"runtime per frame:    {_fmt(report.timings['total'], 1000.0, ' ms')}")
    if strict and report.tracking_lost:
        print("error: tracking lost (strict mode)", file=sys.stderr)
        return EXIT_TRACKING_LOST
    return 0


def cmd_track(sc: ex.Scenario, out: Path, args) -> int:
    report = ex.run_track(sc, args.jobs)
    if report.frames is not None:
        fdir = out / "frames"
        fdir.mkdir(exist_ok=True)
        for i, frames in enumerate(report.frames):
            save_frames(fdir / f"seq_{i:03d}.aftseq", frames)
    return _report_track(report, sc, out, "track", args.strict)


def cmd_replay(sc: ex.Scenario, out: Path, args) -> int:
    return _report_track(ex.run_replay(sc), sc, out, "replay", args.strict)


def cmd_sweep_occlusion(sc: ex.Scenario, out: Path, args) -> int:
    rows = ex.run_sweep_occlusion(sc, args.jobs)
    _write_csv(out / "sweep-occlusion.csv", sc.resolved(), rows)
    print("position  width  mean tip error")
    for r in rows:
        print(f"{r['position']:8.3f} {r['width']:6.3f}  {100 * r['mean_tip_error']:.3f}%")
    return 0


def cmd_sweep_viewpoint(sc: ex.Scenario, out: Path, args) -> int:
    rows, agreement = ex.run_sweep_viewpoint(sc, args.jobs)
    _write_csv(out / "sweep-viewpoint.csv", sc.resolved(), rows)
    _json_dump(out / "sweep-viewpoint.json", {"scenario": sc.resolved(), "agreement": agreement})
    for r in rows:
        print(f"{r['viewpoint']:12s} tip {100 * r['mean_tip_error']:.3f} +/- {100 * r['std_tip_error']:.3f}%")
    print(f"largest cross-view tip spread: {100 * agreement['max_pairwise_tip_spread']:.3f}% of L")
    return 0


def cmd_ablate(sc: ex.Scenario, out: Path, args) -> int:
    rows, runtime = ex.run_ablation(sc, args.jobs)
    _write_csv(out / "ablation.csv", sc.resolved(), rows)
    _json_dump(out / "timings.json", {"per_frame_seconds": runtime})
    print(f"{'variant':20s} {'tip error':>22s} {'shape error':>22s} {'runtime/frame':>16s}")
    for r in rows:
        rt = runtime[r["variant"]]
        print(f"{r['variant']:20s} {100 * r['mean_tip_error']:9.3f} +/- {100 * r['std_tip_error']:.3f}% "
              f"{100 * r['mean_shape_error']:9.3f} +/- {100 * r['std_shape_error']:.3f}% "
              f"{1000 * rt['mean']:13.1f} ms")
    return 0


def cmd_control(sc: ex.Scenario, out: Path, args) -> int:
    traces = ex.run_control(sc, args.jobs)
    cdir = out / "control"
    cdir.mkdir(exist_ok=True)
    results = []
    for i, tr in enumerate(traces):
        write_trace_csv(cdir / f"trace_{i:03d}.csv", tr)
        results.append({"target": tr.target.to_dict(), **tr.steady_state()})
    key = "shape_error" if sc.control.kind == "shape" else "tip_error"
    values = [r[key] for r in results]
    summary = {"kind": sc.control.kind, "metric": key, "steady_state": ex._summary(values),
               "targets": results}
    _json_dump(out / "control-summary.json", {"scenario": sc.resolved(), "summary": summary})
    print(f"{len(results)} target(s), steady-state {key.replace('_', ' ')}: {_fmt(summary['steady_state'])}")
    lost = sum(r["tracking_lost"] for r in results)
    if args.strict and lost:
        print("error: tracking lost (strict mode)", file=sys.stderr)
        return EXIT_TRACKING_LOST
    return 0


COMMANDS = {"build-reference": cmd_build_reference, "track": cmd_track,
            "sweep-occlusion": cmd_sweep_occlusion, "sweep-viewpoint": cmd_sweep_viewpoint,
            "ablate": cmd_ablate, "control": cmd_control, "replay": cmd_replay}


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _jobs(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("--jobs must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aft", description="Appearance-based feature tracking experiments.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--scenario", type=Path, help="scenario JSON file (defaults apply when omitted)")
    p.add_argument("--seed", type=_u64, help="override the scenario seed")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    p.add_argument("--strict", action="store_true", help="exit with status 3 on tracking loss")
    p.add_argument("--ablate", help=f"comma-separated components to disable: {','.join(ex.ABLATIONS)}")
    p.add_argument("--jobs", type=_jobs, default=1, help="worker processes for sequences and seeds")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        sc = ex.load_scenario(args.scenario) if args.scenario else ex.Scenario()
        sc = sc.with_overrides(seed=args.seed, ablate=args.ablate)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, ValueError) as e:
        print(f"error: invalid scenario: {e}", file=sys.stderr)
        return EXIT_USAGE
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.verb](sc, args.out, args)
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
