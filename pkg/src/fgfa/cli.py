"""Command-line entry point: generate, infer, train, eval, gradcheck, report, replay.

Configuration precedence is defaults < ``--config FILE`` < ``--set key=value``
< dedicated flags (``--k``, ``--mode``, ...). Every command writes one run
manifest next to its output.

Exit codes: 0 ok, 1 failed gradient check, 2 config error, 3 contract
violation, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .aggregation import FlowSource, histogram_csv, infer_video, weight_histogram
from .boxes import Detection
from .config import MODES, PipelineConfig, load_config
from .errors import ConfigError, ContractViolation, TensorFormatError
from .evaluation import SeqNmsConfig, evaluate_map, group_of_instances, pr_curve_csv, seq_nms
from .gradcheck import COMPONENTS, grad_check
from .synthetic import SceneSpec, generate, load_dataset, make_scene, save_dataset
from .tensor import write_tensor
from .training import load_checkpoint, log_csv, save_checkpoint, train

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_CONTRACT, EXIT_IO = 0, 1, 2, 3, 4
CLIP_PREFIX = "clip_"


class _Run:
    """Collects what goes into the run manifest."""

    def __init__(self, command: str, argv: list[str]):
        self.command = command
        self.argv = list(argv)
        self.config: dict | None = None
        self.paths: dict = {}
        self.seed = None
        self.timings: dict = {}
        self.extra: dict = {}
        self.dump_dir: Path | None = None

    def timed(self, stage: str):
        run = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[stage] = round(time.perf_counter() - self.t0, 6)

        return _Timer()

    def write(self, path: Path) -> None:
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "cwd": os.getcwd(),
            "config": self.config,
            "paths": self.paths,
            "seed": self.seed,
            "timings": self.timings,
            "version": __version__,
            **self.extra,
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, Path):
        return str(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x)}")


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.name + suffix)


def _dump_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True, default=_jsonable) + "\n")


# --- config assembly -----------------------------------------------------------------


def _parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got '{item}'", key=item)
        out[key.strip()] = value
    return out


def build_config(args, flag_values: dict | None = None) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    cfg.update(_parse_sets(getattr(args, "set", None)))
    overrides = {k: v for k, v in (flag_values or {}).items() if v is not None}
    if getattr(args, "threads", None) is not None:
        overrides["runtime.threads"] = args.threads
    cfg.update(overrides)
    return cfg


# --- datasets ----------------------------------------------------------------------


def load_clips(path) -> list[tuple[str, object]]:
    """A clip directory, or a directory whose sub-directories are clips."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory {root} does not exist")
    if (root / "spec.json").exists():
        return [("", load_dataset(root))]
    clips = [(p.name, load_dataset(p)) for p in sorted(root.iterdir()) if (p / "spec.json").exists()]
    if not clips:
        raise FileNotFoundError(f"no clips (spec.json) under {root}")
    return clips


def _scene_specs(args) -> tuple[list[SceneSpec], bool]:
    """Scene specs to render and whether they form a multi-clip suite."""
    if args.spec:
        data = json.loads(Path(args.spec).read_text())
    else:
        if not args.group:
            raise ConfigError("generate needs --spec or --group", key="group")
        data = {"suite": {"group": args.group, "clips": args.clips, "seed": args.seed}}
    if "suite" in data:
        recipe = dict(data["suite"])
        group = recipe.pop("group", None)
        if group is None:
            raise ConfigError("suite recipe needs a 'group'", key="suite.group")
        n = int(recipe.pop("clips", 1))
        seed = int(recipe.pop("seed", 0))
        try:
            return [make_scene(group, seed + c, **recipe) for c in range(n)], True
        except TypeError as exc:
            raise ConfigError(f"bad suite recipe: {exc}", key="suite") from exc
    if "clips" in data:
        return [SceneSpec.from_json(d) for d in data["clips"]], True
    return [SceneSpec.from_json(data)], False


# --- commands --------------------------------------------------------------------------


def cmd_generate(args, run: _Run) -> int:
    out = Path(args.out)
    specs, is_suite = _scene_specs(args)
    run.seed = [s.seed for s in specs]
    run.paths = {"spec": args.spec, "out": str(out)}
    with run.timed("generate"):
        if not is_suite:
            save_dataset(generate(specs[0]), out)
            run.extra["clips"] = [""]
        else:
            names = []
            for c, spec in enumerate(specs):
                name = f"{CLIP_PREFIX}{c:04d}"
                save_dataset(generate(spec), out / name)
                names.append(name)
            run.extra["clips"] = names
    run.write(out / "manifest.json")
    return EXIT_OK


def _detections_jsonl(per_clip) -> str:
    lines = []
    for name, dets in per_clip:
        for d in dets:
            rec = d.to_json()
            if name:
                rec["video"] = name
            lines.append(json.dumps(rec, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def read_detections(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    text = Path(path).read_text()
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            det = Detection.from_json(rec)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise OSError(f"{path}:{n}: malformed detection record ({exc})") from exc
        out.setdefault(rec.get("video", ""), []).append(det)
    return out


def cmd_infer(args, run: _Run) -> int:
    cfg = build_config(args, {"aggregation.k_infer": args.k, "aggregation.mode": args.mode,
                              "aggregation.record_weights": True if args.record_weights else None})
    out = Path(args.out)
    run.config = cfg.to_flat()
    run.seed = cfg.aggregation.flow_noise_seed
    run.paths = {"data": args.data, "checkpoint": args.checkpoint, "out": str(out)}
    run.dump_dir = _sidecar(out, ".violation")
    model, _ = load_checkpoint(args.checkpoint)
    clips = load_clips(args.data)
    agg = cfg.aggregation
    per_clip, stats, hist_rows = [], [], []
    frames = 0
    with run.timed("infer"):
        for name, ds in clips:
            flows = FlowSource.from_dataset(ds, model.feature.stride, agg.flow_noise_std, agg.flow_noise_seed)
            res = infer_video(ds.frames, model, agg, flows)
            per_clip.append((name, res.all_detections()))
            frames += len(ds.frames)
            stats.append({"video": name, "feature_calls": res.feature_calls, "direct_flow_calls": res.direct_flow_calls,
                          "pair_evaluations": res.pair_evaluations,
                          "max_weight_sum_deviation": res.max_weight_sum_deviation})
            if agg.record_weights:
                dev = max(float(np.abs(sum(m.values()) - 1.0).max()) for m in res.weights)
                if dev > 1e-6:
                    raise ContractViolation(f"recorded weights of {name or 'clip'} deviate from 1 by {dev:.3g}",
                                            {"weights_first_frame": np.stack(list(res.weights[0].values()))})
                groups = group_of_instances(ds.tracks, cfg.eval)
                for row in weight_histogram(res.weights, ds.tracks, agg.k_infer, model.feature.stride, groups):
                    hist_rows.append({**row, "video": name})
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(_detections_jsonl(per_clip))
    if agg.record_weights:
        _weights_csv(_sidecar(out, ".weights.csv"), hist_rows)
        run.paths["weights"] = str(_sidecar(out, ".weights.csv"))
    run.extra.update({"mode": agg.mode, "k": agg.k_infer, "frames": frames, "clips": stats,
                      "ms_per_frame": 1000.0 * run.timings["infer"] / max(frames, 1)})
    run.write(_sidecar(out, ".manifest.json"))
    return EXIT_OK


def _weights_csv(path: Path, rows) -> None:
    """Per-offset weight mass per motion group, pooled over clips."""
    sums, counts = {}, {}
    for r in rows:
        key = (r["offset"], r["motion_group"])
        sums[key] = sums.get(key, 0.0) + r["mean_mass"]
        counts[key] = counts.get(key, 0) + 1
    order = ["slow", "medium", "fast"]
    pooled = [{"offset": d, "motion_group": g, "mean_mass": sums[(d, g)] / counts[(d, g)]}
              for d, g in sorted(sums, key=lambda x: (order.index(x[1]), x[0]))]
    path.write_text(histogram_csv(pooled))


def cmd_train(args, run: _Run) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    run.config = cfg.to_flat()
    run.seed = cfg.train.seed
    run.paths = {"data": args.data, "config": args.config, "out": str(out)}
    run.dump_dir = out / "violation"
    clips = [ds for _, ds in load_clips(args.data)]
    init = None
    if cfg.train.init_checkpoint:
        init, _ = load_checkpoint(cfg.train.init_checkpoint)
        run.paths["init_checkpoint"] = cfg.train.init_checkpoint
    with run.timed("train"):
        result = train(clips, cfg, model=init)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.model, cfg, step=cfg.train.iterations, rng_state=result.rng_state)
    every = max(cfg.train.log_every, 1)
    (out / "train_log.csv").write_text(log_csv([r for r in result.log if r[0] % every == 0]))
    run.write(out / "run_manifest.json")
    return EXIT_OK


def cmd_eval(args, run: _Run) -> int:
    cfg = build_config(args, {"eval.seq_nms": True if args.seq_nms else None})
    out = Path(args.out)
    run.config = cfg.to_flat()
    run.paths = {"detections": args.detections, "data": args.data, "out": str(out)}
    clips = load_clips(args.data)
    dets = read_detections(args.detections)
    unknown = set(dets) - {name for name, _ in clips}
    if unknown:
        raise ConfigError(f"detections reference unknown clips {sorted(unknown)}", key="video")
    source = {"detections": str(Path(args.detections).resolve())}
    src_manifest = _sidecar(Path(args.detections), ".manifest.json")
    if src_manifest.exists():
        m = json.loads(src_manifest.read_text())
        source.update({"mode": m.get("mode"), "k": m.get("k"), "manifest": str(src_manifest.resolve())})
    videos = []
    with run.timed("eval"):
        for name, ds in clips:
            d = dets.get(name, [])
            if cfg.eval.seq_nms:
                per_frame = [[] for _ in range(len(ds.frames))]
                for x in d:
                    if not 0 <= x.frame < len(ds.frames):
                        raise ConfigError(f"detection frame {x.frame} outside clip '{name}'", key="frame")
                    per_frame[x.frame].append(x)
                per_frame = seq_nms(per_frame, SeqNmsConfig(cfg.eval.seq_nms_link_iou, cfg.eval.seq_nms_suppress_iou))
                d = [x for f in per_frame for x in f]
            videos.append((d, ds.tracks))
        num_classes = max((tr.class_id for _, ds in clips for tr in ds.tracks), default=-1) + 1
        metrics = evaluate_map(videos, cfg.eval, num_classes)
    curves = metrics.pop("_curves")
    metrics["seq_nms"] = cfg.eval.seq_nms
    metrics["source"] = source
    _dump_json(out, metrics)
    pr = _sidecar(out, ".pr.csv")
    pr.write_text(pr_curve_csv(curves))
    run.paths["pr_curves"] = str(pr)
    run.write(_sidecar(out, ".manifest.json"))
    return EXIT_OK


def cmd_gradcheck(args, run: _Run) -> int:
    if args.component != "all" and args.component not in COMPONENTS:
        raise ConfigError(f"unknown component '{args.component}'", key="component")
    out = Path(args.out)
    run.seed = args.seed
    run.paths = {"out": str(out)}
    with run.timed("gradcheck"):
        reports = grad_check(args.component, args.trials, args.seed)
    body = {"component": args.component, "trials": args.trials, "seed": args.seed,
            "reports": [r.to_json() for r in reports], "passed": all(r.passed for r in reports)}
    _dump_json(out, body)
    for r in reports:
        print(f"{r.component:<10} checked={r.checked:<4} skipped={r.skipped:<3} "
              f"max_rel={r.max_rel_error:.3e} tol={r.tolerance:.0e} {'ok' if r.passed else 'FAIL'}")
    run.write(_sidecar(out, ".manifest.json"))
    return EXIT_OK if body["passed"] else EXIT_GRADCHECK


REPORT_COLUMNS = ["run", "mode", "k", "seq_nms", "map", "map_slow", "map_medium", "map_fast", "runtime_ms"]


def _report_rows(runs_dir: Path) -> list[dict]:
    rows = []
    for path in sorted(runs_dir.rglob("*.json")):
        if path.name.endswith(".manifest.json") or path.name in ("manifest.json", "run_manifest.json"):
            continue
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError:
            continue
        if not isinstance(data, dict) or "map" not in data or "source" not in data:
            continue
        src = data["source"]
        ms = None
        if src.get("manifest") and Path(src["manifest"]).exists():
            ms = json.loads(Path(src["manifest"]).read_text()).get("ms_per_frame")
        rows.append({"run": str(path.relative_to(runs_dir)), "mode": src.get("mode"), "k": src.get("k"),
                     "seq_nms": data.get("seq_nms", False), "map": data["map"], "map_slow": data.get("map_slow"),
                     "map_medium": data.get("map_medium"), "map_fast": data.get("map_fast"), "runtime_ms": ms})
    rank = {m: i for i, m in enumerate(MODES)}
    rows.sort(key=lambda r: (rank.get(r["mode"], len(MODES)), r["k"] if r["k"] is not None else -1,
                             r["seq_nms"], r["run"]))
    return rows


def _fmt(v, pct=True):
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{100 * v:.1f}" if pct else f"{v:.1f}"
    return str(v)


def cmd_report(args, run: _Run) -> int:
    runs_dir = Path(args.runs)
    if not runs_dir.is_dir():
        raise FileNotFoundError(f"runs directory {runs_dir} does not exist")
    out = Path(args.out)
    run.paths = {"runs": str(runs_dir), "out": str(out)}
    rows = _report_rows(runs_dir)
    if not rows:
        raise FileNotFoundError(f"no metrics files under {runs_dir}")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r[k] is None else (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k])) for k in REPORT_COLUMNS})
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(buf.getvalue())
    md = ["| run | mode | K | seq-nms | mAP | slow | medium | fast | runtime (ms) |",
          "|---|---|---|---|---|---|---|---|---|"]
    for r in rows:
        md.append("| " + " | ".join([r["run"], _fmt(r["mode"]), _fmt(r["k"]), _fmt(r["seq_nms"]), _fmt(r["map"]),
                                      _fmt(r["map_slow"]), _fmt(r["map_medium"]), _fmt(r["map_fast"]),
                                      _fmt(r["runtime_ms"], pct=False)]) + " |")
    md_path = out.with_suffix(".md")
    md_path.write_text("\n".join(md) + "\n")
    run.paths["markdown"] = str(md_path)
    run.write(_sidecar(out, ".manifest.json"))
    return EXIT_OK


def cmd_replay(args, run: _Run) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    argv = list(manifest.get("argv") or [])
    if not argv or manifest.get("command") == "replay":
        raise ConfigError(f"manifest {args.manifest} has no replayable command", key="argv")
    argv = _force_threads(argv, 1)
    cwd = os.getcwd()
    os.chdir(manifest.get("cwd") or cwd)
    try:
        return main(argv)
    finally:
        os.chdir(cwd)


def _force_threads(argv, n):
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--threads":
            skip = True
            continue
        if a.startswith("--threads="):
            continue
        out.append(a)
    return out + ["--threads", str(n)]


# --- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS threads (1 = bit-deterministic)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--config", default=None, help="JSON config file with flat dotted or nested keys")

    p = argparse.ArgumentParser(prog="fgfa", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fgfa {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="render a synthetic clip or suite")
    g.add_argument("--spec", help="scene spec JSON, {'clips': [...]} or {'suite': {group, clips, seed, ...}}")
    g.add_argument("--group", choices=["slow", "medium", "fast"], help="shortcut for a suite recipe")
    g.add_argument("--clips", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    i = sub.add_parser("infer", parents=[common], help="detect on every frame of a clip or suite")
    i.add_argument("--data", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--k", type=int, default=None)
    i.add_argument("--mode", choices=MODES, default=None)
    i.add_argument("--record-weights", action="store_true")
    i.add_argument("--out", required=True, help="detections JSON lines")

    t = sub.add_parser("train", parents=[common], help="train the toy pipeline")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint directory")

    e = sub.add_parser("eval", parents=[common], help="mAP overall and per motion/size group")
    e.add_argument("--detections", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--seq-nms", action="store_true")
    e.add_argument("--out", required=True, help="metrics JSON")

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    c.add_argument("--component", default="all", help=f"all or one of: {', '.join(COMPONENTS)}")
    c.add_argument("--trials", type=int, default=500)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default="gradcheck.json")

    r = sub.add_parser("report", parents=[common], help="ablation grid from metrics files")
    r.add_argument("--runs", required=True)
    r.add_argument("--out", required=True, help="CSV path; Markdown goes next to it")

    rp = sub.add_parser("replay", parents=[common], help="rerun the command recorded in a manifest")
    rp.add_argument("manifest")
    return p


COMMANDS = {
    "generate": cmd_generate,
    "infer": cmd_infer,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
    "replay": cmd_replay,
}


def _dump_violation(run: _Run, exc: ContractViolation) -> str | None:
    if not exc.tensors:
        return None
    d = run.dump_dir or Path("contract_violation")
    d.mkdir(parents=True, exist_ok=True)
    for name, t in exc.tensors.items():
        arr = np.asarray(t, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        while arr.ndim > 4:
            arr = arr.reshape((arr.shape[0] * arr.shape[1],) + arr.shape[2:])
        write_tensor(d / f"{name}.fgt", arr)
    return str(d)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    run = _Run(args.command, argv)
    threads = args.threads if args.threads is not None else 1
    try:
        if threads < 1:
            raise ConfigError("--threads must be >= 1", key="runtime.threads")
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args, run)
    except ConfigError as exc:
        key = f" [key: {exc.key}]" if exc.key else ""
        print(f"fgfa: config error{key}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractViolation as exc:
        where = _dump_violation(run, exc)
        tail = f"; tensors dumped to {where}" if where else ""
        print(f"fgfa: contract violation: {exc}{tail}", file=sys.stderr)
        return EXIT_CONTRACT
    except (OSError, TensorFormatError, json.JSONDecodeError) as exc:
        print(f"fgfa: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
