"""Command-line entry point: ``ripstab {tca,eval,interpolate,synth,bench}``.

Exit codes: 0 success, 1 input error, 2 internal invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import shutil
import statistics
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .annotations import (
    MANUAL,
    DenseAnnotation,
    densify_document,
    load_annotations,
)
from .maskcore import FrameGeometry, rle_encode, write_png
from .metrics import EvalConfig, evaluate_stream, f_beta
from .records import (
    Detection,
    FrameDetections,
    format_record,
    group_frames,
    read_records,
    scan_videos,
    write_frame,
)
from .synth import PRESETS as SCENARIOS
from .synth import ScenarioSpec, generate
from .tca import TcaConfig, Stabilizer

log = logging.getLogger("ripstab")

ENV_PREFIX = "RIPSTAB_"


class InputError(Exception):
    pass


def _env(name: str, default=None):
    return os.environ.get(ENV_PREFIX + name, default)


def sha256_of(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hardware_descriptor() -> dict:
    cpu = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo", encoding="utf-8") as fh:
            for line in fh:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return {
        "cpu": cpu,
        "logical_cpus": os.cpu_count(),
        "machine": platform.machine(),
        "system": platform.system(),
        "python": platform.python_version(),
    }


def load_config(path: str | None, preset: str | None = None) -> TcaConfig:
    path = path or _env("CONFIG")
    if path and preset:
        raise InputError("give either --config or --preset, not both")
    try:
        if path:
            return TcaConfig.load(path)
        return TcaConfig.preset(preset or "default")
    except (OSError, ValueError) as exc:
        raise InputError(f"config: {exc}") from None


# --- tca ------------------------------------------------------------------------


def _geometry_of(frame: FrameDetections) -> FrameGeometry | None:
    for det in frame.detections:
        return det.mask.geometry
    return None


def run_video(pred_in: str, video_id: str, cfg: TcaConfig, part_out: str) -> dict:
    """Stabilize one video of a JSONL stream into ``part_out``. Returns stage timings."""
    timings = {"decode_s": 0.0, "tca_s": 0.0, "encode_s": 0.0}
    frames = 0
    stab = None
    pending: list[FrameDetections] = []
    geometry = None
    with open(part_out, "w", encoding="utf-8") as out:
        records = read_records(pred_in, video_id)
        grouped = group_frames(records)
        while True:
            t0 = time.perf_counter()
            item = next(grouped, None)
            timings["decode_s"] += time.perf_counter() - t0
            if item is None:
                break
            _, frame = item
            if stab is None:
                geometry = _geometry_of(frame)
                if geometry is None:
                    # geometry unknown until the first instance arrives
                    pending.append(frame)
                    continue
                stab = Stabilizer(cfg, geometry)
            for fr in (*pending, frame):
                t0 = time.perf_counter()
                start = stab.state.frame_index + 1 if stab.state.started else fr.frame_index
                outputs = stab.push(fr)
                timings["tca_s"] += time.perf_counter() - t0
                frames += fr.frame_index - start + 1
                t0 = time.perf_counter()
                dets = [Detection(o.mask, o.score, track_id=o.track_id) for o in outputs]
                write_frame(out, video_id, FrameDetections(fr.frame_index, dets))
                timings["encode_s"] += time.perf_counter() - t0
            pending = []
        for fr in pending:  # video without a single instance
            out.write(format_record(video_id, fr.frame_index, None) + "\n")
            frames += 1
    return {"frames": frames, "timings": timings,
            "geometry": None if geometry is None else [geometry.width, geometry.height]}


def cmd_tca(args) -> int:
    cfg = load_config(args.config, args.preset)
    pred_in = Path(args.input)
    out = Path(args.out)
    manifest_path = Path(args.manifest) if args.manifest else out.with_name(out.name + ".manifest.json")
    if not pred_in.exists():
        raise InputError(f"{pred_in}: no such file")

    t_start = time.perf_counter()
    videos = scan_videos(pred_in)
    results: list[dict] = []
    with tempfile.TemporaryDirectory(prefix="ripstab-") as tmp:
        parts = [str(Path(tmp) / f"part{i:05d}.jsonl") for i in range(len(videos))]
        jobs = max(1, int(args.jobs))
        if jobs > 1 and len(videos) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futs = [pool.submit(run_video, str(pred_in), v, cfg, p) for v, p in zip(videos, parts)]
                results = [f.result() for f in futs]
        else:
            results = [run_video(str(pred_in), v, cfg, p) for v, p in zip(videos, parts)]
        with out.open("w", encoding="utf-8") as fh:
            for p in parts:
                with open(p, encoding="utf-8") as src:
                    shutil.copyfileobj(src, fh)
    total = time.perf_counter() - t_start

    frames = sum(r["frames"] for r in results)
    timings = {k: sum(r["timings"][k] for r in results) for k in ("decode_s", "tca_s", "encode_s")}
    timings["total_s"] = total
    manifest = {
        "tool": "ripstab",
        "version": __version__,
        "command": "tca",
        "config": cfg.to_dict(),
        "inputs": {"predictions": {"name": pred_in.name, "sha256": sha256_of(pred_in)}},
        "outputs": {"predictions": {"name": out.name, "sha256": sha256_of(out)}},
        "videos": {v: {"frames": r["frames"], "geometry": r["geometry"]} for v, r in zip(videos, results)},
        "frames": frames,
        "hardware": hardware_descriptor(),
        "timings": timings,
        "fps": frames / timings["tca_s"] if timings["tca_s"] > 0 else None,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    log.info("tca: %d frames in %d videos -> %s", frames, len(videos), out)
    return 0


# --- eval -----------------------------------------------------------------------


def _load_predictions(path: Path) -> dict[str, dict[int, list[Detection]]]:
    if path.suffix.lower() == ".json" or path.is_dir():
        # an annotation file used as predictions: every instance scores 1
        aset = load_annotations(path)
        return {vid: {f: [Detection(m, 1.0) for m in d.masks] for f, d in frames.items()}
                for vid, frames in aset.dense_all().items()}
    preds: dict[str, dict[int, list[Detection]]] = {}
    for vid, frame in group_frames(read_records(path)):
        preds.setdefault(vid, {}).setdefault(frame.frame_index, []).extend(frame.detections)
    return preds


def _load_truth(path: Path) -> dict[str, dict[int, DenseAnnotation]]:
    if path.suffix.lower() == ".jsonl":
        gts: dict[str, dict[int, DenseAnnotation]] = {}
        for vid, frame in group_frames(read_records(path)):
            ann = gts.setdefault(vid, {}).setdefault(frame.frame_index, DenseAnnotation(frame.frame_index, [], MANUAL))
            start = len(ann.instances)
            ann.instances.extend((start + k, d.mask) for k, d in enumerate(frame.detections))
        return gts
    return load_annotations(path).dense_all()


def _parse_pair(text: str) -> tuple[float, float]:
    try:
        p, r = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected P,R got {text!r}") from None
    if not (0 <= p <= 1 and 0 <= r <= 1):
        raise argparse.ArgumentTypeError(f"precision and recall must lie in [0, 1]: {text!r}")
    return p, r


def cmd_eval(args) -> int:
    if args.fbeta_only:
        rows = [{"precision": p, "recall": r, "f1": f_beta(p, r, 1.0), "f2": f_beta(p, r, 2.0)}
                for p, r in args.fbeta_only]
        text = "\n".join(f"P={x['precision']:.3f} R={x['recall']:.3f} F1={x['f1']:.4f} F2={x['f2']:.4f}"
                         for x in rows) + "\n"
        if args.out:
            Path(args.out).write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
        sys.stdout.write(text)
        return 0
    if not args.pred or not args.gt:
        raise InputError("eval needs --pred and --gt (or --fbeta-only)")
    pred, gt = Path(args.pred), Path(args.gt)
    for p in (pred, gt):
        if not p.exists():
            raise InputError(f"{p}: no such file")
    fps = None
    if args.manifest:
        fps = json.loads(Path(args.manifest).read_text(encoding="utf-8")).get("fps")
    cfg = EvalConfig(iou_threshold=args.iou_thresh, score_threshold=args.score_thresh, coco_interp=args.coco_interp)
    report = evaluate_stream(_load_predictions(pred), _load_truth(gt), cfg, fps=fps)
    if args.out:
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    text = report.to_text()
    if args.text:
        Path(args.text).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


# --- interpolate ----------------------------------------------------------------


def cmd_interpolate(args) -> int:
    aset = load_annotations(args.input)
    doc = densify_document(aset, args.fps_policy)
    Path(args.out).write_text(json.dumps(doc, separators=(",", ":")) + "\n", encoding="utf-8")
    return 0


# --- synth ----------------------------------------------------------------------


def annotations_document(video_id: str, geometry: FrameGeometry, truth: list[DenseAnnotation]) -> dict:
    images, anns = [], []
    for d in truth:
        img_id = len(images)
        images.append({"id": img_id, "video_id": video_id, "frame_index": d.frame_index,
                       "width": geometry.width, "height": geometry.height, "provenance": d.provenance})
        for iid, m in d.instances:
            anns.append({"id": len(anns), "image_id": img_id, "instance_id": iid, "category_id": 1,
                         "segmentation": rle_encode(m), "area": m.area, "iscrowd": 0})
    return {"images": images, "annotations": anns, "categories": [{"id": 1, "name": "rip"}]}


def cmd_synth(args) -> int:
    if args.spec:
        try:
            spec = ScenarioSpec.load(args.spec)
        except (OSError, ValueError, TypeError) as exc:
            raise InputError(f"scenario spec: {exc}") from None
    else:
        spec = SCENARIOS[args.preset](seed=args.seed)
    stream = generate(spec)
    with open(args.pred_out, "w", encoding="utf-8") as fh:
        for frame in stream.detections:
            write_frame(fh, spec.video_id, frame)
    doc = annotations_document(spec.video_id, stream.geometry, stream.ground_truth)
    Path(args.gt_out).write_text(json.dumps(doc, separators=(",", ":")) + "\n", encoding="utf-8")
    if args.png_dir:
        png = Path(args.png_dir)
        png.mkdir(parents=True, exist_ok=True)
        for d in stream.ground_truth:
            for iid, m in d.instances:
                write_png(m, png / f"{spec.video_id}_{d.frame_index:06d}_{iid}.png")
    return 0


# --- bench ----------------------------------------------------------------------


def cmd_bench(args) -> int:
    cfg = load_config(args.config, args.preset)
    if args.downsample_factor:
        cfg = TcaConfig(**{**cfg.to_dict(), "downsample_factor": args.downsample_factor})
    pred_in = Path(args.input)
    if not pred_in.exists():
        raise InputError(f"{pred_in}: no such file")

    t0 = time.perf_counter()
    videos: dict[str, list[FrameDetections]] = {}
    for vid, frame in group_frames(read_records(pred_in)):
        videos.setdefault(vid, []).append(frame)
    decode_s = time.perf_counter() - t0
    frames = sum(len(v) for v in videos.values())

    pass_times, outputs = [], []
    for _ in range(max(1, args.passes)):
        outputs = []
        t0 = time.perf_counter()
        for vid, fr_list in videos.items():
            geom = next((g for g in map(_geometry_of, fr_list) if g is not None), None)
            if geom is None:
                continue
            stab = Stabilizer(cfg, geom)
            for fr in fr_list:
                outputs.append((vid, fr.frame_index, stab.push(fr)))
        pass_times.append(time.perf_counter() - t0)
    t0 = time.perf_counter()
    for vid, fidx, outs in outputs:
        for o in outs:
            format_record(vid, fidx, Detection(o.mask, o.score, track_id=o.track_id))
    encode_s = time.perf_counter() - t0

    median = statistics.median(pass_times)
    geoms = sorted({(d.mask.geometry.width, d.mask.geometry.height)
                    for fr_list in videos.values() for fr in fr_list for d in fr.detections})
    manifest = {
        "tool": "ripstab",
        "version": __version__,
        "command": "bench",
        "config": cfg.to_dict(),
        "inputs": {"predictions": {"name": pred_in.name, "sha256": sha256_of(pred_in)}},
        "frames": frames,
        "resolutions": [list(g) for g in geoms],
        "hardware": hardware_descriptor(),
        "timings": {
            "decode_s": decode_s,
            "encode_s": encode_s,
            "tca_pass_s": pass_times,
            "tca_median_s": median,
            "tca_per_frame_ms": 1000 * median / frames if frames else None,
        },
        "fps": frames / median if frames and median > 0 else None,
    }
    text = json.dumps(manifest, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


# --- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ripstab", description=__doc__.splitlines()[0])
    ap.add_argument("--jobs", type=int, default=int(_env("JOBS", "1")), help="parallel videos (env RIPSTAB_JOBS)")
    ap.add_argument("--log-level", default=_env("LOG_LEVEL", "WARNING"), help="env RIPSTAB_LOG_LEVEL")
    ap.add_argument("--version", action="version", version=f"ripstab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tca", help="stabilize a prediction stream")
    p.add_argument("--in", dest="input", required=True, help="prediction JSONL")
    p.add_argument("--config", help="TOML/JSON config (env RIPSTAB_CONFIG)")
    p.add_argument("--preset", help="named parameter preset instead of a config file")
    p.add_argument("--out", required=True, help="stabilized JSONL")
    p.add_argument("--manifest", help="run manifest path (default: <out>.manifest.json)")
    p.set_defaults(func=cmd_tca)

    p = sub.add_parser("eval", help="score predictions against annotations")
    p.add_argument("--pred", help="prediction JSONL (or annotation JSON)")
    p.add_argument("--gt", help="annotation JSON, directory of JSON files, or JSONL")
    p.add_argument("--out", help="report JSON")
    p.add_argument("--text", help="write the text table here as well as to stdout")
    p.add_argument("--csv", help="per-video CSV")
    p.add_argument("--manifest", help="tca run manifest to take FPS from")
    p.add_argument("--iou-thresh", type=float, default=0.5)
    p.add_argument("--score-thresh", type=float, default=0.5)
    p.add_argument("--coco-interp", action="store_true", help="101-point interpolated AP")
    p.add_argument("--fbeta-only", type=_parse_pair, nargs="+", metavar="P,R",
                   help="only compute F1/F2 from precision,recall pairs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("interpolate", help="densify keyframe annotations")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--fps-policy", default="linear", choices=["linear", "none"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("synth", help="generate a synthetic scenario")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec", help="scenario JSON/TOML")
    g.add_argument("--preset", choices=sorted(SCENARIOS))
    p.add_argument("--seed", type=int, default=0, help="seed for --preset")
    p.add_argument("--pred-out", required=True, help="detection JSONL")
    p.add_argument("--gt-out", required=True, help="ground-truth annotation JSON")
    p.add_argument("--png-dir", help="also write per-instance ground-truth PNG masks")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="measure TCA throughput")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--config")
    p.add_argument("--preset")
    p.add_argument("--downsample-factor", type=int)
    p.add_argument("--passes", type=int, default=3)
    p.add_argument("--out", help="manifest JSON")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ValueError, OSError, KeyError) as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # invariant violations and bugs
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
