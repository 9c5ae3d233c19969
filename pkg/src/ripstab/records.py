"""Detection types and the JSONL prediction interchange.

One JSON object per line::

    {"video_id": "v1", "frame_index": 12,
     "instance": {"score": 0.91, "mask": {"size": [h, w], "counts": [...]}, "track_id": 3}}

``mask`` may also be a flat polygon ``[x0, y0, x1, y1, ...]``, in which case the
record needs top-level ``width`` and ``height``. A line whose ``instance`` is
``null`` marks a frame that has no instances.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator

import numpy as np

from .maskcore import BinaryMask, FrameGeometry, Polygon, RleError, rasterize, rle_decode, rle_encode


class RecordError(ValueError):
    """Malformed or out-of-order JSONL input; the message names the line."""


@dataclass
class Detection:
    mask: BinaryMask
    score: float
    score_map: np.ndarray | None = None
    track_id: int | None = None


@dataclass
class FrameDetections:
    frame_index: int
    detections: list[Detection] = field(default_factory=list)


@dataclass
class PredictionRecord:
    video_id: str
    frame_index: int
    detection: Detection | None
    line_no: int = 0


def _parse_mask(obj, rec: dict, where: str, frame, inst) -> BinaryMask:
    if isinstance(obj, dict):
        try:
            return rle_decode(obj, frame=frame, instance=inst)
        except RleError as exc:
            raise RecordError(f"{where}: {exc}") from None
    if isinstance(obj, list):
        if "width" not in rec or "height" not in rec:
            raise RecordError(f"{where}: polygon mask needs record-level width and height")
        geom = FrameGeometry(int(rec["width"]), int(rec["height"]))
        rings = obj if obj and isinstance(obj[0], list) else [obj]
        try:
            bits = np.zeros(geom.shape, dtype=bool)
            for ring in rings:
                bits |= rasterize(Polygon.from_flat(ring, geom), geom).bits
        except ValueError as exc:
            raise RecordError(f"{where}: bad polygon ({exc})") from None
        return BinaryMask(bits)
    raise RecordError(f"{where}: mask must be an RLE object or a polygon list")


def _load_line(line: str, where: str) -> dict | None:
    s = line.strip()
    if not s:
        return None
    try:
        rec = json.loads(s)
    except json.JSONDecodeError as exc:
        raise RecordError(f"{where}: invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise RecordError(f"{where}: expected a JSON object")
    return rec


def _build(rec: dict, line_no: int, where: str) -> PredictionRecord:
    try:
        video_id = str(rec["video_id"])
        frame_index = int(rec["frame_index"])
    except (KeyError, TypeError, ValueError) as exc:
        raise RecordError(f"{where}: missing or invalid video_id/frame_index ({exc})") from None
    if frame_index < 0:
        raise RecordError(f"{where}: negative frame_index")
    inst = rec.get("instance")
    if inst is None:
        return PredictionRecord(video_id, frame_index, None, line_no)
    if not isinstance(inst, dict) or "mask" not in inst:
        raise RecordError(f"{where}: instance must be an object with a mask")
    try:
        score = float(inst.get("score", 1.0))
    except (TypeError, ValueError):
        raise RecordError(f"{where}: score is not a number") from None
    if not 0.0 <= score <= 1.0:
        raise RecordError(f"{where}: score {score} outside [0, 1]")
    track_id = inst.get("track_id")
    mask = _parse_mask(inst["mask"], rec, where, frame_index, track_id)
    det = Detection(mask=mask, score=score, track_id=None if track_id is None else int(track_id))
    return PredictionRecord(video_id, frame_index, det, line_no)


def parse_record(line: str, line_no: int = 0, source: str = "<jsonl>") -> PredictionRecord | None:
    """Parse one line; blank lines give ``None``."""
    where = f"{source}:{line_no}"
    rec = _load_line(line, where)
    return None if rec is None else _build(rec, line_no, where)


def read_records(path: str | Path, video_id: str | None = None) -> Iterator[PredictionRecord]:
    """Stream records from a JSONL file, optionally only those of one video."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            where = f"{path}:{n}"
            rec = _load_line(line, where)
            if rec is None:
                continue
            if video_id is not None and str(rec.get("video_id")) != video_id:
                continue
            yield _build(rec, n, where)


def scan_videos(path: str | Path) -> list[str]:
    """Video ids in order of first appearance; validates every line on the way."""
    seen: dict[str, int] = {}
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            try:
                rec = json.loads(s)
                vid = str(rec["video_id"])
                frame = int(rec["frame_index"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                # full parse gives the precise message
                parse_record(line, n, str(path))
                raise RecordError(f"{path}:{n}: malformed record") from None
            last = seen.get(vid)
            if last is not None and frame < last:
                raise RecordError(f"{path}:{n}: frame {frame} of video {vid!r} follows frame {last}")
            seen[vid] = frame
    return list(seen)


def group_frames(records: Iterable[PredictionRecord]) -> Iterator[tuple[str, FrameDetections]]:
    """Collapse consecutive records of one (video, frame) into a FrameDetections.

    Frame indices must be non-decreasing per video.
    """
    last: dict[str, int] = {}
    cur_vid, cur = None, None
    for rec in records:
        prev = last.get(rec.video_id)
        if prev is not None and rec.frame_index < prev:
            raise RecordError(
                f"line {rec.line_no}: frame {rec.frame_index} of video {rec.video_id!r} follows frame {prev}")
        last[rec.video_id] = rec.frame_index
        if cur is None or rec.video_id != cur_vid or rec.frame_index != cur.frame_index:
            if cur is not None:
                yield cur_vid, cur
            cur_vid, cur = rec.video_id, FrameDetections(rec.frame_index, [])
        if rec.detection is not None:
            cur.detections.append(rec.detection)
    if cur is not None:
        yield cur_vid, cur


def format_record(video_id: str, frame_index: int, det: Detection | None) -> str:
    rec: dict = {"video_id": video_id, "frame_index": int(frame_index)}
    if det is None:
        rec["instance"] = None
    else:
        inst: dict = {"score": float(det.score), "mask": rle_encode(det.mask)}
        if det.track_id is not None:
            inst["track_id"] = int(det.track_id)
        rec["instance"] = inst
    return json.dumps(rec, separators=(",", ":"))


def write_frame(fh: IO[str], video_id: str, frame: FrameDetections) -> None:
    """Write a frame's instances, or a marker line when it has none."""
    if not frame.detections:
        fh.write(format_record(video_id, frame.frame_index, None) + "\n")
    for det in frame.detections:
        fh.write(format_record(video_id, frame.frame_index, det) + "\n")


def write_stream(path: str | Path, streams: dict[str, list[FrameDetections]]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for vid, frames in streams.items():
            for frame in frames:
                write_frame(fh, vid, frame)
