"""Temporal confidence aggregation over per-frame instance masks.

Each tracked instance owns a heatmap in downsampled space. Detected pixels pull
the heatmap toward the detection score with an exponential moving average, gated
by a per-pixel present counter; undetected pixels decay geometrically. A blurred
copy of the heatmap is hysteresis-thresholded to produce the stabilized mask.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy import ndimage

from .maskcore import (
    BilinearGrid,
    BinaryMask,
    FrameGeometry,
    GeometryMismatch,
    _dilate_bits,
    _downsample_bits,
    downsample_shape,
    gaussian_blur,
)
from .records import Detection, FrameDetections
from .tracker import associate

log = logging.getLogger(__name__)

_EIGHT = np.ones((3, 3), dtype=bool)


class FrameOrderError(ValueError):
    pass


@dataclass(frozen=True)
class TcaConfig:
    alpha: float = 0.4
    downsample_factor: int = 4
    min_present: int = 3
    decay_gamma: float = 0.9
    sigma: float = 2.0
    low: float = 0.3
    high: float = 0.6
    dilation_radius: int = 1
    iou_gate: float = 0.1
    max_absent_frames: int = 30
    match_against: str = "stabilized"
    reset_present_on_absence: bool = False
    smooth_in_place: bool = False

    def __post_init__(self):
        problems = []
        if not 0 < self.alpha <= 1:
            problems.append(f"alpha={self.alpha} not in (0, 1]")
        if not 0 <= self.decay_gamma < 1:
            problems.append(f"decay_gamma={self.decay_gamma} not in [0, 1)")
        if not 0 <= self.low <= self.high <= 1:
            problems.append(f"need 0 <= low <= high <= 1, got low={self.low} high={self.high}")
        if self.min_present < 1:
            problems.append("min_present must be >= 1")
        if self.downsample_factor < 1:
            problems.append("downsample_factor must be >= 1")
        if self.sigma < 0:
            problems.append("sigma must be >= 0")
        if self.dilation_radius < 0:
            problems.append("dilation_radius must be >= 0")
        if not 0 <= self.iou_gate <= 1:
            problems.append("iou_gate must be in [0, 1]")
        if self.max_absent_frames < 1:
            problems.append("max_absent_frames must be >= 1")
        if self.match_against not in ("raw", "stabilized"):
            problems.append(f"match_against must be 'raw' or 'stabilized', got {self.match_against!r}")
        if problems:
            raise ValueError("invalid TCA config: " + "; ".join(problems))

    @classmethod
    def identity(cls) -> "TcaConfig":
        """Every stage degenerates to a pass-through for scores above 0.5."""
        return cls(alpha=1.0, min_present=1, decay_gamma=0.0, sigma=0.0, low=0.5, high=0.5,
                   downsample_factor=1, dilation_radius=0)

    @classmethod
    def preset(cls, name: str) -> "TcaConfig":
        try:
            return cls(**PRESETS[name])
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None

    @classmethod
    def from_mapping(cls, data: Mapping) -> "TcaConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ValueError(f"unknown TCA config keys: {', '.join(unknown)}")
        return cls(**dict(data))

    @classmethod
    def load(cls, path: str | Path) -> "TcaConfig":
        """Read a TOML or JSON file whose keys mirror the config fields."""
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a table/object")
        return cls.from_mapping(data)

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS: dict[str, dict] = {
    "default": {},
    "identity": asdict(TcaConfig.identity()),
    # stationary footage
    "slow-gain-slow-decay": {"alpha": 0.2, "min_present": 4, "decay_gamma": 0.95},
    # moving cameras
    "fast-gain-fast-decay": {"alpha": 0.7, "min_present": 2, "decay_gamma": 0.6},
    # safety-critical: quick to raise, slow to forget
    "fast-gain-slow-decay": {"alpha": 0.7, "min_present": 2, "decay_gamma": 0.95},
}


@dataclass
class TrackState:
    """Mutable per-instance aggregation state, all grids in downsampled space."""

    id: int
    heatmap: np.ndarray
    present_counter: np.ndarray
    absence_counter: np.ndarray
    last_output: BinaryMask
    last_detection: BinaryMask
    frames_fully_absent: int = 0
    born_frame: int = 0

    @classmethod
    def fresh(cls, track_id: int, geometry: FrameGeometry, frame_index: int = 0) -> "TrackState":
        shape = geometry.shape
        return cls(
            id=track_id,
            heatmap=np.zeros(shape, dtype=np.float64),
            present_counter=np.zeros(shape, dtype=np.int32),
            absence_counter=np.zeros(shape, dtype=np.int32),
            last_output=BinaryMask.empty(geometry),
            last_detection=BinaryMask.empty(geometry),
            born_frame=frame_index,
        )

    def matching_mask(self, match_against: str) -> BinaryMask:
        # A young track has no stabilized output yet; fall back to its raw detection.
        if match_against == "stabilized" and self.last_output:
            return self.last_output
        return self.last_detection


def _bits(mask) -> np.ndarray:
    return mask.bits if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)


def heatmap_update(track: TrackState, det_mask, det_score, cfg: TcaConfig) -> TrackState:
    """Present-counter gated EMA on the pixels covered by a detection.

    ``det_score`` is the instance confidence, or a per-pixel score map of the
    heatmap's shape. The track is updated in place and returned.
    """
    m = _bits(det_mask)
    if m.shape != track.heatmap.shape:
        raise GeometryMismatch(f"detection grid {m.shape} != heatmap grid {track.heatmap.shape}")
    score = np.asarray(det_score, dtype=np.float64)
    if np.any(score < 0) or np.any(score > 1) or np.any(np.isnan(score)):
        raise ValueError(f"detection score outside [0, 1]: {det_score!r}")
    if score.ndim and score.shape != m.shape:
        raise GeometryMismatch(f"score map {score.shape} != heatmap grid {m.shape}")

    track.present_counter[m] += 1
    track.absence_counter[m] = 0
    gate = m & (track.present_counter >= cfg.min_present)
    c = score[gate] if score.ndim else score
    track.heatmap[gate] = cfg.alpha * c + (1.0 - cfg.alpha) * track.heatmap[gate]
    return track


def heatmap_decay(track: TrackState, det_mask, cfg: TcaConfig) -> TrackState:
    """Geometric decay on every pixel not covered by ``det_mask`` (``None`` = all pixels)."""
    m = None if det_mask is None else _bits(det_mask)
    if m is None or not m.any():
        track.absence_counter += 1
        track.heatmap *= cfg.decay_gamma
        if cfg.reset_present_on_absence:
            track.present_counter[...] = 0
        track.frames_fully_absent += 1
        return track
    absent = ~m
    np.add(track.absence_counter, 1, out=track.absence_counter, where=absent)
    np.multiply(track.heatmap, cfg.decay_gamma, out=track.heatmap, where=absent)
    if cfg.reset_present_on_absence:
        track.present_counter[absent] = 0
    track.frames_fully_absent = 0
    return track


def _hysteresis_bits(h: np.ndarray, low: float, high: float, radius: int) -> np.ndarray:
    strong = h >= high
    if not strong.any():
        return strong
    cand = h >= low
    weak = cand & ~strong
    if not weak.any():
        return strong
    labels, n = ndimage.label(cand, structure=_EIGHT)
    seeds = _dilate_bits(strong, radius) & cand
    keep = np.zeros(n + 1, dtype=bool)
    keep[labels[seeds]] = True
    keep[0] = False
    return strong | (weak & keep[labels])


def threshold_hysteresis(h, low: float, high: float, dilation_radius: int = 1) -> BinaryMask:
    """Dual-threshold binarization.

    Pixels ``>= high`` are strong. Pixels in ``[low, high)`` are weak and kept only
    when their 8-connected component of ``h >= low`` touches the strong set dilated
    by ``dilation_radius``.
    """
    if not 0 <= low <= high <= 1:
        raise ValueError(f"need 0 <= low <= high <= 1, got low={low} high={high}")
    return BinaryMask(_hysteresis_bits(np.asarray(h, dtype=np.float64), low, high, dilation_radius))


@dataclass
class TrackOutput:
    track_id: int
    mask: BinaryMask
    score: float


@dataclass
class TcaVideoState:
    config: TcaConfig
    geometry: FrameGeometry
    tracks: list[TrackState] = field(default_factory=list)
    frame_index: int = -1
    next_id: int = 0

    def __post_init__(self):
        self.small = downsample_shape(self.geometry, self.config.downsample_factor)
        self._grid = None
        if self.config.downsample_factor > 1:
            self._grid = BilinearGrid(self.small, self.geometry, self.config.downsample_factor)

    @property
    def started(self) -> bool:
        return self.frame_index >= 0


def _window(i0: np.ndarray, lo: int, hi: int) -> slice:
    # fine indices whose lower source cell lies in [lo - 1, hi]
    return slice(int(np.searchsorted(i0, lo - 1, "left")), int(np.searchsorted(i0, hi, "right")))


def _native_output(state: TcaVideoState, blurred: np.ndarray) -> tuple[np.ndarray, float]:
    cfg = state.config
    if state._grid is None:
        out = _hysteresis_bits(blurred, cfg.low, cfg.high, cfg.dilation_radius)
        return out, float(blurred[out].mean()) if out.any() else 0.0

    # Bilinear values can only reach `low` next to a coarse cell that does, so the
    # native pass is confined to that cell's bounding box plus a one-cell margin.
    cand = blurred >= cfg.low
    rows = np.flatnonzero(cand.any(axis=1))
    cols = np.flatnonzero(cand.any(axis=0))
    g = state._grid
    rs = _window(g.y0, rows[0], rows[-1])
    cs = _window(g.x0, cols[0], cols[-1])
    fine = g.sample(blurred, rs, cs)
    radius = cfg.dilation_radius * cfg.downsample_factor
    crop = _hysteresis_bits(fine, cfg.low, cfg.high, radius)
    out = np.zeros(state.geometry.shape, dtype=bool)
    out[rs, cs] = crop
    return out, float(fine[crop].mean()) if crop.any() else 0.0


def tca_step(state: TcaVideoState, frame: FrameDetections) -> tuple[TcaVideoState, list[TrackOutput]]:
    """Advance one frame. Mutates ``state`` and returns it with this frame's outputs.

    Outputs are the tracks whose stabilized mask is nonempty, in track creation
    order, with masks at native resolution.
    """
    cfg = state.config
    if state.started and frame.frame_index != state.frame_index + 1:
        raise FrameOrderError(f"expected frame {state.frame_index + 1}, got {frame.frame_index}")
    f = cfg.downsample_factor

    small_masks: list[BinaryMask] = []
    for k, det in enumerate(frame.detections):
        if det.mask.bits.shape != state.geometry.shape:
            raise GeometryMismatch(
                f"frame {frame.frame_index} detection {k}: mask {det.mask.geometry} != video {state.geometry}")
        small_masks.append(BinaryMask(_downsample_bits(det.mask.bits, f)))

    prev = [t.matching_mask(cfg.match_against) for t in state.tracks]
    assignment, _ = associate(prev, small_masks, cfg.iou_gate)

    for ti, di in assignment.matches:
        track, det = state.tracks[ti], frame.detections[di]
        heatmap_update(track, small_masks[di], _small_score(det, f), cfg)
        heatmap_decay(track, small_masks[di], cfg)
        track.last_detection = small_masks[di]
    for ti in assignment.unmatched_tracks:
        heatmap_decay(state.tracks[ti], None, cfg)
    for di in assignment.unmatched_detections:
        track = TrackState.fresh(state.next_id, state.small, frame.frame_index)
        state.next_id += 1
        heatmap_update(track, small_masks[di], _small_score(frame.detections[di], f), cfg)
        track.last_detection = small_masks[di]
        state.tracks.append(track)

    outputs: list[TrackOutput] = []
    for track in state.tracks:
        blurred = gaussian_blur(track.heatmap, cfg.sigma) if cfg.sigma > 0 else track.heatmap
        if cfg.smooth_in_place and cfg.sigma > 0:
            track.heatmap = blurred.copy()
        small_out = _hysteresis_bits(blurred, cfg.low, cfg.high, cfg.dilation_radius)
        track.last_output = BinaryMask(small_out)
        if small_out.any():
            native, score = _native_output(state, blurred)
            if native.any():
                outputs.append(TrackOutput(track.id, BinaryMask(native), score))

    dead = [t.id for t in state.tracks if t.frames_fully_absent >= cfg.max_absent_frames]
    if dead:
        log.debug("frame %d: retiring tracks %s", frame.frame_index, dead)
        state.tracks = [t for t in state.tracks if t.frames_fully_absent < cfg.max_absent_frames]
    state.frame_index = frame.frame_index
    return state, outputs


def _small_score(det: Detection, factor: int):
    if det.score_map is None:
        return det.score
    smap = np.asarray(det.score_map, dtype=np.float64)
    if factor == 1:
        return smap
    h, w = smap.shape
    hh, ww = -(-h // factor), -(-w // factor)
    padded = np.zeros((hh * factor, ww * factor))
    padded[:h, :w] = smap
    return padded.reshape(hh, factor, ww, factor).max(axis=(1, 3))


class Stabilizer:
    """Streaming front end: one :meth:`push` per frame, results returned immediately.

    Gaps in frame indices are filled with empty frames so that tracks keep decaying
    through frames without detections.
    """

    def __init__(self, config: TcaConfig, geometry: FrameGeometry):
        self.state = TcaVideoState(config=config, geometry=geometry)

    def push(self, frame: FrameDetections) -> list[TrackOutput]:
        s = self.state
        if s.started and frame.frame_index <= s.frame_index:
            raise FrameOrderError(f"frame {frame.frame_index} arrived after frame {s.frame_index}")
        if s.started:
            for gap in range(s.frame_index + 1, frame.frame_index):
                tca_step(s, FrameDetections(gap, []))
        _, outputs = tca_step(s, frame)
        return outputs

    def run(self, frames: Iterable[FrameDetections]):
        for frame in frames:
            yield frame.frame_index, self.push(frame)
