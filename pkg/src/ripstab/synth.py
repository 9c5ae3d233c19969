"""Deterministic synthetic detection streams with known ground truth.

Ground truth is a set of amorphous blobs (discs whose radius is modulated by a few
low-order harmonics drifting in phase) moving along piecewise-linear paths.
Detections are the same blobs corrupted by drops, boundary jitter, score noise
and short-lived spurious blobs.

All randomness comes from Philox, a counter-based generator, keyed by the scenario
seed, a stream name and the frame index, so any frame can be regenerated on its
own and results do not depend on iteration order. The clean ground truth uses no
randomness at all.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .annotations import INTERPOLATED, MANUAL, DenseAnnotation
from .maskcore import BinaryMask, FrameGeometry
from .records import Detection, FrameDetections

_STREAMS = {"drop": 1, "spurious": 2, "jitter": 3, "score": 4}


def rng_for(seed: int, stream: str, frame: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(_STREAMS[stream], int(frame)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class BlobSpec:
    # keypoints [frame, x, y]; the center is linearly interpolated and held past the ends
    trajectory: list[list[float]]
    base_radius: float = 30.0
    deform_amplitude: float = 0.15
    score: float = 0.9
    start_frame: int = 0
    end_frame: int | None = None  # exclusive

    def center(self, frame: int) -> tuple[float, float]:
        pts = np.asarray(self.trajectory, dtype=np.float64).reshape(-1, 3)
        order = np.argsort(pts[:, 0], kind="stable")
        pts = pts[order]
        return float(np.interp(frame, pts[:, 0], pts[:, 1])), float(np.interp(frame, pts[:, 0], pts[:, 2]))

    def active(self, frame: int) -> bool:
        return frame >= self.start_frame and (self.end_frame is None or frame < self.end_frame)


@dataclass
class NoiseSpec:
    drop_prob: float = 0.0
    drop_bursts: list[list[int]] = field(default_factory=list)  # [start, length]
    spurious_rate: float = 0.0  # mean spurious blobs spawned per frame (Poisson)
    spurious_lifetime: list[int] = field(default_factory=lambda: [1, 1])  # inclusive [min, max] frames
    spurious_radius: list[float] = field(default_factory=lambda: [6.0, 16.0])
    spurious_score: list[float] = field(default_factory=lambda: [0.5, 0.95])
    spurious_avoid_truth: bool = True
    jitter_px: float = 0.0
    score_noise: float = 0.0


@dataclass
class CameraSpec:
    pan: list[float] = field(default_factory=lambda: [0.0, 0.0])  # px/frame, applied to the whole scene


@dataclass
class ScenarioSpec:
    seed: int
    width: int
    height: int
    num_frames: int
    blobs: list[BlobSpec] = field(default_factory=list)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    camera: CameraSpec = field(default_factory=CameraSpec)
    video_id: str = "synth"
    manual_every: int = 1  # flag every k-th ground-truth frame as manual, the rest as interpolated

    @property
    def geometry(self) -> FrameGeometry:
        return FrameGeometry(self.width, self.height)

    @classmethod
    def from_mapping(cls, data: dict) -> "ScenarioSpec":
        data = dict(data)
        data["blobs"] = [BlobSpec(**b) for b in data.get("blobs", [])]
        data["noise"] = NoiseSpec(**data.get("noise", {}))
        data["camera"] = CameraSpec(**data.get("camera", {}))
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioSpec":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            return cls.from_mapping(tomllib.loads(text))
        return cls.from_mapping(json.loads(text))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthStream:
    geometry: FrameGeometry
    detections: list[FrameDetections]
    ground_truth: list[DenseAnnotation]
    # spurious masks injected on each frame, for attributing false positives
    spurious: list[list[BinaryMask]]


def _harmonics(index: int):
    # Fixed per-blob shape parameters: ground truth must not depend on the seed.
    ks = np.array([2.0, 3.0, 5.0])
    phase = (index + 1) * np.array([0.7, 1.9, 2.3])
    drift = np.array([0.031, -0.047, 0.023]) * (1 + 0.1 * index)
    weight = np.array([0.6, 0.3, 0.1])
    return ks, phase, drift, weight


def draw_blob(geometry: FrameGeometry, cx: float, cy: float, radius_fn, max_radius: float) -> np.ndarray:
    """Rasterize a star-shaped region ``rho <= radius_fn(theta)`` by pixel centers."""
    h, w = geometry.shape
    bits = np.zeros((h, w), dtype=bool)
    x0, x1 = max(0, int(math.floor(cx - max_radius - 1))), min(w, int(math.ceil(cx + max_radius + 1)))
    y0, y1 = max(0, int(math.floor(cy - max_radius - 1))), min(h, int(math.ceil(cy + max_radius + 1)))
    if x0 >= x1 or y0 >= y1:
        return bits
    ys = np.arange(y0, y1, dtype=np.float64)[:, None] + 0.5 - cy
    xs = np.arange(x0, x1, dtype=np.float64)[None, :] + 0.5 - cx
    rho = np.hypot(xs, ys)
    theta = np.arctan2(ys, xs)
    bits[y0:y1, x0:x1] = rho <= radius_fn(theta)
    return bits


def _blob_radius_fn(blob: BlobSpec, index: int, frame: int, jitter=None):
    ks, phase, drift, weight = _harmonics(index)
    amp = blob.deform_amplitude * blob.base_radius

    def fn(theta):
        r = np.full(np.shape(theta), blob.base_radius)
        for k, p, d, wt in zip(ks, phase, drift, weight):
            r = r + amp * wt * np.sin(k * theta + p + d * frame)
        if jitter is not None:
            for k, (a, p) in enumerate(jitter, start=1):
                r = r + a * np.sin(k * theta + p)
        return r

    return fn


def _max_radius(blob: BlobSpec, jitter_px: float) -> float:
    return blob.base_radius * (1 + blob.deform_amplitude) + 3 * jitter_px + 2


def truth_masks(spec: ScenarioSpec, frame: int) -> list[tuple[int, np.ndarray]]:
    geom = spec.geometry
    pan_x, pan_y = (float(v) for v in spec.camera.pan)
    out = []
    for i, blob in enumerate(spec.blobs):
        if not blob.active(frame):
            continue
        cx, cy = blob.center(frame)
        cx, cy = cx + pan_x * frame, cy + pan_y * frame
        out.append((i, draw_blob(geom, cx, cy, _blob_radius_fn(blob, i, frame), _max_radius(blob, 0))))
    return out


def _dropped(spec: ScenarioSpec, frame: int, blob_index: int) -> bool:
    for start, length in spec.noise.drop_bursts:
        if start <= frame < start + length:
            return True
    if spec.noise.drop_prob > 0:
        u = rng_for(spec.seed, "drop", frame).random(len(spec.blobs))
        return bool(u[blob_index] < spec.noise.drop_prob)
    return False


def _spawn_spurious(spec: ScenarioSpec, frame: int, truth_union: np.ndarray):
    """Spurious blobs born on ``frame``: list of (mask, score, lifetime)."""
    nz = spec.noise
    if nz.spurious_rate <= 0:
        return []
    rng = rng_for(spec.seed, "spurious", frame)
    count = int(rng.poisson(nz.spurious_rate))
    lo_l, hi_l = (int(v) for v in nz.spurious_lifetime)
    lo_r, hi_r = (float(v) for v in nz.spurious_radius)
    lo_s, hi_s = (float(v) for v in nz.spurious_score)
    geom = spec.geometry
    born = []
    for _ in range(count):
        life = int(rng.integers(lo_l, hi_l + 1))
        score = float(rng.uniform(lo_s, hi_s))
        radius = float(rng.uniform(lo_r, hi_r))
        phases = rng.uniform(0, 2 * np.pi, size=3)
        mask = None
        for _attempt in range(20):
            cx, cy = rng.uniform(0, geom.width), rng.uniform(0, geom.height)
            cand = draw_blob(
                geom, cx, cy,
                lambda th, r=radius, ph=phases: r * (1 + 0.2 * np.sin(2 * th + ph[0]) + 0.1 * np.sin(3 * th + ph[1])),
                radius * 1.3 + 2,
            )
            if not cand.any():
                continue
            if nz.spurious_avoid_truth and (cand & truth_union).any():
                continue
            mask = cand
            break
        if mask is not None:
            born.append((mask, score, life))
    return born


def generate(spec: ScenarioSpec) -> SynthStream:
    """Build the detection stream and its clean ground truth."""
    geom = spec.geometry
    nz = spec.noise
    detections: list[FrameDetections] = []
    truth: list[DenseAnnotation] = []
    spurious: list[list[BinaryMask]] = []
    live: list[tuple[np.ndarray, float, int]] = []  # (mask, score, last frame inclusive)
    clipped = set()

    for f in range(spec.num_frames):
        gt = truth_masks(spec, f)
        for i, bits in gt:
            if not bits.any() and i not in clipped:
                clipped.add(i)
                warnings.warn(f"blob {i} left the frame at frame {f}; clipped", stacklevel=2)
        gt = [(i, b) for i, b in gt if b.any()]
        provenance = MANUAL if f % max(1, spec.manual_every) == 0 else INTERPOLATED
        truth.append(DenseAnnotation(f, [(i, BinaryMask(b)) for i, b in gt], provenance))

        dets = []
        jit_rng = rng_for(spec.seed, "jitter", f)
        score_rng = rng_for(spec.seed, "score", f)
        for i, blob in enumerate(spec.blobs):
            # draw per blob unconditionally so one blob's state never shifts another's noise
            jitter = [(float(a), float(p)) for a, p in zip(
                jit_rng.normal(0, nz.jitter_px, 4) if nz.jitter_px > 0 else np.zeros(4),
                jit_rng.uniform(0, 2 * np.pi, 4))]
            dscore = float(score_rng.normal(0, nz.score_noise)) if nz.score_noise > 0 else 0.0
            if not blob.active(f) or _dropped(spec, f, i):
                continue
            if nz.jitter_px > 0:
                cx, cy = blob.center(f)
                cx += spec.camera.pan[0] * f
                cy += spec.camera.pan[1] * f
                bits = draw_blob(geom, cx, cy, _blob_radius_fn(blob, i, f, jitter), _max_radius(blob, nz.jitter_px))
            else:
                bits = next((b for j, b in gt if j == i), None)
            if bits is None or not bits.any():
                continue
            score = min(1.0, max(0.0, blob.score + dscore))
            dets.append(Detection(BinaryMask(bits), score))

        union = np.zeros(geom.shape, dtype=bool)
        for _, b in gt:
            union |= b
        for mask, score, life in _spawn_spurious(spec, f, union):
            live.append((mask, score, f + life - 1))
        live = [s for s in live if s[2] >= f]
        spurious.append([BinaryMask(m) for m, _, _ in live])
        dets.extend(Detection(BinaryMask(m), s) for m, s, _ in live)
        detections.append(FrameDetections(f, dets))

    return SynthStream(geometry=geom, detections=detections, ground_truth=truth, spurious=spurious)


# --- ready-made scenarios -----------------------------------------------------


def drifting_blob(width=256, height=256, num_frames=200, seed=0, **noise) -> ScenarioSpec:
    """One slowly drifting blob in the middle of the frame."""
    r = min(width, height) * 0.16
    cx, cy = width / 2, height / 2
    blob = BlobSpec(
        trajectory=[[0, cx - 0.1 * width, cy], [num_frames - 1, cx + 0.1 * width, cy + 0.05 * height]],
        base_radius=r,
        deform_amplitude=0.12,
        score=0.9,
    )
    return ScenarioSpec(seed=seed, width=width, height=height, num_frames=num_frames,
                        blobs=[blob], noise=NoiseSpec(**noise))


PRESETS = {
    # false negatives recovered: the detector misses the blob for a few frames
    "drop-burst": lambda seed=0: drifting_blob(seed=seed, drop_bursts=[[100, 3]]),
    # false positives suppressed: short-lived spurious blobs
    "spurious": lambda seed=0: drifting_blob(seed=seed, spurious_rate=0.3, spurious_lifetime=[1, 2]),
    "clean": lambda seed=0: drifting_blob(seed=seed),
}
