"""Mask representations, codecs and pixel-grid primitives.

Binary masks are boolean ``(height, width)`` arrays wrapped in :class:`BinaryMask`;
heatmaps are plain float64 ``(height, width)`` arrays with values in ``[0, 1]``.
Every function here is pure and leaves its inputs untouched.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

# A heatmap is a float grid in [0, 1]; kept as a bare ndarray so the TCA inner
# loop can run numpy ops without unwrapping.
Heatmap = np.ndarray


class GeometryMismatch(ValueError):
    pass


class RleError(ValueError):
    pass


@dataclass(frozen=True)
class FrameGeometry:
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError(f"frame geometry must be at least 1x1, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @classmethod
    def of(cls, array: np.ndarray) -> "FrameGeometry":
        h, w = array.shape
        return cls(width=int(w), height=int(h))


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """One instance's pixel support on a frame grid.

    ``bits`` is a read-only boolean array of shape ``(height, width)``.
    """

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {bits.shape}")
        if bits.dtype != np.bool_:
            bits = bits.astype(bool)
        elif bits.flags.writeable:
            bits = bits.copy()
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @classmethod
    def empty(cls, geometry: FrameGeometry) -> "BinaryMask":
        return cls(np.zeros(geometry.shape, dtype=bool))

    @property
    def geometry(self) -> FrameGeometry:
        return FrameGeometry.of(self.bits)

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __bool__(self) -> bool:
        return bool(self.bits.any())

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.bits.shape, self.bits.tobytes()))

    def __repr__(self) -> str:
        g = self.geometry
        return f"BinaryMask({g.width}x{g.height}, area={self.area})"


@dataclass(frozen=True, eq=False)
class Polygon:
    """Closed ring of sub-pixel ``(x, y)`` vertices, shape ``(n, 2)``."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        if len(v) < 3:
            raise ValueError(f"polygon needs at least 3 vertices, got {len(v)}")
        if np.isnan(v).any():
            raise ValueError("polygon has NaN coordinates")
        v.flags.writeable = False
        object.__setattr__(self, "vertices", v)

    @classmethod
    def from_flat(cls, coords: Sequence[float], geometry: FrameGeometry | None = None) -> "Polygon":
        """Build from ``[x0, y0, x1, y1, ...]``, clamping to the frame when given."""
        if len(coords) % 2:
            raise ValueError("flat polygon coordinate list has odd length")
        v = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        if geometry is not None:
            v = np.column_stack([np.clip(v[:, 0], 0, geometry.width), np.clip(v[:, 1], 0, geometry.height)])
        return cls(v)

    def to_flat(self) -> list[float]:
        return [float(c) for c in self.vertices.ravel()]

    @property
    def area(self) -> float:
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _is_degenerate(polygon: Polygon) -> bool:
    v = polygon.vertices - polygon.vertices.mean(axis=0)
    return np.linalg.matrix_rank(v, tol=1e-12) < 2


def rasterize(polygon: Polygon, geometry: FrameGeometry) -> BinaryMask:
    """Even-odd fill: a pixel is set iff its center ``(x+0.5, y+0.5)`` lies inside the ring."""
    h, w = geometry.shape
    if _is_degenerate(polygon):
        warnings.warn("degenerate polygon (zero area) rasterized to an empty mask", stacklevel=2)
        return BinaryMask.empty(geometry)

    x0, y0 = polygon.vertices[:, 0], polygon.vertices[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    yc = np.arange(h, dtype=np.float64)[:, None] + 0.5
    crosses = (y0[None, :] <= yc) != (y1[None, :] <= yc)
    rows, edges = np.nonzero(crosses)
    dy = y1[edges] - y0[edges]  # nonzero wherever the edge crosses a row center
    xs = x0[edges] + (yc[rows, 0] - y0[edges]) * (x1[edges] - x0[edges]) / dy

    # A crossing at x toggles every pixel whose center lies strictly left of it.
    k = np.clip(np.ceil(xs - 0.5), 0, w).astype(np.intp)
    toggles = np.zeros((h, w + 1), dtype=np.int32)
    np.add.at(toggles, (rows, np.zeros_like(k)), 1)
    np.add.at(toggles, (rows, k), -1)
    inside = (np.cumsum(toggles[:, :w], axis=1) & 1).astype(bool)
    return BinaryMask(inside)


def _check_same(a: BinaryMask, b: BinaryMask) -> None:
    if a.bits.shape != b.bits.shape:
        raise GeometryMismatch(f"mask geometries differ: {a.geometry} vs {b.geometry}")


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union; two empty masks give 0.0, never NaN."""
    _check_same(a, b)
    union = np.count_nonzero(a.bits | b.bits)
    if union == 0:
        return 0.0
    return np.count_nonzero(a.bits & b.bits) / union


def iou_matrix(rows: Sequence[BinaryMask], cols: Sequence[BinaryMask]) -> np.ndarray:
    """Pairwise IoU between two lists of same-geometry masks."""
    out = np.zeros((len(rows), len(cols)), dtype=np.float64)
    if not len(rows) or not len(cols):
        return out
    shape = rows[0].bits.shape
    for m in (*rows, *cols):
        if m.bits.shape != shape:
            raise GeometryMismatch(f"mask geometries differ: {rows[0].geometry} vs {m.geometry}")
    a = np.stack([m.bits.ravel() for m in rows]).astype(np.float32)
    b = np.stack([m.bits.ravel() for m in cols]).astype(np.float32)
    # float32 sums are exact for areas below 2**24 pixels
    inter = (a @ b.T).astype(np.float64)
    union = a.sum(axis=1, dtype=np.float64)[:, None] + b.sum(axis=1, dtype=np.float64)[None, :] - inter
    np.divide(inter, union, out=out, where=union > 0)
    return out


def dilate(mask: BinaryMask, radius: int) -> BinaryMask:
    """Dilation by a (2r+1)x(2r+1) square."""
    if radius < 0:
        raise ValueError("dilation radius must be >= 0")
    if radius == 0:
        return mask
    return BinaryMask(_dilate_bits(mask.bits, radius))


def _dilate_bits(bits: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0 or not bits.any():
        return bits.copy()
    size = 2 * radius + 1
    out = ndimage.maximum_filter1d(bits, size, axis=0, mode="constant", cval=0)
    return ndimage.maximum_filter1d(out, size, axis=1, mode="constant", cval=0)


def downsample_shape(geometry: FrameGeometry, factor: int) -> FrameGeometry:
    return FrameGeometry(width=-(-geometry.width // factor), height=-(-geometry.height // factor))


def _support(bits: np.ndarray) -> tuple[int, int, int, int] | None:
    """Bounding box ``(r0, r1, c0, c1)`` (exclusive ends) of the set pixels, or None."""
    rows = np.flatnonzero(bits.any(axis=1))
    if not rows.size:
        return None
    r0, r1 = int(rows[0]), int(rows[-1]) + 1
    cols = np.flatnonzero(bits[r0:r1].any(axis=0))
    return r0, r1, int(cols[0]), int(cols[-1]) + 1


def _pool(bits: np.ndarray, factor: int, hh: int, ww: int) -> np.ndarray:
    h, w = bits.shape
    if h != hh * factor or w != ww * factor:
        padded = np.zeros((hh * factor, ww * factor), dtype=bool)
        padded[:h, :w] = bits
        bits = padded
    return bits.reshape(hh, factor, ww, factor).any(axis=(1, 3))


def _downsample_bits(bits: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return bits
    h, w = bits.shape
    out = np.zeros((-(-h // factor), -(-w // factor)), dtype=bool)
    box = _support(bits)
    if box is None:
        return out
    # pool only the factor-aligned window around the support
    r0, r1 = box[0] // factor, -(-box[1] // factor)
    c0, c1 = box[2] // factor, -(-box[3] // factor)
    out[r0:r1, c0:c1] = _pool(bits[r0 * factor:r1 * factor, c0 * factor:c1 * factor], factor, r1 - r0, c1 - c0)
    return out


def downsample_mask(mask: BinaryMask, factor: int) -> BinaryMask:
    """Max-pool a mask by ``factor``: an output cell is set iff any covered pixel is set."""
    if factor < 1:
        raise ValueError("downsample factor must be >= 1")
    if factor == 1:
        return mask
    return BinaryMask(_downsample_bits(mask.bits, factor))


def _bilinear_axis(n_in: int, n_out: int, scale: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Pixel-center aligned source coordinate for every output index, clamped at the edges.
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


class BilinearGrid:
    """Precomputed bilinear sampling coordinates from a coarse grid to a fine one.

    Reused across frames; :meth:`sample` can evaluate any rectangular window of the
    fine grid and gives the same values as evaluating the full grid and slicing.
    """

    def __init__(self, src: FrameGeometry, dst: FrameGeometry, factor: int | None = None):
        if dst.width < src.width or dst.height < src.height:
            raise ValueError(f"target {dst} is smaller than source {src}")
        sy = 1.0 / factor if factor else src.height / dst.height
        sx = 1.0 / factor if factor else src.width / dst.width
        self.src, self.dst = src, dst
        self.y0, self.y1, self.fy = _bilinear_axis(src.height, dst.height, sy)
        self.x0, self.x1, self.fx = _bilinear_axis(src.width, dst.width, sx)

    def sample(self, h: np.ndarray, rows: slice = slice(None), cols: slice = slice(None)) -> np.ndarray:
        y0, y1, fy = self.y0[rows], self.y1[rows], self.fy[rows, None]
        x0, x1, fx = self.x0[cols], self.x1[cols], self.fx[cols]
        top, bot = h[y0], h[y1]
        v = top + (bot - top) * fy
        left, right = v[:, x0], v[:, x1]
        out = left + (right - left) * fx
        return np.clip(out, 0.0, 1.0, out=out)


def upsample_heatmap(h: Heatmap, target: FrameGeometry, factor: int | None = None) -> Heatmap:
    """Bilinear upsampling with pixel-center alignment and edge clamping.

    If ``factor`` is given the source grid is taken to be a ``factor``-fold max-pool of
    the target (cell ``i`` centered on fine pixel ``i*factor + (factor-1)/2``).
    """
    src = FrameGeometry.of(h)
    if src == target:
        return np.array(h, dtype=np.float64)
    return BilinearGrid(src, target, factor).sample(np.asarray(h, dtype=np.float64))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D Gaussian truncated at ``ceil(3*sigma)`` and renormalized to unit sum."""
    radius = max(1, math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(h: Heatmap, sigma: float) -> Heatmap:
    """Separable Gaussian blur with replicate-edge padding. ``sigma=0`` is the identity."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    h = np.asarray(h, dtype=np.float64)
    if sigma == 0:
        return h.copy()
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = np.zeros_like(h)
    box = _support(h != 0)
    if box is None:
        return out
    # Output farther than r from the support is exactly 0, and zeros replicated at
    # an interior crop border equal the true zeros beyond it, so the crop is exact.
    rs = slice(max(0, box[0] - r), min(h.shape[0], box[1] + r))
    cs = slice(max(0, box[2] - r), min(h.shape[1], box[3] + r))
    crop = h[rs, cs]
    tmp = ndimage.correlate1d(crop, k, axis=0, mode="nearest")
    tmp = ndimage.correlate1d(tmp, k, axis=1, mode="nearest")
    # rounding can push a value an ulp outside the input range
    out[rs, cs] = np.clip(tmp, h.min(), h.max(), out=tmp)
    return out


# --- RLE ---------------------------------------------------------------------


def rle_encode(mask: BinaryMask | np.ndarray) -> dict:
    """Column-major uncompressed RLE, COCO ``{"size": [h, w], "counts": [...]}``.

    Counts alternate zero-runs and one-runs and always begin with a (possibly empty)
    zero-run.
    """
    bits = mask.bits if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)
    h, w = bits.shape
    flat = bits.ravel(order="F")
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts.insert(0, 0)
    return {"size": [int(h), int(w)], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict, geometry: FrameGeometry | None = None, *, frame=None, instance=None) -> BinaryMask:
    """Inverse of :func:`rle_encode`. Also accepts COCO compressed string counts."""
    where = f" (frame {frame}, instance {instance})" if frame is not None or instance is not None else ""
    try:
        h, w = (int(s) for s in rle["size"])
        counts = rle["counts"]
    except (KeyError, TypeError, ValueError) as exc:
        raise RleError(f"malformed RLE object{where}: {exc}") from None
    if geometry is not None and (h, w) != geometry.shape:
        raise RleError(f"RLE size {w}x{h} does not match frame {geometry.width}x{geometry.height}{where}")
    if isinstance(counts, (str, bytes)):
        counts = rle_counts_from_string(counts)
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size and counts.min() < 0:
        raise RleError(f"negative run length in RLE{where}")
    total = int(counts.sum())
    if total != h * w:
        raise RleError(f"RLE runs sum to {total}, expected {h}*{w}={h * w}{where}")
    values = np.zeros(counts.size, dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return BinaryMask(flat.reshape((w, h)).T)


def rle_counts_to_string(counts: Sequence[int]) -> str:
    """COCO's compact LEB128-style string form of run counts."""
    out = []
    for i, x in enumerate(counts):
        x = int(x)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def rle_counts_from_string(s: str | bytes) -> list[int]:
    if isinstance(s, bytes):
        s = s.decode("ascii")
    counts: list[int] = []
    p = 0
    while p < len(s):
        x = k = 0
        more = True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


# --- PNG ---------------------------------------------------------------------


def write_png(mask: BinaryMask, path: str | Path) -> None:
    from PIL import Image

    Image.fromarray(mask.bits.astype(np.uint8) * 255, mode="L").save(path)


def read_png(path: str | Path) -> BinaryMask:
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return BinaryMask(arr >= 128)
