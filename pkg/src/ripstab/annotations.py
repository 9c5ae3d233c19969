"""Ground-truth model and keyframe interpolation.

Manual keyframes are densified by blending signed distance fields of each
instance between consecutive keyframes. Interpolated frames carry
``provenance == "interpolated"`` so that evaluation can skip them.

Annotation files are COCO-style JSON: ``images`` entries carry ``video_id``,
``frame_index``, ``width``, ``height`` and an optional ``provenance`` (missing
means manual); ``annotations`` carry ``image_id``, ``instance_id`` and a polygon
or RLE ``segmentation``. Fields this module does not know about are kept as-is.
"""

from __future__ import annotations

import copy
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable

import numpy as np
from scipy import ndimage

from .maskcore import (
    BinaryMask,
    FrameGeometry,
    GeometryMismatch,
    Polygon,
    rasterize,
    rle_decode,
    rle_encode,
)

MANUAL = "manual"
INTERPOLATED = "interpolated"


class DuplicateFrameError(ValueError):
    pass


@dataclass
class KeyframeAnnotation:
    frame_index: int
    geometry: FrameGeometry
    # (instance id, Polygon | list of Polygon | RLE dict | BinaryMask)
    instances: list[tuple[Hashable, object]] = field(default_factory=list)
    provenance: str = MANUAL

    def rasterize(self) -> "DenseAnnotation":
        return DenseAnnotation(
            self.frame_index,
            [(iid, to_mask(shape, self.geometry)) for iid, shape in self.instances],
            self.provenance,
        )


@dataclass
class DenseAnnotation:
    frame_index: int
    instances: list[tuple[Hashable, BinaryMask]] = field(default_factory=list)
    provenance: str = MANUAL

    @property
    def masks(self) -> list[BinaryMask]:
        return [m for _, m in self.instances]

    def ids(self) -> list[Hashable]:
        return [i for i, _ in self.instances]


def to_mask(shape, geometry: FrameGeometry) -> BinaryMask:
    """Rasterize a polygon (or union of polygons), decode RLE, or pass a mask through."""
    if isinstance(shape, BinaryMask):
        if shape.bits.shape != geometry.shape:
            raise GeometryMismatch(f"mask {shape.geometry} != frame {geometry}")
        return shape
    if isinstance(shape, Polygon):
        return rasterize(shape, geometry)
    if isinstance(shape, dict):
        return rle_decode(shape, geometry)
    if isinstance(shape, (list, tuple)):
        if shape and isinstance(shape[0], (list, tuple, Polygon)):
            parts = [to_mask(p if isinstance(p, Polygon) else Polygon.from_flat(p, geometry), geometry)
                     for p in shape]
            bits = np.zeros(geometry.shape, dtype=bool)
            for p in parts:
                bits |= p.bits
            return BinaryMask(bits)
        return rasterize(Polygon.from_flat(shape, geometry), geometry)
    raise TypeError(f"cannot build a mask from {type(shape).__name__}")


# --- interpolation ------------------------------------------------------------


def signed_distance(mask: BinaryMask) -> np.ndarray:
    """Euclidean signed distance, negative inside and positive outside.

    Inside pixels get minus the distance to the nearest background pixel, outside
    pixels the distance to the nearest foreground pixel. Empty and full masks have
    no boundary and map to the constant ``+/- hypot(height, width)``.
    """
    bits = mask.bits
    far = math.hypot(*bits.shape)
    if not bits.any():
        return np.full(bits.shape, far)
    if bits.all():
        return np.full(bits.shape, -far)
    return ndimage.distance_transform_edt(~bits) - ndimage.distance_transform_edt(bits)


def interpolate_instance(kf_a: BinaryMask, kf_b: BinaryMask, t: float) -> BinaryMask:
    """Shape at fraction ``t`` of the way from ``kf_a`` to ``kf_b``.

    Pixels where the blended signed distance ``(1-t)*d_a + t*d_b`` is <= 0 are set.
    When exactly one side is empty it is treated as lying at the maximal distance
    everywhere, so the other shape erodes (or grows) away across the interval.
    """
    if kf_a.bits.shape != kf_b.bits.shape:
        raise GeometryMismatch(f"keyframe masks differ in geometry: {kf_a.geometry} vs {kf_b.geometry}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    if t == 0.0:
        return kf_a
    if t == 1.0:
        return kf_b
    empty_a, empty_b = not kf_a, not kf_b
    if empty_a and empty_b:
        return kf_a
    if empty_a or empty_b:
        warnings.warn("interpolating against an empty keyframe mask; shape fades out linearly", stacklevel=2)
    blend = (1.0 - t) * signed_distance(kf_a) + t * signed_distance(kf_b)
    return BinaryMask(blend <= 0.0)


POLICIES = ("linear", "none")


def densify(keyframes: Iterable[KeyframeAnnotation | DenseAnnotation], policy: str = "linear") -> list[DenseAnnotation]:
    """Fill the frames between consecutive keyframes of one video.

    Instances sharing an id at both ends are SDF-interpolated at ``t = (f - fa) / (fb - fa)``.
    An id present only at the earlier keyframe persists unchanged while ``t < 0.5``;
    one present only at the later keyframe appears once ``t > 0.5``. ``policy="none"``
    returns the keyframes alone. Keyframes come back rasterized, followed in frame
    order by the interpolated frames between them.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown interpolation policy {policy!r}; choose from {POLICIES}")
    dense = [k.rasterize() if isinstance(k, KeyframeAnnotation) else k for k in keyframes]
    dense.sort(key=lambda d: d.frame_index)
    for prev, nxt in zip(dense, dense[1:]):
        if prev.frame_index == nxt.frame_index:
            raise DuplicateFrameError(f"frame {prev.frame_index} is annotated more than once")
    if policy == "none":
        return dense

    out: list[DenseAnnotation] = []
    for a, b in zip(dense, dense[1:]):
        out.append(a)
        span = b.frame_index - a.frame_index
        a_map, b_map = dict(a.instances), dict(b.instances)
        for f in range(a.frame_index + 1, b.frame_index):
            t = (f - a.frame_index) / span
            inst = []
            for iid, ma in a.instances:
                if iid in b_map:
                    m = interpolate_instance(ma, b_map[iid], t)
                    if m:
                        inst.append((iid, m))
                elif t < 0.5:
                    inst.append((iid, ma))
            if t > 0.5:
                inst.extend((iid, mb) for iid, mb in b.instances if iid not in a_map)
            out.append(DenseAnnotation(f, inst, INTERPOLATED))
    if dense:
        out.append(dense[-1])
    return out


# --- COCO-style files ---------------------------------------------------------


@dataclass
class AnnotationSet:
    """A parsed annotation file. ``doc`` is the original JSON, kept for round-trips."""

    doc: dict
    frames: dict[str, dict[int, KeyframeAnnotation]]

    def dense(self, video_id: str) -> dict[int, DenseAnnotation]:
        return {f: k.rasterize() for f, k in sorted(self.frames.get(video_id, {}).items())}

    def dense_all(self) -> dict[str, dict[int, DenseAnnotation]]:
        return {vid: self.dense(vid) for vid in self.frames}


def _instance_id(ann: dict) -> Hashable:
    for key in ("instance_id", "track_id", "id"):
        if key in ann:
            return ann[key]
    raise ValueError(f"annotation without instance_id or id: {ann}")


def parse_coco(doc: dict, source: str = "<json>") -> AnnotationSet:
    images = doc.get("images", [])
    by_image: dict = {}
    frames: dict[str, dict[int, KeyframeAnnotation]] = {}
    for img in images:
        try:
            vid = str(img.get("video_id", "0"))
            fidx = int(img["frame_index"])
            geom = FrameGeometry(int(img["width"]), int(img["height"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{source}: image record {img.get('id')} lacks frame_index/width/height ({exc})") from None
        video = frames.setdefault(vid, {})
        if fidx in video:
            raise DuplicateFrameError(f"{source}: video {vid!r} frame {fidx} appears in more than one image record")
        kf = KeyframeAnnotation(fidx, geom, [], img.get("provenance", MANUAL))
        video[fidx] = kf
        by_image[img["id"]] = kf
    for ann in doc.get("annotations", []):
        kf = by_image.get(ann.get("image_id"))
        if kf is None:
            raise ValueError(f"{source}: annotation {ann.get('id')} references unknown image {ann.get('image_id')}")
        seg = ann.get("segmentation")
        if isinstance(seg, dict):
            shape = dict(seg)
        elif isinstance(seg, list) and seg:
            shape = [list(p) for p in seg] if isinstance(seg[0], list) else list(seg)
        else:
            raise ValueError(f"{source}: annotation {ann.get('id')} has no usable segmentation")
        kf.instances.append((_instance_id(ann), shape))
    return AnnotationSet(doc=doc, frames=frames)


def load_annotations(path: str | Path) -> AnnotationSet:
    """Load one COCO-style JSON file, or merge every ``*.json`` in a directory."""
    path = Path(path)
    if path.is_dir():
        merged: dict = {"images": [], "annotations": []}
        img_offset = ann_offset = 0
        for p in sorted(path.glob("*.json")):
            doc = json.loads(p.read_text(encoding="utf-8"))
            remap = {}
            for img in doc.get("images", []):
                img = dict(img)
                remap[img["id"]] = img_offset
                img["id"] = img_offset
                img_offset += 1
                merged["images"].append(img)
            for ann in doc.get("annotations", []):
                ann = dict(ann)
                ann["image_id"] = remap.get(ann.get("image_id"), ann.get("image_id"))
                ann["id"] = ann_offset
                ann_offset += 1
                merged["annotations"].append(ann)
            for key, val in doc.items():
                merged.setdefault(key, val)
        return parse_coco(merged, str(path))
    return parse_coco(json.loads(path.read_text(encoding="utf-8")), str(path))


def densify_document(aset: AnnotationSet, policy: str = "linear") -> dict:
    """Return a copy of the document with interpolated images and annotations appended."""
    doc = copy.deepcopy(aset.doc)
    doc.setdefault("images", [])
    doc.setdefault("annotations", [])
    next_img = max((int(i["id"]) for i in doc["images"] if isinstance(i.get("id"), int)), default=-1) + 1
    next_ann = max((int(a["id"]) for a in doc["annotations"] if isinstance(a.get("id"), int)), default=-1) + 1
    category = {}
    for ann in doc["annotations"]:
        category.setdefault(ann.get("instance_id", ann.get("track_id")), ann.get("category_id", 1))

    for vid, kfs in aset.frames.items():
        manual = [k for k in kfs.values() if k.provenance == MANUAL]
        if not manual:
            continue
        geom = manual[0].geometry
        for d in densify(manual, policy):
            if d.provenance != INTERPOLATED:
                continue
            doc["images"].append({
                "id": next_img, "video_id": vid, "frame_index": d.frame_index,
                "width": geom.width, "height": geom.height, "provenance": INTERPOLATED,
            })
            for iid, m in d.instances:
                doc["annotations"].append({
                    "id": next_ann, "image_id": next_img, "instance_id": iid,
                    "category_id": category.get(iid, 1), "segmentation": rle_encode(m),
                    "area": m.area, "iscrowd": 0, "provenance": INTERPOLATED,
                })
                next_ann += 1
            next_img += 1
    return doc
