import json

import numpy as np
import pytest

from oracles import brute_sdf, disc
from ripstab.annotations import (
    INTERPOLATED,
    MANUAL,
    DuplicateFrameError,
    KeyframeAnnotation,
    densify,
    densify_document,
    interpolate_instance,
    load_annotations,
    parse_coco,
    signed_distance,
)
from ripstab.maskcore import BinaryMask, FrameGeometry, Polygon, rasterize, rle_decode

G = FrameGeometry(32, 32)


def dmask(r, cy=16, cx=16):
    return BinaryMask(disc(G.shape, cy, cx, r))


def test_signed_distance_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(5):
        bits = rng.random((12, 14)) < 0.3
        assert np.allclose(signed_distance(BinaryMask(bits)), brute_sdf(bits))


def test_endpoints_exact():
    a, b = dmask(4), dmask(8, 14, 18)
    assert interpolate_instance(a, b, 0.0) == a
    assert interpolate_instance(a, b, 1.0) == b


def test_nested_disc_midpoint_radius():
    a, b = dmask(4), dmask(8)
    mid = interpolate_instance(a, b, 0.5)
    # oracle: blend of brute-force signed distances, thresholded at zero
    want = 0.5 * brute_sdf(a.bits) + 0.5 * brute_sdf(b.bits) <= 0
    assert mid == BinaryMask(want)
    # the midpoint shape sits between discs of radius 5 and 7
    assert not (dmask(5).bits & ~mid.bits).any()
    assert not (mid.bits & ~dmask(7).bits).any()


def test_nested_area_monotone():
    a, b = dmask(3), dmask(11)
    areas = [interpolate_instance(a, b, t).area for t in np.linspace(0, 1, 11)]
    assert areas == sorted(areas)
    assert areas[0] == a.area and areas[-1] == b.area


def test_empty_endpoints():
    e = BinaryMask.empty(G)
    assert interpolate_instance(e, e, 0.5).area == 0
    with pytest.warns(UserWarning):
        fade = [interpolate_instance(dmask(8), e, t).area for t in (0.25, 0.5, 0.75)]
    assert fade[0] >= fade[1] >= fade[2]


def test_interpolate_rejects_bad_t():
    with pytest.raises(ValueError):
        interpolate_instance(dmask(3), dmask(4), 1.5)


def kf(f, instances, g=G):
    return KeyframeAnnotation(f, g, instances)


def square(x0, y0, s):
    return Polygon([(x0, y0), (x0 + s, y0), (x0 + s, y0 + s), (x0, y0 + s)])


def test_densify_schedule_and_provenance():
    a, b = kf(10, [(1, square(4, 4, 8))]), kf(15, [(1, square(10, 10, 12))])
    out = densify([a, b])
    assert [d.frame_index for d in out] == list(range(10, 16))
    assert [d.provenance for d in out] == [MANUAL] + [INTERPOLATED] * 4 + [MANUAL]
    assert out[0].instances[0][1] == rasterize(square(4, 4, 8), G)
    assert out[-1].instances[0][1] == rasterize(square(10, 10, 12), G)
    # t = 0.2, 0.4, 0.6, 0.8 in order
    ma, mb = out[0].masks[0], out[-1].masks[0]
    for d, t in zip(out[1:-1], (0.2, 0.4, 0.6, 0.8)):
        assert d.masks[0] == interpolate_instance(ma, mb, t)


def test_densify_midpoint_rule():
    a = kf(0, [(1, square(2, 2, 6)), (2, square(20, 20, 6))])
    b = kf(4, [(1, square(3, 3, 6)), (3, square(20, 2, 6))])
    out = densify([a, b])
    ids = {d.frame_index: sorted(d.ids()) for d in out}
    assert ids == {0: [1, 2], 1: [1, 2], 2: [1], 3: [1, 3], 4: [1, 3]}
    assert out[1].instances[1][1] == out[0].instances[1][1]


def test_densify_single_keyframe_and_none_policy():
    assert [d.provenance for d in densify([kf(3, [(1, square(1, 1, 4))])])] == [MANUAL]
    out = densify([kf(0, []), kf(9, [])], policy="none")
    assert [d.frame_index for d in out] == [0, 9]


def test_densify_duplicate_frame():
    with pytest.raises(DuplicateFrameError):
        densify([kf(2, []), kf(2, [])])


def test_densify_unknown_policy():
    with pytest.raises(ValueError):
        densify([kf(0, [])], policy="cubic")


def coco_doc():
    return {
        "info": {"note": "kept"},
        "categories": [{"id": 1, "name": "rip"}],
        "images": [
            {"id": 7, "video_id": "beach", "frame_index": 0, "width": 32, "height": 32, "camera": "north"},
            {"id": 8, "video_id": "beach", "frame_index": 4, "width": 32, "height": 32},
        ],
        "annotations": [
            {"id": 1, "image_id": 7, "instance_id": 5, "category_id": 1,
             "segmentation": [[4, 4, 12, 4, 12, 12, 4, 12]], "extra": True},
            {"id": 2, "image_id": 8, "instance_id": 5, "category_id": 1,
             "segmentation": [[8, 8, 20, 8, 20, 20, 8, 20]]},
        ],
    }


def test_densify_document_roundtrip(tmp_path):
    doc = coco_doc()
    aset = parse_coco(doc)
    out = densify_document(aset)
    assert out["info"] == doc["info"] and out["images"][0]["camera"] == "north"
    assert out["annotations"][0]["extra"] is True
    new = [i for i in out["images"] if i.get("provenance") == INTERPOLATED]
    assert sorted(i["frame_index"] for i in new) == [1, 2, 3]
    p = tmp_path / "dense.json"
    p.write_text(json.dumps(out))
    back = load_annotations(p).dense("beach")
    assert sorted(back) == [0, 1, 2, 3, 4]
    assert back[0].provenance == MANUAL and back[2].provenance == INTERPOLATED
    dense = densify(aset.frames["beach"].values())
    for d in dense:
        assert back[d.frame_index].masks == d.masks
    ann = next(a for a in out["annotations"] if a.get("provenance") == INTERPOLATED)
    assert rle_decode(ann["segmentation"]).area == ann["area"]


def test_load_directory_merges(tmp_path):
    doc = coco_doc()
    for k, img in enumerate(doc["images"]):
        part = {"images": [img], "annotations": [a for a in doc["annotations"] if a["image_id"] == img["id"]]}
        (tmp_path / f"f{k}.json").write_text(json.dumps(part))
    aset = load_annotations(tmp_path)
    assert sorted(aset.frames["beach"]) == [0, 4]


def test_parse_errors():
    doc = coco_doc()
    doc["images"][1]["frame_index"] = 0
    with pytest.raises(DuplicateFrameError):
        parse_coco(doc)
    doc = coco_doc()
    doc["annotations"][0]["image_id"] = 99
    with pytest.raises(ValueError):
        parse_coco(doc)
