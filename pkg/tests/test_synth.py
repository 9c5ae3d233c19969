import json

import numpy as np
import pytest

from ripstab.synth import (
    PRESETS,
    BlobSpec,
    NoiseSpec,
    ScenarioSpec,
    drifting_blob,
    generate,
    rng_for,
)


def stream_bytes(s):
    return [[(d.mask.bits.tobytes(), d.score) for d in fr.detections] for fr in s.detections]


def truth_bytes(s):
    return [[m.bits.tobytes() for m in a.masks] for a in s.ground_truth]


def test_clean_static_blob_detections_equal_truth():
    spec = ScenarioSpec(seed=3, width=64, height=48, num_frames=10,
                        blobs=[BlobSpec(trajectory=[[0, 32, 24]], base_radius=10)])
    s = generate(spec)
    for fr, gt in zip(s.detections, s.ground_truth):
        assert [d.mask for d in fr.detections] == gt.masks
        assert len(gt.masks) == 1


def test_deterministic_by_seed():
    spec = drifting_blob(width=96, height=96, num_frames=30, seed=9, spurious_rate=0.5, jitter_px=1.5,
                         score_noise=0.05, drop_prob=0.1)
    a, b = generate(spec), generate(spec)
    assert stream_bytes(a) == stream_bytes(b)


def test_seed_changes_noise_not_truth():
    kw = dict(width=96, height=96, num_frames=30, spurious_rate=0.5, jitter_px=1.5)
    a, b = generate(drifting_blob(seed=1, **kw)), generate(drifting_blob(seed=2, **kw))
    assert truth_bytes(a) == truth_bytes(b)
    assert stream_bytes(a) != stream_bytes(b)


def test_counter_rng_is_order_independent():
    x = rng_for(5, "spurious", 17).random(3)
    rng_for(5, "spurious", 3).random(10)
    assert np.array_equal(rng_for(5, "spurious", 17).random(3), x)
    assert not np.array_equal(rng_for(5, "jitter", 17).random(3), x)


def test_drop_burst():
    s = generate(PRESETS["drop-burst"](seed=0))
    missing = [fr.frame_index for fr in s.detections if not fr.detections]
    assert missing == [100, 101, 102]
    assert all(len(a.masks) == 1 for a in s.ground_truth)


def test_spurious_count():
    s = generate(drifting_blob(seed=0, spurious_rate=0.3, spurious_lifetime=[1, 1]))
    n = sum(len(x) for x in s.spurious)
    assert 40 <= n <= 80


def test_spurious_lifetime_and_avoidance():
    s = generate(drifting_blob(seed=4, spurious_rate=0.3, spurious_lifetime=[2, 2]))
    for fr, gt, sp in zip(s.detections, s.ground_truth, s.spurious):
        truth = np.logical_or.reduce([m.bits for m in gt.masks])
        assert all(not (m.bits & truth).any() for m in sp)
        assert len(fr.detections) == len(gt.masks) + len(sp)
    # every spurious mask lives exactly two consecutive frames
    seen = {}
    for f, sp in enumerate(s.spurious):
        for m in sp:
            seen.setdefault(m.bits.tobytes(), []).append(f)
    assert all(len(v) == 2 and v[1] == v[0] + 1 for v in seen.values())


def test_blob_leaving_frame_warns():
    spec = ScenarioSpec(seed=0, width=40, height=40, num_frames=20,
                        blobs=[BlobSpec(trajectory=[[0, 20, 20], [10, 200, 20]], base_radius=6)])
    with pytest.warns(UserWarning, match="left the frame"):
        s = generate(spec)
    assert s.ground_truth[-1].masks == []


def test_camera_pan_shifts_truth():
    still = ScenarioSpec(seed=0, width=80, height=40, num_frames=5,
                         blobs=[BlobSpec(trajectory=[[0, 20, 20]], base_radius=8)])
    panned = ScenarioSpec.from_mapping({**still.to_dict(), "camera": {"pan": [2.0, 0.0]}})
    a, b = generate(still), generate(panned)
    cols_a = np.nonzero(a.ground_truth[4].masks[0].bits.any(axis=0))[0]
    cols_b = np.nonzero(b.ground_truth[4].masks[0].bits.any(axis=0))[0]
    assert cols_b.min() - cols_a.min() == 8


def test_manual_every_flags_provenance():
    spec = drifting_blob(width=64, height=64, num_frames=7)
    spec.manual_every = 3
    prov = [a.provenance for a in generate(spec).ground_truth]
    assert prov == ["manual", "interpolated", "interpolated", "manual", "interpolated", "interpolated", "manual"]


def test_spec_load_json_and_toml(tmp_path):
    spec = drifting_blob(width=64, height=64, num_frames=5, seed=7, spurious_rate=0.2)
    p = tmp_path / "s.json"
    p.write_text(json.dumps(spec.to_dict()))
    assert ScenarioSpec.load(p) == spec
    t = tmp_path / "s.toml"
    t.write_text(
        'seed = 7\nwidth = 64\nheight = 64\nnum_frames = 5\n'
        '[noise]\nspurious_rate = 0.2\n'
        '[[blobs]]\ntrajectory = [[0, 32, 32]]\nbase_radius = 9.0\n'
    )
    loaded = ScenarioSpec.load(t)
    assert loaded.noise == NoiseSpec(spurious_rate=0.2) and loaded.blobs[0].base_radius == 9.0
