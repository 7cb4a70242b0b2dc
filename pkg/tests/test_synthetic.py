import numpy as np
import pytest

from fgfa.config import EvalConfig
from fgfa.errors import ConfigError
from fgfa.evaluation import MotionGroupThresholds, motion_iou
from fgfa.flow import compose_flows, warp_bilinear
from fgfa.synthetic import (
    Degradation,
    SceneSpec,
    Sprite,
    degrade,
    gaussian_blur,
    generate,
    load_dataset,
    make_scene,
    motion_blur,
    pair_flow,
    save_dataset,
)


def _disc_scene(velocity, frames=6, size=14.0):
    return SceneSpec(height=48, width=64, num_frames=frames, seed=3,
                     sprites=[Sprite(0, "disc", size, (20.0, 24.0), velocity, texture_seed=5)])


def _interior(spec, t, erode=2):
    s = spec.sprites[0]
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width] + 0.5
    cx, cy = s.center(t)
    return np.hypot(xs - cx, ys - cy) < s.size / 2 - erode


def test_zero_velocity():
    video = generate(_disc_scene((0.0, 0.0)))
    assert all(not f.any() for f in video.flows.values())
    boxes = video.tracks[0].boxes
    assert all(b == boxes[0] for b in boxes)


def test_flow_on_disc_and_reconstruction():
    spec = _disc_scene((3.0, 0.0))
    video = generate(spec)
    for t in range(spec.num_frames - 1):
        fl = video.flows[(t, t + 1)]
        mask = _interior(spec, t, erode=0.5)
        assert np.all(fl[0][mask] == 3.0) and np.all(fl[1][mask] == 0.0)
        far = ~_interior(spec, t, erode=-1.5)
        assert not fl[:, far].any()
        rec = warp_bilinear(video.clean_frames[t + 1], fl)
        m = _interior(spec, t)
        assert np.abs(rec[0][m] - video.clean_frames[t][0][m]).max() < 1e-2


def test_box_displacement_equals_flow():
    spec = _disc_scene((2.0, -1.0))
    video = generate(spec)
    tr = video.tracks[0]
    for t in range(spec.num_frames - 1):
        b0, b1 = tr.boxes[t], tr.boxes[t + 1]
        fl = video.flows[(t, t + 1)]
        m = _interior(spec, t)
        assert b1[0] - b0[0] == fl[0][m][0] and b1[1] - b0[1] == fl[1][m][0]


def test_flow_composition_consistency():
    spec = _disc_scene((1.7, 0.6))
    for t in range(spec.num_frames - 2):
        comp = compose_flows(pair_flow(spec, t, t + 1), pair_flow(spec, t + 1, t + 2))
        direct = pair_flow(spec, t, t + 2)
        m = _interior(spec, t, erode=3)
        np.testing.assert_allclose(comp[:, m], direct[:, m], atol=1e-5)


def test_determinism():
    a, b = generate(make_scene("fast", 4)), generate(make_scene("fast", 4))
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.frames, b.frames))
    assert all(a.flows[k].tobytes() == b.flows[k].tobytes() for k in a.flows)
    assert [t.to_json() for t in a.tracks] == [t.to_json() for t in b.tracks]


def test_degrade_identity_and_constants(rng):
    f = rng.normal(size=(1, 10, 10))
    np.testing.assert_array_equal(degrade(f, Degradation()), f)
    np.testing.assert_array_equal(degrade(f, None), f)
    c = np.full((1, 12, 12), 0.4)
    np.testing.assert_allclose(degrade(c, Degradation(defocus_sigma=2.0, motion_blur_length=5.0, motion_blur_angle=0.3)),
                               c, atol=1e-12)


def test_gaussian_delta_matches_sampled_kernel():
    img = np.zeros((21, 21))
    img[10, 10] = 1.0
    out = gaussian_blur(img, 1.0)
    x = np.arange(-4, 5)
    g = np.exp(-0.5 * x**2)
    g /= g.sum()
    expected = np.zeros((21, 21))
    expected[6:15, 6:15] = np.outer(g, g)
    np.testing.assert_allclose(out, expected, atol=1e-4)


def test_motion_blur_preserves_mass_and_spreads_along_angle():
    img = np.zeros((21, 21))
    img[10, 10] = 1.0
    out = motion_blur(img, 6.0, 0.0)
    assert out.sum() == pytest.approx(1.0)
    assert out[10].sum() == pytest.approx(1.0)  # horizontal line spread only
    assert out[10, 13] > 0 and out[10, 4] == 0


def test_negative_blur_rejected():
    with pytest.raises(ConfigError):
        gaussian_blur(np.zeros((3, 3)), -1.0)
    with pytest.raises(ConfigError):
        degrade(np.zeros((1, 3, 3)), Degradation(defocus_sigma=-0.5))


def test_invalid_specs():
    with pytest.raises(ConfigError):
        generate(SceneSpec(num_frames=0))
    with pytest.raises(ConfigError):
        generate(SceneSpec(height=16, width=16, sprites=[Sprite(0, "disc", 30.0, (8.0, 8.0))]))
    with pytest.raises(ConfigError):
        # leaves the canvas after a couple of frames
        generate(SceneSpec(height=32, width=32, num_frames=10, sprites=[Sprite(0, "square", 6.0, (16.0, 16.0), (20.0, 0))]))
    with pytest.raises(ConfigError):
        SceneSpec.from_json({"height": 8, "colour": "red"})


@pytest.mark.parametrize("group", ["slow", "medium", "fast"])
def test_motion_groups_hit_their_bins(group):
    thr = MotionGroupThresholds(EvalConfig().motion_slow_min, EvalConfig().motion_fast_max, 10)
    for seed in range(4):
        video = generate(make_scene(group, 500 + seed))
        for tr in video.tracks:
            assert {thr.group(motion_iou(tr, t)) for t in tr.frames()} == {group}


def test_dataset_round_trip(tmp_path):
    video = generate(make_scene("medium", 2, num_frames=5))
    root = save_dataset(video, tmp_path / "clip")
    assert sorted(p.name for p in (root / "frames").iterdir()) == [f"{t:04d}.fgt" for t in range(5)]
    assert (root / "flows" / "0003_0004.fgt").exists() and (root / "flows" / "0004_0003.fgt").exists()
    ds = load_dataset(root)
    # frames are stored as float32
    for a, b in zip(video.frames, ds.frames):
        np.testing.assert_array_equal(a.astype(np.float32), b)
    np.testing.assert_array_equal(ds.adjacent_flow(1, 2), video.flows[(1, 2)].astype(np.float32))
    assert [t.to_json() for t in ds.tracks] == [t.to_json() for t in video.tracks]
    with pytest.raises(ConfigError):
        ds.adjacent_flow(0, 2)
