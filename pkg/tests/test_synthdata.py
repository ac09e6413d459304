import numpy as np
import pytest

from robust_mtl import synthdata as S
from robust_mtl.geometry import Pose, pixel_grid, reproject_grid, warp_frame
from robust_mtl.losses import photometric_loss
from robust_mtl.tensor import Tensor

TINY = S.SceneSpec(seed=5, width=48, height=32, supersample=1)


@pytest.fixture(scope="module")
def tiny():
    return S.generate(TINY, 6, (0.5, 0.2, 0.2))


def gt_photometric(ds, depth_scale=1.0):
    """Per-pixel-minimum photometric loss of the centre frames warped with ground truth."""
    x = np.stack([t.frames for t in ds.triplets]).astype(np.float64) / 255.0
    depth = Tensor(np.stack([t.depths[1] for t in ds.triplets]).astype(np.float64)[:, None] * depth_scale)
    k = ds.triplets[0].intrinsics
    warps = []
    for src in (0, 2):
        poses = np.stack([t.poses[src] for t in ds.triplets])
        warps.append(warp_frame(Tensor(x[:, src]), depth, Pose.from_arrays(poses[:, :3], poses[:, 3:]), k))
    return photometric_loss(Tensor(x[:, 1]), warps).item()


def test_shapes_types_and_ranges(tiny):
    t = tiny.triplets[0]
    assert t.frames.shape == (3, 3, 32, 48) and t.frames.dtype == np.uint8
    assert t.labels.shape == (3, 32, 48) and t.labels.max() < TINY.num_classes
    assert t.depths.dtype == np.float32
    for trip in tiny.triplets:
        assert trip.depths.min() >= S.DEPTH_RANGE[0] and trip.depths.max() <= S.DEPTH_RANGE[1]
        np.testing.assert_array_equal(trip.poses[1], 0.0)


def test_generation_is_deterministic(tiny, tmp_path):
    again = S.generate(TINY, 6, (0.5, 0.2, 0.2))
    for a, b in zip(tiny.triplets, again.triplets):
        assert a.frames.tobytes() == b.frames.tobytes()
        assert a.depths.tobytes() == b.depths.tobytes()
    S.write_dataset(tiny, tmp_path / "a")
    S.write_dataset(again, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*.*")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_parallel_generation_matches_serial(tiny):
    par = S.generate(TINY, 6, (0.5, 0.2, 0.2), jobs=2)
    assert all(a.frames.tobytes() == b.frames.tobytes() for a, b in zip(tiny.triplets, par.triplets))


def test_static_camera_gives_identical_frames():
    t = S.generate(S.SceneSpec(seed=1, width=32, height=16, supersample=1, static=True), 1).triplets[0]
    np.testing.assert_array_equal(t.frames[0], t.frames[1])
    np.testing.assert_array_equal(t.frames[2], t.frames[1])
    np.testing.assert_allclose(t.poses, 0.0, atol=1e-12)


def test_labels_agree_with_depth(tiny):
    for t in tiny.triplets:
        lab, dep = t.labels[1], t.depths[1]
        sky = lab == S.SKY
        assert sky.any() and (lab == S.GROUND).any()
        # sky sits on the far wall, everything else is nearer
        assert dep[sky].min() > dep[~sky].max() or dep[sky].min() >= 0.9 * TINY.sky_distance
        # ground depth grows toward the horizon along each column
        for col in range(0, 48, 8):
            rows = np.flatnonzero(lab[:, col] == S.GROUND)
            if len(rows) > 3:
                d = dep[rows, col]
                assert np.all(np.diff(d[::-1]) >= -1e-4)


def test_round_trip(tiny, tmp_path):
    S.write_dataset(tiny, tmp_path)
    back = S.read_dataset(tmp_path)
    assert len(back) == len(tiny)
    for a, b in zip(tiny.triplets, back.triplets):
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.depths, b.depths)
        np.testing.assert_array_equal(a.poses, b.poses)
        assert a.intrinsics == b.intrinsics and a.split == b.split
    lines = (tmp_path / "index.csv").read_text().splitlines()
    assert lines[0] == ",".join(S.INDEX_FIELDS)
    assert len(lines) == 1 + 3 * len(tiny)


@pytest.mark.parametrize("n,want", [(10, (8, 1, 1)), (200, (160, 20, 20)), (12, (10, 1, 1)), (3, (3, 0, 0))])
def test_split_counts_floor_rule(n, want):
    got = S.split_counts(n)
    assert (got["train"], got["val"], got["test"]) == want


def test_splits_assigned_in_order(tiny):
    assert [t.split for t in tiny.triplets] == ["train"] * 4 + ["val"] + ["test"]
    x, y = tiny.arrays("val")
    assert x.shape == (1, 3, 32, 48) and x.dtype == np.float64 and y.shape == (1, 32, 48)


def test_ground_truth_warp_is_consistent():
    ds = S.generate(S.SceneSpec(seed=0), 4)
    good = gt_photometric(ds)
    assert good < 0.02
    assert gt_photometric(ds, 1.5) >= 2 * good


def test_pnm_round_trip_and_comments(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (3, 4, 5)).astype(np.uint8)
    S.write_ppm(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes()[:11] == b"P6\n5 4\n255\n"
    np.testing.assert_array_equal(S.read_ppm(tmp_path / "a.ppm"), img)
    lab = np.arange(6, dtype=np.uint8).reshape(2, 3)
    (tmp_path / "c.pgm").write_bytes(b"P5 # labels\n3 2\n# max\n255\n" + lab.tobytes())
    np.testing.assert_array_equal(S.read_pgm(tmp_path / "c.pgm"), lab)


@pytest.mark.parametrize("raw,pattern", [
    (b"P3\n2 2\n255\n" + b"\0" * 12, "magic at offset 0"),
    (b"P6\n2 x\n255\n" + b"\0" * 12, "non-integer"),
    (b"P6\n2 2\n65535\n" + b"\0" * 24, "maxval"),
    (b"P6\n2 2\n255\n" + b"\0" * 5, "payload bytes at offset 11"),
])
def test_malformed_ppm(tmp_path, raw, pattern):
    path = tmp_path / "bad.ppm"
    path.write_bytes(raw)
    with pytest.raises(S.DataFormatError, match=pattern) as err:
        S.read_ppm(path)
    assert "bad.ppm" in str(err.value)


def test_dmap_round_trip_and_errors(tmp_path):
    d = np.array([[0.5, 1.25], [80.0, 3.0]], dtype=np.float32)
    S.write_dmap(tmp_path / "d.dmap", d)
    assert (tmp_path / "d.dmap").read_bytes()[:9] == b"DMAP 2 2\n"
    np.testing.assert_array_equal(S.read_dmap(tmp_path / "d.dmap"), d)
    (tmp_path / "e.dmap").write_bytes(b"DMAP 2 2\n" + b"\0" * 3)
    with pytest.raises(S.DataFormatError, match="offset 9"):
        S.read_dmap(tmp_path / "e.dmap")


def test_index_missing_neighbour(tiny, tmp_path):
    S.write_dataset(tiny, tmp_path)
    index = tmp_path / "index.csv"
    lines = index.read_text().splitlines()
    index.write_text("\n".join(lines[:1] + lines[2:]) + "\n")  # drop triplet 0, offset -1
    with pytest.raises(S.DataFormatError, match="triplet 0"):
        S.read_dataset(tmp_path)
    with pytest.raises(FileNotFoundError):
        S.read_dataset(tmp_path / "nowhere")


def test_fronto_parallel_plane_under_forward_motion():
    # a wall filling the view at depth d; the second camera moves delta toward it
    spec = S.SceneSpec(width=64, height=48, supersample=1)
    d, delta = 10.0, 1.0
    wall = S._Box(np.array([0.0, -20.0, d + 5.0]), np.array([30.0, 20.0, 5.0]), 0.0,
                  np.array([0.7, 0.5, 0.3]), 0.3)
    scene = S._Scene([wall], [], np.zeros(4), np.zeros(2), spec.sky_distance, spec.texture_frequency)
    eye = np.array([0.0, -10.0, 0.0])  # high enough that the ground stays hidden
    target, labels, depth = S.render_view(scene, np.eye(3), eye, spec)
    source, _, _ = S.render_view(scene, np.eye(3), eye + [0, 0, delta], spec)
    assert np.all(labels == S.BOX)
    np.testing.assert_allclose(depth, d, rtol=1e-6)

    K = spec.intrinsics()
    dep = Tensor(depth.astype(np.float64)[None, None])
    pose = Pose.from_arrays([0, 0, 0], [0, 0, -delta])
    grid = reproject_grid(dep, pose, K).data[0]
    centre = np.array([K.cx, K.cy])
    np.testing.assert_allclose(grid - centre, (pixel_grid(48, 64) - centre) * d / (d - delta), atol=1e-9)

    warped = warp_frame(Tensor(source[None] / 255.0), dep, pose, K).data[0]
    inner = (slice(None), slice(8, -8), slice(8, -8))  # pixels whose source point stays in view
    err = np.abs(warped[inner] - target[inner] / 255.0).mean()
    assert err < 0.02, err
    wrong = warp_frame(Tensor(source[None] / 255.0), dep * 2.0, pose, K).data[0]
    assert np.abs(wrong[inner] - target[inner] / 255.0).mean() > 3 * err
