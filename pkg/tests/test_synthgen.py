import numpy as np
import pytest

from diva.flowio import rgb_to_flow
from diva.synthgen import (
    DirectoryAssets,
    GenerationError,
    MotionModel,
    MotionPrior,
    ProceduralAssets,
    build_split,
    centered_grid,
    compose_scene,
    generate_arrays,
    load_sample,
    load_split,
    manifest_bytes,
    materialize,
    render_flow,
    sample_motion,
    save_sample,
    write_split,
)


@pytest.fixture(scope="module")
def assets():
    return ProceduralAssets("train", pool_size=20)


def test_identity_motion_gives_zero_flow():
    flow = render_flow(np.zeros((5, 7), int), [MotionModel(np.eye(2), [0, 0])])
    assert np.all(flow == 0)


def test_pure_translation():
    flow = render_flow(np.zeros((4, 6), int), [MotionModel(np.eye(2), [3, 0])])
    assert np.all(flow[..., 0] == 3) and np.all(flow[..., 1] == 0)


def test_sample_motion_reproducible_and_bounded():
    a = sample_motion(np.random.default_rng(7))
    b = sample_motion(np.random.default_rng(7))
    assert np.array_equal(a.A, b.A) and np.array_equal(a.b, b.b)
    rng = np.random.default_rng(0)
    for _ in range(500):
        m = sample_motion(rng)
        assert np.linalg.norm(m.b) <= 8.0
        assert np.abs(m.A - np.eye(2)).max() <= 0.05


def test_region_wise_flow_exactness(assets):
    rng = np.random.default_rng(1)
    for r in (2, 3, 4):
        s = compose_scene(rng, r, assets, size=(24, 32))
        h, w = s.gt_labels.shape
        for y in range(h):
            for x in range(w):
                m = s.motions[s.gt_labels[y, x]]
                p = np.array([x - (w - 1) / 2, y - (h - 1) / 2])
                expected = (m.A - np.eye(2)) @ p + m.b
                np.testing.assert_allclose(s.flow.vectors[y, x], expected, rtol=0, atol=1e-5)


def test_magnitudes_within_max_norm(assets):
    rng = np.random.default_rng(2)
    for _ in range(50):
        s = compose_scene(rng, int(rng.integers(2, 5)), assets, size=(32, 32))
        assert np.linalg.norm(s.flow.vectors, axis=-1).max() <= s.flow.max_norm


def test_label_count_equals_regions(assets):
    rng = np.random.default_rng(3)
    for _ in range(60):
        r = int(rng.integers(2, 5))
        s = compose_scene(rng, r, assets, size=(32, 32))
        assert sorted(np.unique(s.gt_labels)) == list(range(r))
        assert len(s.instances()) == r - 1


def test_flow_discontinuity_on_boundary_only(assets):
    s = compose_scene(np.random.default_rng(4), 2, assets, size=(32, 32))
    lab, flow = s.gt_labels, s.flow.vectors.astype(np.float64)
    # within a region neighbouring pixels differ by the affine gradient only
    for axis in (0, 1):
        same = np.diff(lab, axis=axis) == 0
        step = np.abs(np.diff(flow, axis=axis)).max(-1)
        assert step[same].max() <= 2 * 0.05 + 1e-5
        assert step[~same].max() > 2 * 0.05


def test_flow_rgb_decodes_to_flow(assets):
    s = compose_scene(np.random.default_rng(5), 3, assets, size=(32, 32))
    back = rgb_to_flow(s.flow_rgb, s.flow.max_norm)
    assert np.linalg.norm(back - s.flow.vectors, axis=-1).max() <= 0.01 * s.flow.max_norm


def test_motion_independence_across_regions(assets):
    # |rho| < 0.1 between regions' parameters over >= 1000 samples
    rng = np.random.default_rng(6)
    params = []
    for _ in range(1000):
        s = compose_scene(rng, 2, assets, size=(32, 32))
        params.append([np.r_[m.A.ravel(), m.b] for m in s.motions])
    params = np.array(params)  # (N, 2, 6)
    rho = np.corrcoef(params[:, 0].T, params[:, 1].T)[:6, 6:]
    assert np.abs(rho).max() < 0.1


def test_shared_motion_negative_control(assets):
    rng = np.random.default_rng(8)
    params = []
    for _ in range(200):
        s = compose_scene(rng, 3, assets, size=(32, 32), shared_motion=(0, 2))
        assert np.array_equal(s.motions[0].A, s.motions[2].A)
        params.append([s.motions[0].b[0], s.motions[2].b[0]])
    params = np.array(params)
    assert np.corrcoef(params.T)[0, 1] == pytest.approx(1.0)


def test_compose_errors(assets):
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        compose_scene(rng, 5, assets)
    empty = ProceduralAssets("x", pool_size=0)
    with pytest.raises(GenerationError):
        compose_scene(rng, 2, empty)
    with pytest.raises(GenerationError):
        compose_scene(rng, 4, assets, size=(32, 32), min_area=0.6, max_tries=3)


def test_manifest_byte_identical():
    a = manifest_bytes(build_split(11, 300, "val"))
    b = manifest_bytes(build_split(11, 300, "val"))
    assert a == b
    assert len(build_split(11, 300, "val")["samples"]) == 300


def test_empty_manifest():
    m = build_split(0, 0)
    assert m["samples"] == []


def test_disjoint_seeds_and_splits():
    a = build_split(1, 200, "train")
    b = build_split(2, 200, "train")
    assert not {s["seed"] for s in a["samples"]} & {s["seed"] for s in b["samples"]}
    assert not {s["id"] for s in a["samples"]} & {s["id"] for s in b["samples"]}
    train, val = ProceduralAssets("train"), ProceduralAssets("val")
    assert not set(train.mask_ids) & set(val.mask_ids)
    assert not set(train.background_ids) & set(val.background_ids)
    assert build_split(1, 3, "val")["asset_pool"] == "val"


def test_materialize_deterministic():
    m = build_split(3, 4, "train", size=(32, 32))
    a = generate_arrays(m)
    b = generate_arrays(m)
    for key in ("image", "flow_rgb", "flow", "labels", "regions"):
        assert np.array_equal(a[key], b[key])
    assert a["max_norm"] == MotionPrior().max_norm((32, 32))


def test_save_load_roundtrip(tmp_path):
    m = build_split(0, 2, "train", size=(32, 40))
    s = materialize(m["samples"][0], m)
    save_sample(tmp_path, s, "s0")
    back = load_sample(tmp_path, "s0")
    assert back.flow.vectors.tobytes() == s.flow.vectors.tobytes()
    assert np.array_equal(back.gt_labels, s.gt_labels)
    assert np.abs(back.image - s.image).max() <= 0.5 / 255 + 1e-6
    assert back.region_count == s.region_count
    np.testing.assert_array_equal(back.motions[0].A, s.motions[0].A)


def test_write_and_load_split(tmp_path):
    m = build_split(0, 3, "val", size=(32, 32))
    write_split(tmp_path / "val", m)
    arrays = load_split(tmp_path / "val")
    ref = generate_arrays(m)
    assert arrays["ids"] == [r["id"] for r in m["samples"]]
    assert np.array_equal(arrays["labels"], ref["labels"])
    assert np.array_equal(arrays["flow"], ref["flow"])


def test_directory_assets(tmp_path):
    from PIL import Image

    (tmp_path / "masks").mkdir()
    (tmp_path / "bgs").mkdir()
    mask = np.zeros((20, 20), np.uint8)
    mask[5:15, 4:16] = 255
    Image.fromarray(mask).save(tmp_path / "masks" / "m.png")
    bg = (np.random.default_rng(0).uniform(size=(30, 30, 3)) * 255).astype(np.uint8)
    Image.fromarray(bg).save(tmp_path / "bgs" / "b.png")
    lib = DirectoryAssets(tmp_path / "masks", tmp_path / "bgs")
    s = compose_scene(np.random.default_rng(0), 2, lib, size=(32, 32))
    assert s.image.shape == (32, 32, 3) and set(np.unique(s.gt_labels)) == {0, 1}


def test_centered_grid():
    g = centered_grid((3, 5))
    assert g[1, 2].tolist() == [0.0, 0.0]
    assert g[0, 0].tolist() == [-2.0, -1.0]
