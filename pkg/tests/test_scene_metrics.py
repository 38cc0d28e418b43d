import hashlib
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from adaptrecon.mesh import TriangleMesh, icosphere
from adaptrecon.metrics import (PSNR_CAP, MetricsReport, chamfer_hausdorff, compute_metrics, image_metrics, mse,
                                psnr, sample_surface, ssim)
from adaptrecon.scene import (CaptureSet, Truth, bumpy_sphere, gen_synthetic, heldout_cameras, load_capture,
                              load_truth, truth_texture, view_cameras)


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def small_truth():
    return Truth(bumpy_sphere(subdivisions=3, seed=1), truth_texture(seed=1))


# ---------------------------------------------------------------- image metrics

def test_identical_images_hit_caps():
    img = np.random.default_rng(0).random((24, 24, 3))
    assert mse(img, img) == 0.0
    assert psnr(img, img) == PSNR_CAP
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_psnr_formula():
    a = np.zeros((8, 8))
    b = np.full((8, 8), 0.1)
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / 0.01), abs=1e-12)
    assert psnr(a, b, peak=2.0) == pytest.approx(10 * math.log10(4 / 0.01), abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), noise=st.floats(0.01, 0.5), channels=st.sampled_from([1, 3]))
def test_ssim_matches_skimage(seed, noise, channels):
    rng = np.random.default_rng(seed)
    a = rng.random((40, 36, channels))
    b = np.clip(a + noise * rng.normal(size=a.shape), 0, 1)
    ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, channel_axis=-1)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_decreases_with_noise():
    rng = np.random.default_rng(3)
    a = rng.random((32, 32))
    vals = [ssim(a, np.clip(a + s * rng.normal(size=a.shape), 0, 1)) for s in (0.01, 0.05, 0.2)]
    assert vals[0] > vals[1] > vals[2]


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))


def test_image_metrics_clip_and_report(tmp_path):
    a = [np.full((16, 16, 3), 1.5)]
    b = [np.ones((16, 16, 3))]
    rep = image_metrics(a, b)
    assert rep.psnr == [PSNR_CAP] and rep.mse == [0.0]
    rep.save(tmp_path / "m.json")
    d = json.loads((tmp_path / "m.json").read_text())
    assert d["mean_psnr"] == PSNR_CAP and d["chamfer"] is None


# ---------------------------------------------------------------- surface metrics

def test_identical_meshes_have_zero_distance():
    m = icosphere(3)
    assert chamfer_hausdorff(m, m, 20_000) == (0.0, 0.0)


@pytest.mark.parametrize("delta", [0.002, 0.01, 0.03])
def test_concentric_spheres_chamfer_equals_offset(delta):
    a = icosphere(5, 1.0)
    b = icosphere(5, 1.0 + delta)
    cd, hd = chamfer_hausdorff(a, b, 50_000)
    # radial offset between the two faceted surfaces is delta times the sample radius (>= 0.998)
    assert cd == pytest.approx(delta, rel=0.03)
    assert delta * 0.99 <= hd <= delta * 1.1


def test_surface_samples_are_on_the_surface_and_area_uniform():
    m = icosphere(2)
    p = sample_surface(m, 40_000, np.random.default_rng(0))
    r = np.linalg.norm(p, axis=1)
    assert r.max() <= 1 + 1e-12 and r.min() > 0.95
    # octant populations are balanced for a symmetric surface
    counts = np.bincount(((p > 0) * [1, 2, 4]).sum(1), minlength=8)
    assert counts.min() / counts.max() > 0.9


def test_sampling_rejects_degenerate_mesh():
    m = TriangleMesh(np.zeros((3, 3)), [[0, 1, 2]])
    with pytest.raises(ValueError):
        sample_surface(m, 10, np.random.default_rng(0))


# ---------------------------------------------------------------- scenes

def test_bumpy_sphere_is_a_closed_genus0_surface():
    m = bumpy_sphere(subdivisions=3)
    assert m.euler_characteristic() == 2
    r = np.linalg.norm(m.vertices, axis=1)
    assert 0.6 < r.min() < 0.8 < r.max() < 1.0


def test_truth_texture_layout():
    tex = truth_texture()
    assert tex.shape == (248, 248, 10)
    assert np.allclose(tex[..., 7:], [0, 0, 1])
    assert tex[..., :3].min() >= 0.25 - 1e-12 and tex[..., :3].max() <= 0.8 + 1e-12


def test_gen_is_deterministic_and_masks_nonempty(tmp_path, small_truth):
    a = gen_synthetic(tmp_path / "a", n_views=6, resolution=48, seed=4, truth=small_truth)
    gen_synthetic(tmp_path / "b", n_views=6, resolution=48, seed=4, truth=small_truth)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    assert all(m.sum() > 0 for m in a.masks)


def test_bundle_round_trip(tmp_path, small_truth):
    cap = gen_synthetic(tmp_path, n_views=4, resolution=32, seed=2, truth=small_truth)
    back = load_capture(tmp_path)
    assert len(back) == 4
    for x, y in zip(cap.images, back.images):
        assert np.abs(x - y).max() < 1e-6  # float32 EXR
    for x, y in zip(cap.masks, back.masks):
        assert np.array_equal(np.asarray(x) > 0.5, y)
    for c, d in zip(cap.cameras, back.cameras):
        assert np.allclose(c.world_to_camera, d.world_to_camera) and c.light_intensity == d.light_intensity
    truth = load_truth(tmp_path)
    assert np.allclose(truth.mesh.vertices, small_truth.mesh.vertices, atol=1e-8)
    assert np.abs(truth.texture - small_truth.texture).max() < 1e-6


def test_missing_view_is_reported(tmp_path, small_truth):
    gen_synthetic(tmp_path, n_views=3, resolution=24, seed=0, truth=small_truth)
    (tmp_path / "masks" / "001.png").unlink()
    with pytest.raises(FileNotFoundError):
        load_capture(tmp_path)
    assert load_truth(tmp_path / "nowhere") is None


def test_capture_counts_must_agree():
    with pytest.raises(ValueError):
        CaptureSet([np.zeros((2, 2, 3))], [], [])


def test_heldout_views_differ_from_training():
    train = view_cameras(20, 32, seed=0)
    test = heldout_cameras(10, 32, seed=0)
    dist = min(np.linalg.norm(a.center - b.center) for a in train for b in test)
    assert dist > 1e-3
    for c in train + test:
        assert np.linalg.norm(c.center) == pytest.approx(3.2)


def test_compute_metrics_truth_and_fallback(small_truth):
    cams = view_cameras(3, 32, seed=0)
    rep = compute_metrics(small_truth.mesh, small_truth.texture, cams, truth=small_truth, n_samples=5_000)
    assert rep.chamfer == 0.0 and rep.hausdorff == 0.0
    assert rep.psnr == [PSNR_CAP] * 3 and rep.n_vertices == small_truth.mesh.n_vertices
    from adaptrecon.scene import render_views
    refs, _ = render_views(small_truth.mesh, small_truth.texture, cams)
    rep2 = compute_metrics(small_truth.mesh, small_truth.texture, cams, references=refs)
    assert rep2.chamfer is None and rep2.mean_psnr == PSNR_CAP
    with pytest.raises(ValueError):
        compute_metrics(small_truth.mesh, small_truth.texture, cams)
    assert isinstance(rep, MetricsReport)
