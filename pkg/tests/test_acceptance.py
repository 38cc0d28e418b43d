"""Acceptance suite: one recorded pass/fail line per criterion.

The end-to-end and ablation criteria share cached reconstruction runs, so the
module takes about an hour on a single CPU core. ``-m 'not slow'`` skips them.
"""
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from adaptrecon.atlas import DEFAULT_MATERIAL, NORMAL, scharr_gradient, scharr_kernels, stitch_atlas, \
    stitched_size, texture_curvature, tile_weights
from adaptrecon.mesh import TriangleMesh, build_laplacian, check_manifold, icosphere, spherical_uvs
from adaptrecon.metrics import chamfer_hausdorff, compute_metrics
from adaptrecon.objectives import (control_damping, e_min_at, effective_mask, image_loss, lambda_min_at,
                                   loss_damping, normal_loss)
from adaptrecon.pipeline import ReconstructionConfig, Reconstructor, split_curvature_correlation
from adaptrecon.raster import rasterize
from adaptrecon.remesh import EdgeIndicatorField, remesh_step
from adaptrecon.scene import gen_synthetic, heldout_cameras, load_capture, load_truth
from adaptrecon.solver import LambdaField, SmoothingOperator, SolverConfig, bicgstab_solve, preconditioned_step

sys.path.insert(0, str(Path(__file__).parent))
from _oracles import GradientScene, analytic_vertex_grad, central_difference, relative_error  # noqa: E402

SEEDS = (0, 1, 2)
ARMS = ("full", "no_remesh", "no_remesh_uniform_lambda")


# ---------------------------------------------------------------- gradients

def _texel_errors(s, rng, n_pick=12, h=1e-5):
    def losses(tex):
        b = rasterize(s.mesh, tex, s.camera, visibility=s.vis)
        return image_loss(b.image, b.image_geo, s.target, s.m), normal_loss(b.normal_delta, b.normals_geo, s.m)

    base = s.texture.detach().clone()
    errs = []
    for k in range(2):
        tex = base.clone().requires_grad_(True)
        (g,) = torch.autograd.grad(losses(tex)[k], tex)
        g = g.numpy()
        active = np.argwhere(np.abs(g) > 0)
        pick = active[rng.choice(len(active), size=min(n_pick, len(active)), replace=False)]
        fd = np.empty(len(pick))
        for i, idx in enumerate(map(tuple, pick)):
            p, m = base.clone(), base.clone()
            p[idx] += h
            m[idx] -= h
            fd[i] = (float(losses(p)[k]) - float(losses(m)[k])) / (2 * h)
        errs.append(relative_error(g[tuple(pick.T)], fd))
    return errs


def test_gradient_correctness(criterion):
    t0 = time.perf_counter()
    worst_v, worst_t = 0.0, 0.0
    for seed in range(10):
        s = GradientScene(1000 + seed)
        assert s.mesh.n_vertices == 42 and s.camera.width == 32
        V0 = s.mesh.vertices.copy()
        for f_an, f_fd in ((s.img_loss, s.img_loss), (s.normal_loss_analytic, s.normal_loss_frozen)):
            ga = analytic_vertex_grad(f_an, V0)
            gf = central_difference(lambda V: f_fd(torch.as_tensor(V)), V0, 1e-4)
            worst_v = max(worst_v, relative_error(ga, gf))
        worst_t = max(worst_t, *_texel_errors(s, np.random.default_rng(seed)))
    elapsed = time.perf_counter() - t0
    ok = worst_v <= 1e-3 and worst_t <= 1e-4 and elapsed < 120
    criterion("gradient correctness", ok,
              f"worst vertex rel err {worst_v:.2e} (<=1e-3), worst texel rel err {worst_t:.2e} (<=1e-4), "
              f"{elapsed:.1f}s (<120s)")
    assert ok


# ---------------------------------------------------------------- solver

def torus(n_major=25, n_minor=20, R=1.0, r=0.35):
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    a, b = 2 * np.pi * i / n_major, 2 * np.pi * j / n_minor
    V = np.stack([(R + r * np.cos(b)) * np.cos(a), (R + r * np.cos(b)) * np.sin(a), r * np.sin(b)], -1).reshape(-1, 3)
    idx = lambda p, q: (p % n_major) * n_minor + (q % n_minor)  # noqa: E731
    F = []
    for p in range(n_major):
        for q in range(n_minor):
            F += [[idx(p, q), idx(p + 1, q), idx(p + 1, q + 1)], [idx(p, q), idx(p + 1, q + 1), idx(p, q + 1)]]
    return TriangleMesh(V, np.array(F))


def test_solver(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for k in range(30):
        m = icosphere(k % 3)  # 12, 42 and 162 vertices
        A = SmoothingOperator(build_laplacian(m), rng.uniform(16, 64, m.n_vertices))
        b = rng.normal(size=(m.n_vertices, 3))
        worst = max(worst, np.abs(bicgstab_solve(A, b) - np.linalg.solve(A.to_dense(), b)).max())
    big = torus()
    assert big.n_vertices == 500
    A = SmoothingOperator(build_laplacian(big), rng.uniform(16, 64, big.n_vertices))
    b = rng.normal(size=big.n_vertices)
    rel_res = np.linalg.norm(A @ bicgstab_solve(A, b) - b) / np.linalg.norm(b)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and rel_res <= 1e-8 and elapsed < 30
    criterion("solver", ok, f"max |x - x_dense| {worst:.1e} (<=1e-6) over 30 systems n<=162, "
                            f"500-vertex relative residual {rel_res:.1e} (<=1e-8), {elapsed:.1f}s (<30s)")
    assert ok


def test_preconditioning_reduction(criterion):
    rng = np.random.default_rng(11)
    cfg = SolverConfig(tol=1e-8, step_size=1.0)
    worst = 0.0
    for sub, lam in ((1, 16.0), (2, 37.0), (2, 64.0), (3, 50.0)):
        m = icosphere(sub)
        L = build_laplacian(m)
        g = rng.normal(size=m.vertices.shape)
        out = preconditioned_step(m, g, LambdaField.constant(m.n_vertices, lam), L, cfg)
        A = np.eye(m.n_vertices) + lam * L.toarray()
        d = np.linalg.solve(A @ A, g)
        worst = max(worst, np.abs(out - (m.vertices - cfg.step_size * d)).max() / np.abs(d).max())
    ok = worst <= 10 * cfg.tol
    criterion("preconditioning reduction", ok, f"max deviation from uniform update {worst:.1e} (<=1e-7, relative)")
    assert ok


# ---------------------------------------------------------------- schedules and stop-gradients

def test_schedules(criterion):
    t = np.linspace(0, 1, 1002)[1:-1]
    checks = {
        "s_loss(0.2)=0.5": loss_damping(0.2) == 0.5,
        "s_control(0.3)=0.5": control_damping(0.3) == 0.5,
        "s_control<s_loss": bool(np.all(control_damping(t) < loss_damping(t))),
        "lambda_min nonincreasing": bool(np.all(np.diff(lambda_min_at(t)) <= 0)),
        "e_min nonincreasing": bool(np.all(np.diff(e_min_at(t)) <= 0)),
        "floors": bool(np.all(lambda_min_at(t) >= 16) and np.all(e_min_at(t) >= 0.01875)
                       and lambda_min_at(1.0) == 16 and e_min_at(1.0) == 0.01875),
    }
    ok = all(checks.values())
    criterion("schedules", ok, ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok


def test_stop_gradient_identities(criterion):
    worst = 0.0
    for seed in range(5):
        s = GradientScene(2000 + seed)
        b = s.render(torch.as_tensor(s.mesh.vertices))
        val = normal_loss(b.normal_delta, b.normals_geo, s.m, reduction="sum")
        worst = max(worst, abs(float(val) - float((s.m[..., None] * b.normal_delta).abs().sum())))
    s = GradientScene(2100)
    cov = s.render(torch.as_tensor(s.mesh.vertices)).coverage.detach().requires_grad_(True)
    M = (cov.detach() > 0.5).double()
    m = effective_mask(M, cov)
    b = s.render(torch.as_tensor(s.mesh.vertices))
    loss = image_loss(b.image, b.image_geo, s.target, m) + normal_loss(b.normal_delta, b.normals_geo, m)
    (g,) = torch.autograd.grad(loss + 0 * cov.sum(), cov)
    ok = worst <= 1e-9 and not m.requires_grad and float(g.abs().max()) == 0.0
    criterion("stop-gradient identities", ok,
              f"max |L_normal - ||m N_delta||_1| {worst:.1e} (<=1e-9), adjoint into coverage through m "
              f"{float(g.abs().max()):.1e} (=0)")
    assert ok


# ---------------------------------------------------------------- remeshing and atlas

def _random_closed_mesh(rng):
    m = icosphere(int(rng.integers(1, 3)), 0.8)
    V = m.vertices * rng.uniform(0.8, 1.2, size=3) + rng.normal(scale=0.01, size=m.vertices.shape)
    return TriangleMesh(V, m.faces, spherical_uvs(V))


def test_remeshing(criterion):
    rng = np.random.default_rng(99)
    failures = []
    for seq in range(100):
        m = _random_closed_mesh(rng)
        chi, n_prev = m.euler_characteristic(), m.n_vertices
        for _ in range(int(rng.integers(1, 4))):
            m, rep = remesh_step(m, EdgeIndicatorField(rng.uniform(0.1, 0.5, m.n_vertices)))
            try:
                check_manifold(m, vertex_fans=True)
            except ValueError:
                failures.append((seq, "manifold"))
            if m.euler_characteristic() != chi:
                failures.append((seq, "euler"))
            if m.n_vertices < n_prev:
                failures.append((seq, "vertex count"))
            if m.uvs.min() < 0 or m.uvs.max() > 1:
                failures.append((seq, "uv range"))
            if not (rep.flip.converged and rep.flip.passes <= 10):
                failures.append((seq, "flip passes"))
            n_prev = m.n_vertices
    ok = not failures
    criterion("remeshing", ok, f"100 random split/flip sequences, {len(failures)} violations {failures[:3]}")
    assert ok


def _weight_sum(grid, tile=128, overlap=8):
    step = tile - overlap
    out = np.zeros((stitched_size(grid[0], tile, overlap), stitched_size(grid[1], tile, overlap)))
    w = tile_weights(grid, tile, overlap)
    for r in range(grid[0]):
        for c in range(grid[1]):
            out[r * step:r * step + tile, c * step:c * step + tile] += w[r, c]
    return out


def test_atlas(criterion):
    pou = max(np.abs(_weight_sum(g) - 1).max() for g in ((1, 1), (2, 3), (3, 3), (4, 4)))
    c = torch.as_tensor(DEFAULT_MATERIAL)
    tex = stitch_atlas(c.expand(3, 3, 128, 128, 10).clone())
    const = float((tex - c).abs().max())
    flat = c.expand(32, 32, 10).clone()
    flat[..., NORMAL] = torch.tensor([0.3, -0.2, 0.9], dtype=torch.float64) / np.sqrt(0.94)
    curv0 = float(np.abs(texture_curvature(flat, np.random.default_rng(0).random((200, 2)))).max())
    n = np.zeros((16, 16, 3))
    n[..., 2] = 1.0
    n[:, 8:, 0] = 0.6
    k_u, k_v = scharr_kernels()
    k = 0.5 * (k_u + k_v)
    padded = np.pad(np.pad(n[..., 0], ((1, 1), (0, 0)), mode="edge"), ((0, 0), (1, 1)), mode="wrap")
    hand = np.array([[(k * padded[j:j + 3, i:i + 3]).sum() for i in range(16)] for j in range(16)])
    stencil = float(np.abs(scharr_gradient(n)[..., 0] - hand).max())
    ok = pou <= 1e-6 and const <= 1e-12 and curv0 <= 1e-12 and stencil <= 1e-14
    criterion("atlas", ok, f"partition of unity err {pou:.1e} (<=1e-6), constant stitch err {const:.1e}, "
                           f"flat-normal curvature {curv0:.1e}, step-edge stencil err {stencil:.1e}")
    assert ok


# ---------------------------------------------------------------- end to end and ablation

def _config(seed, arm):
    return ReconstructionConfig(epochs=600, step_size=10.0, hull_resolution=6, grid=(1, 1), seed=seed,
                                remesh=arm == "full", local_lambda=arm != "no_remesh_uniform_lambda")


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    cache = {}

    def get(seed, arm):
        if (seed, arm) not in cache:
            scene = root / f"scene{seed}"
            if not scene.exists():
                gen_synthetic(scene, n_views=20, resolution=128, seed=seed)
            capture, truth = load_capture(scene), load_truth(scene)
            rec = Reconstructor(capture, _config(seed, arm))
            hull_cd = chamfer_hausdorff(rec.export_mesh(), truth.mesh)[0]
            t0 = time.perf_counter()
            rec.run()
            elapsed = time.perf_counter() - t0
            cache[seed, arm] = {"rec": rec, "truth": truth, "hull_cd": hull_cd, "elapsed": elapsed,
                                "cd": chamfer_hausdorff(rec.export_mesh(), truth.mesh)[0]}
        return cache[seed, arm]

    return get


@pytest.mark.slow
def test_e2e_runtime(runs, criterion):
    r = runs(0, "full")
    ok = r["elapsed"] < 3600
    criterion("e2e runtime", ok, f"600 epochs in {r['elapsed']:.0f}s (<3600s), "
                                 f"{r['rec'].mesh.n_vertices} final vertices")
    assert ok


@pytest.mark.slow
def test_e2e_chamfer(runs, criterion):
    r = runs(0, "full")
    ok = r["cd"] <= 0.5 * r["hull_cd"]
    criterion("e2e chamfer", ok, f"final CD {r['cd']:.5f} vs hull CD {r['hull_cd']:.5f} "
                                 f"(ratio {r['cd'] / r['hull_cd']:.3f}, <=0.5)")
    assert ok


@pytest.mark.slow
def test_e2e_heldout_psnr(runs, criterion):
    r = runs(0, "full")
    rec = r["rec"]
    report = compute_metrics(rec.export_mesh(), rec.texture(), heldout_cameras(10, 128, 0), truth=r["truth"])
    ok = report.mean_psnr >= 28.0
    criterion("e2e held-out PSNR", ok, f"{report.mean_psnr:.2f} dB over 10 held-out views (>=28), "
                                       f"SSIM {np.mean(report.ssim):.3f}")
    assert ok


@pytest.mark.slow
def test_e2e_split_curvature_correlation(runs, criterion):
    r = split_curvature_correlation(runs(0, "full")["rec"].remesh_events, t_min=0.3)
    ok = r > 0.3
    criterion("e2e split density vs curvature", ok, f"Pearson r {r:.3f} (>0.3)")
    assert ok


@pytest.mark.slow
def test_e2e_normal_delta_transfer(runs, criterion):
    hist = runs(0, "full")["rec"].history
    mid = min(hist, key=lambda h: abs(h["t"] - 0.4))
    end = hist[-1]
    ok = end["delta"] < mid["delta"]
    criterion("e2e normal-delta transfer", ok, f"mean |N_delta| {mid['delta']:.4f} at t={mid['t']:.3f}, "
                                               f"{end['delta']:.4f} at t={end['t']:.3f}")
    assert ok


@pytest.mark.slow
def test_ablation(runs, criterion):
    rows, ok = [], True
    for seed in SEEDS:
        cd = {arm: runs(seed, arm)["cd"] for arm in ARMS}
        ok &= cd["full"] < cd["no_remesh"] and cd["full"] < cd["no_remesh_uniform_lambda"]
        rows.append(f"seed {seed}: " + " / ".join(f"{cd[a]:.5f}" for a in ARMS))
    criterion("ablation", ok, "CD full / no_remesh / no_remesh_uniform_lambda; " + "; ".join(rows))
    assert ok
