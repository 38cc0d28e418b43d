"""Command-line entry points: ``gen``, ``reconstruct``, ``render`` and ``metrics``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .atlas import grid_for_texture, load_texture
from .imageio import write_exr, write_png
from .mesh import load_obj
from .metrics import compute_metrics
from .pipeline import ReconstructionConfig, Reconstructor, write_outputs
from .scene import gen_synthetic, heldout_cameras, load_capture, load_truth, render_views

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
HELDOUT_VIEWS = 10


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p, *, scene_required=True):
    p.add_argument("--scene", type=Path, required=scene_required, help="scene bundle directory")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adaptrecon", description="Inverse-rendering reconstruction of mesh and material atlas.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="render a synthetic bumpy-sphere scene bundle")
    _common(g, scene_required=False)
    g.add_argument("--views", type=int, default=20, help="number of training views")
    g.add_argument("--resolution", type=int, default=128, help="image width and height")

    r = sub.add_parser("reconstruct", help="reconstruct mesh and atlas from a scene bundle")
    _common(r)
    r.add_argument("--config", type=Path, help="JSON reconstruction config")
    r.add_argument("--epochs", type=int, help="override the epoch count")
    r.add_argument("--profile", choices=("synthetic", "real"), help="loss weight profile")

    d = sub.add_parser("render", help="render a result from the scene cameras")
    _common(d)
    d.add_argument("--result", type=Path, required=True, help="directory with mesh.obj and texture/")

    m = sub.add_parser("metrics", help="score a result against truth or captured images")
    _common(m)
    m.add_argument("--result", type=Path, required=True, help="directory with mesh.obj and texture/")
    m.add_argument("--heldout", type=int, default=HELDOUT_VIEWS, help="held-out view count")
    m.add_argument("--samples", type=int, default=100_000, help="surface samples per mesh")
    return parser


def _load_result(result_dir: Path):
    return load_obj(result_dir / "mesh.obj"), load_texture(result_dir / "texture")


def _metrics(mesh, texture, scene: Path, out: Path, seed: int, n_heldout: int = HELDOUT_VIEWS,
             n_samples: int = 100_000):
    capture = load_capture(scene)
    truth = load_truth(scene)
    if truth is not None:
        cams = heldout_cameras(n_heldout, capture.cameras[0].width, seed)
        report = compute_metrics(mesh, texture, cams, truth=truth, n_samples=n_samples, seed=seed)
    else:
        report = compute_metrics(mesh, texture, capture.cameras, references=capture.images)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "metrics.json")
    return report


def _cmd_gen(a):
    gen_synthetic(a.out, n_views=a.views, resolution=a.resolution, seed=a.seed)
    print(f"wrote {a.views} views to {a.out}")


def _cmd_reconstruct(a):
    cfg = ReconstructionConfig.load(a.config) if a.config else ReconstructionConfig()
    overrides = {"seed": a.seed}
    if a.epochs is not None:
        overrides["epochs"] = a.epochs
    if a.profile is not None:
        overrides["profile"] = a.profile
    cfg = ReconstructionConfig.from_dict({**cfg.to_dict(), **overrides})
    capture = load_capture(a.scene)
    rec = Reconstructor(capture, cfg)
    rec.run(checkpoint_path=a.out / "checkpoint.npz",
            callback=lambda r, h: logging.getLogger("adaptrecon").info(
                "epoch %d loss %.5g |V| %d", h["epoch"], h["loss"], h["n_vertices"]))
    write_outputs(rec, a.out)
    cfg.save(a.out / "config.json")
    report = _metrics(rec.export_mesh(), rec.texture(), a.scene, a.out, a.seed)
    print(f"wrote {a.out}: |V|={rec.mesh.n_vertices} mean PSNR {report.mean_psnr:.2f} dB"
          + (f" CD {report.chamfer:.5f}" if report.chamfer is not None else ""))


def _cmd_render(a):
    mesh, texture = _load_result(a.result)
    capture = load_capture(a.scene)
    images, masks = render_views(mesh, texture, capture.cameras)
    (a.out / "images").mkdir(parents=True, exist_ok=True)
    (a.out / "masks").mkdir(parents=True, exist_ok=True)
    for k, (img, mask) in enumerate(zip(images, masks)):
        write_exr(a.out / "images" / f"{k:03d}.exr", img)
        write_png(a.out / "images" / f"{k:03d}.png", img, srgb=True)
        write_png(a.out / "masks" / f"{k:03d}.png", np.asarray(mask, dtype=np.float64))
    print(f"rendered {len(images)} views to {a.out}")


def _cmd_metrics(a):
    mesh, texture = _load_result(a.result)
    grid_for_texture(texture.shape)
    report = _metrics(mesh, texture, a.scene, a.out, a.seed, a.heldout, a.samples)
    d = report.to_dict()
    print(f"PSNR {d['mean_psnr']:.2f} dB  SSIM {d['mean_ssim']:.4f}"
          + (f"  CD {d['chamfer']:.6f}  HD {d['hausdorff']:.6f}" if d["chamfer"] is not None else ""))


COMMANDS = {"gen": _cmd_gen, "reconstruct": _cmd_reconstruct, "render": _cmd_render, "metrics": _cmd_metrics}


def cli_main(argv=None) -> int:
    """Run the CLI; returns 0 on success, 1 on usage errors, 2 on runtime failures."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except Exception as err:  # noqa: BLE001 - every runtime failure maps to one exit code
        print(f"adaptrecon {args.command}: error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
