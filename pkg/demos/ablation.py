"""Compare the full method with remeshing disabled and with uniform smoothing on one scene.

Usage::

    python3 demos/ablation.py [--seed S] [--epochs N]
"""
import argparse
import tempfile
from pathlib import Path

from adaptrecon.metrics import chamfer_hausdorff
from adaptrecon.pipeline import ReconstructionConfig, Reconstructor
from adaptrecon.scene import gen_synthetic, load_capture, load_truth

ARMS = {
    "full": {},
    "no_remesh": {"remesh": False},
    "no_remesh_uniform_lambda": {"remesh": False, "local_lambda": False},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=600)
    a = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        scene = Path(tmp) / "scene"
        gen_synthetic(scene, seed=a.seed)
        capture, truth = load_capture(scene), load_truth(scene)
    base = ReconstructionConfig.load(Path(__file__).with_name("bumpy_sphere.json")).to_dict()
    for name, change in ARMS.items():
        rec = Reconstructor(capture, ReconstructionConfig.from_dict({**base, **change, "seed": a.seed,
                                                                     "epochs": a.epochs}))
        rec.run()
        cd = chamfer_hausdorff(rec.export_mesh(), truth.mesh)[0]
        print(f"{name:26s} |V| {rec.mesh.n_vertices:5d}  CD {cd:.5f}")


if __name__ == "__main__":
    main()
