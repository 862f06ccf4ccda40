"""Smoke test for the Python extension.

Build first:  maturin develop -m crates/py/Cargo.toml
Run:          python python/smoke_test.py
"""

import os
import tempfile

import triplane_mimic_py as tm


def main():
    cfg = dict(tm.default_config())
    assert cfg["seed"] == "0" and cfg["eval.views"] == "60"

    rows = tm.gradcheck(seed=1, configs=1)
    assert rows and all(ok for _, _, ok in rows), rows

    assert tm.run_cli(["fit"]) == 2  # out_dir is required

    with tempfile.TemporaryDirectory() as d:
        code = tm.run_cli([
            "fit", f"out_dir={d}", "fit.steps=2", "fit.image_size=16", "fit.patch=8",
            "fit.batch=1", "fit.coarse_samples=4", "fit.fine_samples=4",
            "student.channels=2", "student.coarse_res=4", "student.factor=2",
            "student.style_dim=2", "student.hidden=4", "student.depth=1",
        ])
        assert code == 0
        ckpt = os.path.join(d, "checkpoint.tpl")
        h, w, rgb = tm.render(ckpt, yaw_deg=20.0, size=8, samples=4)
        assert (h, w, len(rgb)) == (8, 8, 8 * 8 * 3)
        assert all(0.0 <= v <= 1.0 for v in rgb)
        verts, tris = tm.mesh(ckpt, grid=8, iso=1e9)
        assert verts == [] and tris == []
    print("python smoke test ok")


if __name__ == "__main__":
    main()
