"""Smoke test for the pyacupoint extension module.

Builds the module with cargo when it is not importable, then generates a
small dataset, round-trips an untrained checkpoint and runs predictions.
"""

import os
import shutil
import subprocess
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.dirname(HERE)
sys.path.insert(0, HERE)


def build():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "pyacupoint", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    shutil.copy(os.path.join(ROOT, "target", "release", "libpyacupoint.so"), os.path.join(HERE, "pyacupoint.so"))


try:
    import pyacupoint
except ImportError:
    build()
    import pyacupoint

SMALL = """
[data]
n = 6
split = [0.5, 0.25, 0.25]

[data.skeleton]
image_size = 64

[model]
num_queries = 19
heads = 2
ffn_hidden = 32
decoder_layers = 1

[model.backbone]
d_model = 16
d_state = 4
blocks = [1, 1, 1]
patch = 4
"""


def main():
    assert "[model]" in pyacupoint.default_config()
    assert abs(pyacupoint.throughput(10.05) - 99.50248756218906) < 1e-12
    assert pyacupoint.epe([(0.0, 0.0)], [(3.0, 4.0)]) == 5.0
    assert pyacupoint.pck([(0.0, 0.0), (10.0, 0.0)], [(0.0, 0.0), (0.0, 0.0)], 0.05, 100, 100) == 0.5

    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data")
        digest = pyacupoint.generate(data, seed=3, config_toml=SMALL)
        assert digest == pyacupoint.generate(os.path.join(tmp, "again"), seed=3, config_toml=SMALL)
        ds = pyacupoint.Dataset(data)
        assert len(ds) == 6 and ds.num_classes == 19 and ds.image_size == 64
        test_ids = ds.split("test")
        pixels = ds.image(test_ids[0])
        assert len(pixels) == 64 * 64
        assert len(ds.keypoints(test_ids[0])) == 19

        det = pyacupoint.KeypointDetector()
        assert not det.is_loaded
        try:
            det.predict(pixels, 64)
            raise AssertionError("unloaded detector predicted")
        except RuntimeError:
            pass

        ckpt = os.path.join(tmp, "model.ckpt")
        pyacupoint.KeypointDetector.untrained(SMALL, seed=1).save(ckpt)
        det.load(ckpt)
        assert det.is_loaded and det.num_parameters > 0
        recurrent = det.predict(pixels, 64, 0.0)
        det.mode = "parallel"
        parallel = det.predict(pixels, 64, 0.0)
        assert len(recurrent) == 19
        for a, b in zip(recurrent, parallel):
            assert a.class_id == b.class_id
            assert abs(a.x - b.x) <= 1e-6 and abs(a.y - b.y) <= 1e-6
            assert 0.0 <= a.confidence <= 1.0
        assert det.predict(pixels, 64, 1.0) == []

        try:
            pyacupoint.Dataset(os.path.join(tmp, "nowhere"))
            raise AssertionError("opened a missing dataset")
        except FileNotFoundError:
            pass
        with open(ckpt, "r+b") as f:
            f.seek(40)
            f.write(b"\xff\xff\xff\xff")
        try:
            det.load(ckpt)
            raise AssertionError("loaded a corrupt checkpoint")
        except pyacupoint.CorruptArtifactError:
            pass

        assert pyacupoint.run_cli(["generate", "--out", os.path.join(tmp, "x"), "--config", os.path.join(tmp, "none.toml")]) == 3

    print("pyacupoint smoke test passed")


if __name__ == "__main__":
    main()
