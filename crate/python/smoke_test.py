"""Smoke test for the hpformer_py extension.

Run after `cargo build -p hpformer-py --release` (or a maturin install):

    python3 python/smoke_test.py
"""

import importlib.util
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[1]


def import_extension():
    try:
        import hpformer_py

        return hpformer_py
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libhpformer_py.so"
        if lib.exists():
            dest = pathlib.Path(tempfile.mkdtemp()) / "hpformer_py.so"
            shutil.copy(lib, dest)
            spec = importlib.util.spec_from_file_location("hpformer_py", dest)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit("hpformer_py not found; build it with `cargo build -p hpformer-py --release`")


def main():
    hp = import_extension()

    rows = hp.coverage_table(4096, 16, 4)
    assert rows == [(4096, 16, 1, 256), (2048, 32, 1, 128), (1024, 64, 1, 64), (512, 128, 1, 32)], rows

    s = hp.scores([0, 1, 1, 1], [0, 0, 1, 1], 2)
    assert s.oa == 0.75 and s.kappa == 0.5, (s.oa, s.kappa)

    pts = [(float(i), float(i * i % 7), 0.0) for i in range(20)]
    nn = hp.knn(pts, 3)
    assert len(nn) == 20 and all(row[0] == i for i, row in enumerate(nn))
    assert len(set(hp.fps(pts, 5))) == 5

    scene = hp.synth_scene("xor", 1)
    assert len(scene) == 3200 and len(scene.band_names) == 8

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        coords = [(0.5 * (i % 10), 0.5 * (i // 10), float(i % 2)) for i in range(60)]
        labels = [1 + i % 2 for i in range(60)]
        bands = [[0.2 + 0.5 * (l - 1)] for l in labels]
        hp.PointCloud(coords, bands, labels).save(str(tmp / "scene.csv"))
        (tmp / "config.toml").write_text(
            '[data]\ncloud = "scene.csv"\nvalidate_on_train = true\n'
            "[blocks]\nsize = 10.0\nstride = 10.0\n"
            "[model]\nwidths = [4, 4, 8, 8]\nk = 4\nn_input = 32\nnum_classes = 3\nbands = 1\n"
            "[train]\nepochs = 2\nbatch = 2\n"
        )
        model = hp.Model.train(str(tmp / "config.toml"), str(tmp / "model.hpf"))
        again = hp.Model.load(str(tmp / "model.hpf"))
        cloud = hp.PointCloud.load(str(tmp / "scene.csv"))
        pred = again.predict(cloud)
        assert pred == model.predict(cloud) and len(pred) == 60
        feats = again.features(cloud)
        assert len(feats) == 60 and len(feats[0]) == 4
        print(f"model with {again.num_parameters} parameters; predicted classes {sorted(set(pred))}")

    print("smoke test passed")


if __name__ == "__main__":
    main()
