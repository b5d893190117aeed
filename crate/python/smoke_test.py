"""Smoke test for the `mms` extension module.

Build and install it first:

    pip install --no-build-isolation ./crates/py
"""

import math
import tempfile
from pathlib import Path

import mms

CONFIG = """
seed = 3

[augment]
target_width = 32
target_height = 32

[model.seg]
encoder_base_channels = 4
multi_scale_groups = 2

[model.classifier]
conv_channels = 4
pool_count = 3
out_dim = 8

[model.projector]
conv_channels = 4
pool_count = 2
out_dim = 8

[train]
epochs = 2
batch_size = 2
k_neg = "all"
"""


def check_losses():
    assert math.isclose(mms.info_nce_all_negative([[1.0, 0.0]], [[0.0, 1.0]]), math.log(2), abs_tol=1e-12)
    assert math.isclose(mms.total_loss([1, 2, 3, 4], [0.2, 0.2, 0.3, 0.3]), 2.7, abs_tol=1e-12)
    p = [0.5] * 16
    y = [1.0] * 8 + [0.0] * 8
    assert mms.sup_loss(p, y, 1, 4, 4) > 0
    assert mms.similarity_loss(p, p, 1, 4, 4) == mms.similarity_loss(p, p, 1, 4, 4)
    fibers = [1.0 if c == s else 0.0 for c in range(9) for s in range(9)]
    v = mms.pixel_info_nce(fibers, fibers, 1, 9, 3, 3, tau=0.5)
    assert math.isclose(v, math.log(1 + 8 * math.exp(-2)), abs_tol=1e-12)
    assert mms.dsc([1, 1, 0, 0], [0, 1, 1, 0]) == 0.5
    try:
        mms.dsc([0, 2], [0, 1])
    except ValueError:
        pass
    else:
        raise AssertionError("non-binary mask accepted")


def check_pipeline(root: Path):
    data = root / "data"
    test = root / "test"
    mms.generate_synthetic(str(data), 8, 32, 32, 1)
    mms.generate_synthetic(str(test), 3, 32, 32, 2)
    manifest = root / "split.json"
    assert mms.split(str(data), 1.0, 0, str(manifest)) == (4, 4, 0)
    cfg = root / "run.toml"
    cfg.write_text(CONFIG)
    ckpt = mms.train(str(manifest), str(cfg), str(root / "run"))
    assert ckpt.epoch == 2
    assert [h["epoch"] for h in ckpt.history()] == [1, 2]
    scores = ckpt.evaluate(str(test))
    assert scores["scored"] == 3 and 0.0 <= scores["mean_dsc"] <= 1.0
    path = root / "copy.mms"
    ckpt.save(str(path))
    again = mms.Checkpoint.load(str(path))
    image = next((test / "images").iterdir())
    assert again.predict(str(image)) == ckpt.predict(str(image))
    assert again.config_hash == ckpt.config_hash
    print(f"trained 2 epochs, held-out DSC {scores['mean_dsc']:.3f}")


def main():
    check_losses()
    with tempfile.TemporaryDirectory() as d:
        check_pipeline(Path(d))
    for cid, name, passed, detail in mms.selftest():
        print(f"criterion {cid} {'PASS' if passed else 'FAIL'} {name}: {detail}")
        assert passed
    print("smoke test passed")


if __name__ == "__main__":
    main()
