"""Smoke test for the camc extension module.

Build and install first:
    pip install --no-build-isolation -e crates/py
"""
import math
import sys
import tempfile
import os

import camc


def main():
    ds = camc.Dataset.synth(["BPSK", "QPSK", "8PSK", "16QAM"], 50, frame_len=128, seed=3)
    assert len(ds) == 200
    assert ds.class_counts() == [50, 50, 50, 50]
    iq, label, snr = ds.frame(0)
    assert len(iq) == 256 and label < 4 and snr == 10

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "t.camcds")
        ds.save(path)
        back = camc.Dataset.load(path)
        assert back.frame(7) == ds.frame(7)

    r = camc.gradient_check("dense", draws=3)
    assert r["passed"], r
    assert "lstm_cell" in camc.primitives()

    exp = camc.Experiment(overrides=[
        "data.train_per_class=250", "data.val_per_class=50", "data.test_per_class=50",
        "train.epochs=1", "compress.finetune_epochs=0", "compress.agreement_frames=200",
        "sweep.per_class=20",
    ])
    assert len(exp.config_hash) == 16
    rep = exp.train()
    assert rep["epochs_run"] == 1
    ev = exp.evaluate()
    assert 0.0 <= ev["accuracy"] <= 1.0
    assert sum(map(sum, ev["confusion"])) == 200
    assert len(exp.snr_sweep()) == 11
    c = exp.compress()
    assert math.isclose(c["ratios"]["gamma_device"], 32 / 8 / 0.3, rel_tol=1e-9)
    assert c["device_file"][:8] == b"CAMCQ001"

    try:
        camc.Experiment(overrides=["train.nonsense=1"])
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    print("python smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
