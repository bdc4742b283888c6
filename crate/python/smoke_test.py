"""Smoke test for the Python bindings.

Build and install first:

    pip install --no-build-isolation -e crates/python
    python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import restore


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    cfg = restore.Config("toy")
    sr = cfg.sample_rate
    print(cfg, "bins", cfg.bins)

    counts = restore.Config("paper").param_counts()
    print("paper parameter counts", counts)
    assert abs(counts["repair"] / 2.21e6 - 1) < 0.1

    # Spectral round trip.
    x = restore.test_utterance(sr, sr // 2, 3)
    re, im = restore.stft(x)
    assert len(re) == cfg.bins
    y = restore.istft(re, im, len(x))
    err = max(abs(a - b) for a, b in zip(x, y))
    print("stft round trip max error", err)
    assert err < 1e-6

    # Loss fixtures.
    assert close(restore.sc_loss([[2.0]], [[1.0]]), 1.0)
    assert close(restore.asym_loss([[4.0]], [[1.0]]), 1.0)
    assert close(restore.log_mag_loss([[math.e]], [[1.0]]), 1.0)
    assert close(restore.plc_loss(([[4.0]], [[0.0]]), ([[1.0]], [[0.0]])), 2.0)
    assert close(restore.plc_loss(([[1.0]], [[0.0]]), ([[-1.0]], [[0.0]])), 4.0)
    assert close(restore.si_snr_loss([1.0, 0.0], [1.0, 1.0], zero_mean=False), 0.0)
    parts = {"sc": 0.0, "log_mag": 0.0, "asym": 2.0, "gen_adv": 0.0, "fm": 0.0}
    assert close(restore.total_losses(parts, "stage1"), 1.0)
    try:
        restore.total_losses({"sc": 1.0}, "stage1")
        raise AssertionError("missing parts accepted")
    except ValueError:
        pass

    # Degradation is seeded.
    a, report = restore.degrade(x, sr, 7, config="toy")
    b, _ = restore.degrade(x, sr, 7, config="toy")
    assert a == b and a != x
    print("degradation", report)
    same, _ = restore.degrade(x, sr, 7)
    assert same == x

    # Train every phase for a couple of steps, then enhance.
    with tempfile.TemporaryDirectory() as tmp:
        run = Path(tmp)
        for phase in restore.phases():
            lines = restore.train(phase, run, steps=1)
            print(lines[0])
        ckpt = restore.Checkpoint.load(run / "denoise_finetune.ckpt")
        print(ckpt, ckpt.meta)
        assert ckpt.meta["phase"] == "denoise_finetune"
        assert set(ckpt.counts_by_module()) == {"denoise", "repair"}
        restorer = restore.Restorer(run / "denoise_finetune.ckpt")
        out = restorer.enhance(a)
        assert len(out) == len(a) and all(math.isfinite(v) for v in out)
        try:
            restore.train("denoise_finetune", run / "empty")
            raise AssertionError("training out of order accepted")
        except RuntimeError as e:
            assert "exit code 4" in str(e)

    checks = restore.verify("stft")
    assert all(ok for _, _, ok in checks)
    print("verify stft:", len(checks), "checks passed")
    print("smoke test passed")


if __name__ == "__main__":
    main()
