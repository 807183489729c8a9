import os

import numpy as np
import pytest

import ddis

FIXTURE = os.environ.get("DDIS_FIXTURE", "")


def test_classes():
    assert len(ddis.shape_classes()) == 7


def test_schedule_conventions():
    s = ddis.schedule(steps=30)
    assert s["alpha_bar"][0] == 1.0
    assert len(s["timesteps"]) == 31
    assert s["timesteps"][0] == 0
    assert all(v == 0.0 for v in s["sigma"])
    ddpm = ddis.schedule(steps=30, mode="ddpm")
    assert ddpm["sigma"][0] == 0.0
    assert all(v > 0.0 for v in ddpm["sigma"][1:])


def test_dataset_is_deterministic():
    x1, y1 = ddis.generate_dataset("outline", 3, 5)
    x2, y2 = ddis.generate_dataset("outline", 3, 5)
    assert x1.shape == (21, 1, 16, 16)
    assert np.array_equal(x1, x2) and np.array_equal(y1, y2)
    assert sorted(set(y1.tolist())) == list(range(7))
    assert x1.min() >= -1.0 and x1.max() <= 1.0


def test_frechet():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(400, 3))
    assert ddis.frechet_distance(a, a) == pytest.approx(0.0, abs=1e-8)
    assert ddis.frechet_distance(a, a + 2.0) == pytest.approx(12.0, rel=1e-6)


def test_oracle_means():
    r = ddis.oracle_check("mixture", samples=2000)
    assert r["mean_ok"]
    assert np.asarray(r["cov"]).shape == (2, 2)


def test_cli_exit_codes(tmp_path):
    assert ddis.run_cli(["--help"]) == 0
    assert ddis.run_cli(["no-such-command"]) == 1
    out = tmp_path / "o"
    assert ddis.run_cli(["--out", str(out), "--set", "oracle.samples=300", "oracle", "check"]) == 0
    assert (out / "manifest.txt").exists()


@pytest.mark.skipif(not os.path.exists(FIXTURE), reason="fixture checkpoint not built")
def test_bundle_roundtrip():
    names = [n for n, _ in ddis.list_records(FIXTURE)]
    assert "classifier" in names and "denoiser" in names
    b = ddis.Bundle(FIXTURE)
    assert b.manifest["classifier_domain"] == "outline"
    x = b.sample(2, 3, seed=4)
    assert x.shape == (3, 1, 16, 16)
    assert np.array_equal(x, b.sample(2, 3, seed=4))
    p = b.probabilities(x)
    assert np.allclose(p.sum(axis=1), 1.0)
    assert b.features(x).shape[0] == 3
    assert np.isfinite(b.bn_loss(x))
