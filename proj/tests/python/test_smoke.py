"""End-to-end smoke tests for the iqt3d python module."""
import json
import math
import os

import numpy as np
import pytest

import iqt3d


def test_phantom_is_deterministic():
    a = iqt3d.generate_phantom(seed=1, dims=[16, 16, 16])
    b = iqt3d.generate_phantom(seed=1, dims=[16, 16, 16])
    assert a.shape == (16, 16, 16)
    assert np.array_equal(a, b)
    c = iqt3d.generate_phantom(seed=2, dims=[16, 16, 16])
    assert not np.array_equal(a, c)


def test_decimate_and_baseline():
    hf = iqt3d.generate_phantom(seed=3, dims=[16, 16, 16])
    lf = iqt3d.decimate(hf, factor=4, seed=5)
    assert lf.shape == hf.shape
    assert not np.array_equal(lf, hf)
    sub = lf[::4]
    up, fallback = iqt3d.cubic_baseline(sub, 4)
    assert up.shape == hf.shape
    assert not fallback


def test_normalize_window():
    hf = iqt3d.generate_phantom(seed=4, dims=[16, 16, 16])
    n, scale, offset = iqt3d.normalize(hf)
    assert n.min() >= -1.0 and n.max() <= 1.0
    assert scale != 0.0
    # in-window voxels map through the recorded affine
    inner = np.clip(scale * hf + offset, -1.0, 1.0)
    assert np.allclose(n, inner, atol=1e-6)


def test_schedule_functions():
    a, s = iqt3d.alpha_sigma(0.5)
    assert a == pytest.approx(0.7027400589411691, abs=1e-12)
    assert s == pytest.approx(0.7114467018402448, abs=1e-12)
    assert a * a + s * s == pytest.approx(1.0, abs=1e-12)
    cxt, cx, var = iqt3d.posterior_params(0.4, 0.8)
    assert var > 0.0
    with pytest.raises(Exception):
        iqt3d.alpha_sigma(1.5)


def test_metrics():
    a = iqt3d.generate_phantom(seed=6, dims=[16, 16, 16])
    v, inf = iqt3d.psnr(a, a)
    assert inf
    noisy = a + np.float32(0.05)
    v, inf = iqt3d.psnr(noisy, a)
    assert not inf and 20.0 < v < 40.0
    m = iqt3d.mssim(a, a)
    assert m == pytest.approx(1.0, abs=1e-9)
    assert iqt3d.seam_score(a, patch=8) > 0.0


def test_param_count_default_config():
    cfg = iqt3d.default_config_json()
    assert iqt3d.param_count(cfg) == 637513
    small = json.loads(cfg)
    small.update({"patch": 8, "filters": [8, 16], "token_size": [2, 1]})
    assert iqt3d.param_count(json.dumps(small)) < 637513


def test_volume_file_round_trip(tmp_path):
    a = iqt3d.generate_phantom(seed=7, dims=[16, 17, 18])
    path = str(tmp_path / "vol.iqtv")
    iqt3d.save_volume(a, path)
    b = iqt3d.load_volume(path)
    assert np.array_equal(a, b)


def test_fit_and_enhance_round_trip(tmp_path):
    cfg = json.loads(iqt3d.default_config_json())
    cfg.update({"patch": 8, "filters": [8, 16], "token_size": [2, 1],
                "dfe_depth": 1})
    cfg_json = json.dumps(cfg)
    hf = iqt3d.generate_phantom(seed=8, dims=[16, 16, 16])
    lf = iqt3d.decimate(hf, factor=4, seed=9)
    hf_n, _, _ = iqt3d.normalize(hf)
    lf_n, _, _ = iqt3d.normalize(lf)
    ck = str(tmp_path / "ck.iqtc")
    losses = iqt3d.fit([hf_n], [lf_n], cfg_json, steps=3, learning_rate=1e-4,
                       seed=10, checkpoint_path=ck)
    assert len(losses) >= 1
    assert all(math.isfinite(x) for x in losses)
    assert os.path.exists(ck)
    out = iqt3d.enhance(lf, ck, timesteps=2, seed=11)
    assert out.shape == lf.shape
    assert np.isfinite(out).all()
