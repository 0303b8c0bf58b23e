from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import TINY, randomize_adapters
from loralab.errors import CompatibilityError, ConfigError
from loralab.init_schemes import (InitSpec, init_d2lora, init_kaiming, init_olora, init_pissa,
                                  init_vanilla, initialize)
from loralab.model import ModelConfig, forward, save_adapters


def test_vanilla_zero_delta_and_seeded():
    a = init_vanilla((8, 6), 3, seed=4)
    assert np.all(a.delta() == 0.0)
    np.testing.assert_array_equal(a.B.data, init_vanilla((8, 6), 3, seed=4).B.data)
    assert not np.array_equal(a.B.data, init_vanilla((8, 6), 3, seed=5).B.data)


def test_vanilla_std():
    B = init_vanilla((100, 100), 100, seed=0).B.data
    assert B.size == 10_000
    assert abs(B.std() - 0.02) < 0.2 * 0.02


def test_kaiming_support_and_fan_in():
    a = init_kaiming((10, 24), 4, seed=1)
    bound = math.sqrt(6.0 / 24)
    assert np.all(np.abs(a.B.data) <= bound)
    assert a.B.shape == (4, 24) and np.all(a.delta() == 0.0)
    assert np.abs(a.B.data).max() > 0.8 * bound


@pytest.mark.parametrize("fn", [init_vanilla, init_kaiming])
def test_rank_too_large(fn):
    with pytest.raises(ConfigError):
        fn((4, 3), 4, seed=0)


def test_pissa_truncation_and_residual():
    W = np.random.default_rng(0).normal(size=(6, 5))
    res = init_pissa(W, 2, alpha=4.0)
    delta = res.adapter.delta()
    S = np.linalg.svd(W, compute_uv=False)
    np.testing.assert_allclose(np.linalg.svd(delta, compute_uv=False)[:2], S[:2], atol=1e-10)
    assert np.linalg.norm(res.residual + delta - W) / np.linalg.norm(W) < 1e-10
    full = init_pissa(W, 5, alpha=2.0)
    assert np.abs(full.residual).max() < 1e-10


def test_olora_orthogonal_columns():
    W = np.random.default_rng(1).normal(size=(7, 5))
    r, alpha = 3, 6.0
    res = init_olora(W, r, alpha)
    A = res.adapter.A.data
    assert np.abs(A.T @ A - (r / alpha) * np.eye(r)).max() < 1e-10
    np.testing.assert_allclose(res.residual + res.adapter.delta(), W, atol=1e-12)
    with pytest.raises(ConfigError):
        init_olora(W, 0, alpha)


@pytest.mark.parametrize("scheme", ["vanilla", "kaiming", "pissa", "olora"])
def test_initial_forward_preserved(tiny_base, scheme):
    ids = np.random.default_rng(2).integers(0, 256, (2, 24))
    ref = forward(tiny_base, ids).data
    out = forward(initialize(tiny_base, InitSpec(scheme, seed=7)), ids).data
    if scheme in ("vanilla", "kaiming"):
        np.testing.assert_array_equal(out, ref)
    else:
        assert np.abs(out - ref).max() < 1e-9


def test_initialize_leaves_source_untouched(tiny_base):
    before = tiny_base.base_hash()
    initialize(tiny_base, InitSpec("pissa"))
    assert tiny_base.base_hash() == before and tiny_base.adapters is None


def test_d2lora_loads_checkpoint_identically(tmp_path, tiny_base):
    warm = randomize_adapters(initialize(tiny_base, InitSpec("vanilla", seed=3)))
    save_adapters(warm.adapters, tmp_path / "w", TINY)
    loaded = initialize(tiny_base, InitSpec("d2lora", source_checkpoint=str(tmp_path / "w")))
    ids = np.arange(1, 20)
    np.testing.assert_array_equal(forward(loaded, ids).data, forward(warm, ids).data)


def test_d2lora_from_untrained_warmup_equals_vanilla(tmp_path, tiny_base):
    vanilla = initialize(tiny_base, InitSpec("vanilla", seed=9))
    save_adapters(vanilla.adapters, tmp_path / "w0", TINY)
    loaded = init_d2lora(tmp_path / "w0", TINY)
    for tag, a in vanilla.adapters.items():
        np.testing.assert_array_equal(loaded[tag].A.data, a.A.data)
        np.testing.assert_array_equal(loaded[tag].B.data, a.B.data)


def test_d2lora_rank_mismatch(tmp_path, tiny_lora):
    save_adapters(tiny_lora.adapters, tmp_path / "w", TINY)
    other = ModelConfig(**{**TINY.to_dict(), "adapter_rank": 3})
    with pytest.raises(CompatibilityError) as err:
        init_d2lora(tmp_path / "w", other)
    assert "adapter_rank" in err.value.fields


def test_init_spec_validation():
    with pytest.raises(ConfigError):
        InitSpec("milora")
    with pytest.raises(ConfigError):
        InitSpec("d2lora")
    with pytest.raises(ConfigError):
        InitSpec("vanilla", source_checkpoint="x")


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_pissa_reconstructs_property(m, n, seed):
    W = np.random.default_rng(seed).normal(size=(m, n))
    r = min(m, n)
    res = init_pissa(W, max(1, r // 2), alpha=2.0)
    assert np.linalg.norm(res.residual + res.adapter.delta() - W) <= 1e-10 * max(1.0, np.linalg.norm(W))
