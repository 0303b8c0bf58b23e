from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import TINY, randomize_adapters
from loralab import autodiff as ad
from loralab.autodiff import Tensor
from loralab.errors import CompatibilityError, ConfigError, FormatError, InputError, VersionError
from loralab.init_schemes import InitSpec, initialize
from loralab.model import (ModelConfig, build_model, completion_logprobs, forward, greedy_decode,
                           load_adapters, merge, pack_pairs, read_manifest, save_adapters,
                           sequence_log_prob)


def uniform_model(config=TINY):
    """All-zero output projection, so every next-token distribution is uniform."""
    model = build_model(config, 0)
    model.base["lm_head.W"] = Tensor(np.zeros_like(model.base["lm_head.W"].data))
    return model


def naive_greedy(model, prompt, steps, stop_id=None):
    ids = list(prompt)
    out = []
    for _ in range(steps):
        if len(ids) >= model.config.max_seq:
            break
        tok = int(np.argmax(forward(model, ids).data[-1]))
        if tok == stop_id:
            break
        out.append(tok)
        ids.append(tok)
    return out


def test_config_examples():
    assert ModelConfig(d_model=64, n_heads=4).head_dim == 16
    with pytest.raises(ConfigError):
        ModelConfig(d_model=64, n_heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(adapter_rank=0)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"d_model": 32, "bogus": 1})


def test_build_is_deterministic():
    a, b = build_model(TINY, 5), build_model(TINY, 5)
    assert a.base_hash() == b.base_hash()
    assert build_model(TINY, 6).base_hash() != a.base_hash()


def test_forward_shapes(tiny_base):
    assert forward(tiny_base, [7]).shape == (1, TINY.vocab_size)
    assert forward(tiny_base, [[1, 2, 3], [4, 5, 6]]).shape == (2, 3, TINY.vocab_size)


@pytest.mark.parametrize("bad", [[], [TINY.vocab_size], [-1], list(range(TINY.max_seq + 1))])
def test_forward_rejects_bad_tokens(tiny_base, bad):
    with pytest.raises(InputError):
        forward(tiny_base, bad)


def test_zero_delta_adapters_leave_logits_unchanged(tiny_base, tiny_lora):
    ids = np.random.default_rng(0).integers(0, 256, 20)
    np.testing.assert_array_equal(forward(tiny_lora, ids).data, forward(tiny_base, ids).data)


def test_forward_is_causal(tiny_lora):
    randomize_adapters(tiny_lora)
    ids = np.random.default_rng(1).integers(0, 256, 12)
    changed = ids.copy()
    changed[8:] = (changed[8:] + 1) % 256
    np.testing.assert_allclose(forward(tiny_lora, ids).data[:8], forward(tiny_lora, changed).data[:8],
                               atol=1e-12)


def test_merge_matches_adapted_forward(tiny_lora):
    randomize_adapters(tiny_lora, scale=0.3)
    merged = merge(tiny_lora)
    assert merged.adapters is None
    ids = np.random.default_rng(2).integers(0, 256, (3, 16))
    assert np.abs(forward(merged, ids).data - forward(tiny_lora, ids).data).max() < 1e-9
    again = merge(tiny_lora)
    assert again.base_hash() == merged.base_hash()


def test_merge_with_zero_adapters_is_bit_exact(tiny_base, tiny_lora):
    assert merge(tiny_lora).base_hash() == tiny_base.base_hash()


def test_sequence_log_prob_uniform():
    model = uniform_model()
    lp = sequence_log_prob(model, [30], [65, 66, 67], "sum")
    assert abs(lp + 3 * math.log(256)) < 1e-10
    assert abs(sequence_log_prob(model, [30], [65, 66, 67], "mean") - lp / 3) < 1e-12


def test_sequence_log_prob_matches_explicit_gather(tiny_lora):
    randomize_adapters(tiny_lora)
    prompt, completion = [72, 105, 30], [65, 66, 3]
    ids = prompt + completion
    logits = forward(tiny_lora, ids[:-1]).data
    logp = logits - logits.max(-1, keepdims=True)
    logp -= np.log(np.exp(logp).sum(-1, keepdims=True))
    expected = sum(logp[len(prompt) - 1 + k, tok] for k, tok in enumerate(completion))
    assert abs(sequence_log_prob(tiny_lora, prompt, completion) - expected) < 1e-10


def test_completion_logprobs_batch_matches_singles(tiny_lora):
    randomize_adapters(tiny_lora)
    pairs = [([1, 2, 30], [5, 6]), ([9, 30], [7, 8, 9, 10]), ([4, 4, 4, 4, 30], [11])]
    batch = completion_logprobs(tiny_lora, pairs, "mean").data
    singles = [sequence_log_prob(tiny_lora, p, c, "mean") for p, c in pairs]
    np.testing.assert_allclose(batch, singles, atol=1e-12)


def test_pack_pairs_masks_only_completion():
    inputs, targets, mask = pack_pairs([([1, 2], [3, 4]), ([5], [6])])
    np.testing.assert_array_equal(inputs, [[1, 2, 3], [5, 0, 0]])
    np.testing.assert_array_equal(targets, [[2, 3, 4], [6, 0, 0]])
    np.testing.assert_array_equal(mask, [[0, 1, 1], [1, 0, 0]])
    with pytest.raises(InputError):
        pack_pairs([([1], [])])


def test_gradients_reach_only_adapters(tiny_lora):
    randomize_adapters(tiny_lora)
    with ad.Tape():
        loss = -ad.sum_(completion_logprobs(tiny_lora, [([1, 30], [5, 6])]))
        ad.backward(loss)
    assert all(p.grad is not None for p in tiny_lora.trainable_parameters())
    assert all(p.grad is None for p in tiny_lora.base_parameters())


def test_kv_decoder_matches_naive_decoding(tiny_lora):
    randomize_adapters(tiny_lora, scale=0.5)
    rng = np.random.default_rng(3)
    prompts = [list(rng.integers(0, 256, n)) for n in (1, 5, 9, 2)]
    fast = greedy_decode(tiny_lora, prompts, 12, stop_id=None, batch_size=3)
    assert fast == [naive_greedy(tiny_lora, p, 12) for p in prompts]


def test_decoding_stops_at_stop_id_and_max_seq(tiny_base):
    first = naive_greedy(tiny_base, [5, 6], 1)[0]
    assert greedy_decode(tiny_base, [[5, 6]], 10, stop_id=first) == [[]]
    long_prompt = [1] * (TINY.max_seq - 3)
    assert len(greedy_decode(tiny_base, [long_prompt], 50)[0]) == 3


def test_checkpoint_round_trip(tmp_path, tiny_lora):
    randomize_adapters(tiny_lora)
    save_adapters(tiny_lora.adapters, tmp_path / "ck", TINY, {"note": "x"})
    loaded = load_adapters(tmp_path / "ck")
    for tag, a in tiny_lora.adapters.items():
        np.testing.assert_array_equal(loaded[tag].A.data, a.A.data)
        np.testing.assert_array_equal(loaded[tag].B.data, a.B.data)
        assert loaded[tag].alpha == a.alpha and loaded[tag].rank == a.rank
    assert read_manifest(tmp_path / "ck")["provenance"] == {"note": "x"}


def test_truncated_blob_is_format_error(tmp_path, tiny_lora):
    path = save_adapters(tiny_lora.adapters, tmp_path / "ck", TINY)
    blob = path / "adapters.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_adapters(path)


def test_manifest_rank_mismatch_is_format_error(tmp_path, tiny_lora):
    path = save_adapters(tiny_lora.adapters, tmp_path / "ck", TINY)
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["rank"] = 3
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(FormatError):
        load_adapters(path)


def test_unknown_version_is_rejected(tmp_path, tiny_lora):
    path = save_adapters(tiny_lora.adapters, tmp_path / "ck", TINY)
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["version"] = 99
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(VersionError):
        load_adapters(path)


def test_attach_checks_coverage(tiny_base, tiny_lora):
    partial = tiny_lora.adapters.copy()
    partial.pop(next(iter(partial)))
    with pytest.raises(CompatibilityError):
        tiny_base.copy().attach(partial)


@given(st.lists(st.integers(0, 255), min_size=1, max_size=20))
def test_zero_delta_property(ids):
    base = build_model(TINY, 3)
    lora = initialize(base, InitSpec("vanilla", seed=len(ids)))
    np.testing.assert_array_equal(forward(lora, ids).data, forward(base, ids).data)
