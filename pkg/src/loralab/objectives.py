"""Post-training losses: SFT, DPO and ORPO.

Batched variants pack every (prompt, completion) pair of a minibatch into one
forward pass. DPO compares summed completion log-probabilities against a
frozen reference model; ORPO is reference-free and works on length-normalized
probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datagen import PreferenceExample, encode_completion, encode_prompt
from .errors import ConfigError, ObjectiveMismatchError
from .model import Model, completion_logprobs, forward, pack_pairs

OBJECTIVE_KINDS = ("sft", "dpo", "orpo")
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = "sft"
    beta: float = 0.1
    orpo_weight: float = 0.1
    dpo_length_norm: bool = False
    orpo_length_norm: bool = True

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ConfigError(f"unknown objective {self.kind!r}; expected one of {OBJECTIVE_KINDS}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if self.orpo_weight < 0:
            raise ConfigError(f"orpo_weight must be non-negative, got {self.orpo_weight}")

    @property
    def needs_reference(self) -> bool:
        return self.kind == "dpo"

    @property
    def needs_rejected(self) -> bool:
        return self.kind in ("dpo", "orpo")


def _pair(prompt: str, completion: str):
    return encode_prompt(prompt), encode_completion(completion)


def _preference_pairs(examples: Sequence[PreferenceExample], kind: str):
    for ex in examples:
        if ex.rejected is None:
            raise ObjectiveMismatchError(f"{kind} needs a rejected completion; prompt {ex.prompt[:40]!r}")
    return ([_pair(ex.prompt, ex.chosen) for ex in examples]
            + [_pair(ex.prompt, ex.rejected) for ex in examples])


def _split(t: Tensor, n: int) -> tuple[Tensor, Tensor]:
    """First and second halves of a (2n,) tensor."""
    return ad.take(t, np.arange(n)), ad.take(t, np.arange(n, 2 * n))


# ---------------------------------------------------------------- scalar compositions


def dpo_from_logps(pol_chosen, pol_rejected, ref_chosen, ref_rejected, beta: float) -> Tensor:
    """Per-example ``-log sigmoid(beta * (chosen log-ratio - rejected log-ratio))``."""
    margin = (ad.as_tensor(pol_chosen) - ad.as_tensor(ref_chosen)) \
        - (ad.as_tensor(pol_rejected) - ad.as_tensor(ref_rejected))
    return -ad.log_sigmoid(margin * beta)


def log_odds(logp) -> Tensor:
    """log(p / (1 - p)) with p = exp(logp) clamped into [1e-12, 1 - 1e-12]."""
    p = ad.clip(ad.exp(ad.as_tensor(logp)), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return ad.log(p) - ad.log(1.0 - p)


def odds_ratio_loss(logp_chosen, logp_rejected) -> Tensor:
    """Per-example ``-log sigmoid(log odds(chosen) - log odds(rejected))``."""
    return -ad.log_sigmoid(log_odds(logp_chosen) - log_odds(logp_rejected))


# ---------------------------------------------------------------- single-example losses


def sft_loss(model: Model, example: PreferenceExample) -> Tensor:
    """Mean token cross-entropy over the chosen completion; prompt positions are masked."""
    inputs, targets, mask = pack_pairs([_pair(example.prompt, example.chosen)])
    logits = forward(model, inputs[0])
    return ad.softmax_cross_entropy(logits, targets[0], mask[0])


def dpo_loss(model: Model, ref_model: Model, example: PreferenceExample,
             cfg: ObjectiveConfig = ObjectiveConfig(kind="dpo")) -> Tensor:
    return ad.reshape(batch_dpo_loss(model, ref_model, [example], cfg), ())


def orpo_loss(model: Model, example: PreferenceExample,
              cfg: ObjectiveConfig = ObjectiveConfig(kind="orpo")) -> Tensor:
    return ad.reshape(batch_orpo_loss(model, [example], cfg), ())


# ---------------------------------------------------------------- batched losses


def batch_sft_loss(model: Model, examples: Sequence[PreferenceExample]) -> Tensor:
    """Mean over examples of each example's mean completion-token NLL."""
    lp = completion_logprobs(model, [_pair(ex.prompt, ex.chosen) for ex in examples], "mean")
    return -ad.mean(lp)


def batch_dpo_loss(model: Model, ref_model: Model, examples: Sequence[PreferenceExample],
                   cfg: ObjectiveConfig) -> Tensor:
    n = len(examples)
    pairs = _preference_pairs(examples, "dpo")
    norm = "mean" if cfg.dpo_length_norm else "sum"
    with ad.no_grad():
        ref = completion_logprobs(ref_model, pairs, norm).data
    pol_c, pol_r = _split(completion_logprobs(model, pairs, norm), n)
    per = dpo_from_logps(pol_c, pol_r, Tensor(ref[:n]), Tensor(ref[n:]), cfg.beta)
    return ad.mean(per) if n > 1 else per


def batch_orpo_loss(model: Model, examples: Sequence[PreferenceExample],
                    cfg: ObjectiveConfig) -> Tensor:
    n = len(examples)
    pairs = _preference_pairs(examples, "orpo")
    lp_sum = completion_logprobs(model, pairs, "sum")
    lp_mean = lp_sum * (1.0 / np.array([len(c) for _, c in pairs], dtype=np.float64))
    mean_c, _ = _split(lp_mean, n)
    odds_c, odds_r = _split(lp_mean if cfg.orpo_length_norm else lp_sum, n)
    per = -mean_c + odds_ratio_loss(odds_c, odds_r) * cfg.orpo_weight
    return ad.mean(per) if n > 1 else per


def batch_loss(model: Model, examples: Sequence[PreferenceExample], cfg: ObjectiveConfig,
               ref_model: Model | None = None) -> Tensor:
    if cfg.kind == "sft":
        return batch_sft_loss(model, examples)
    if cfg.kind == "dpo":
        if ref_model is None:
            raise ConfigError("dpo needs a reference model")
        return batch_dpo_loss(model, ref_model, examples, cfg)
    return batch_orpo_loss(model, examples, cfg)
