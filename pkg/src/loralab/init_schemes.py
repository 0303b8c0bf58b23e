"""Adapter initializers: vanilla (Gaussian/zero), Kaiming-uniform, PiSSA, OLoRA,
and warm-up checkpoints.

PiSSA and OLoRA move the top components of ``W`` into the adapter and leave a
residual in the base so the initial forward pass is unchanged. Their factors
carry an extra ``sqrt(r/alpha)`` so the runtime ``alpha/r`` scale cancels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import CompatibilityError, ConfigError
from .linalg import qr, svd
from .model import AdapterSet, LoraAdapter, Model, ModelConfig, load_adapters, read_manifest, role_of

SCHEMES = ("vanilla", "kaiming", "pissa", "olora", "d2lora")
GAUSSIAN_STD = 0.02


@dataclass(frozen=True)
class InitSpec:
    scheme: str = "vanilla"
    seed: int = 0
    source_checkpoint: str | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown init scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.scheme == "d2lora" and not self.source_checkpoint:
            raise ConfigError("d2lora initialization needs a source checkpoint")
        if self.scheme != "d2lora" and self.source_checkpoint:
            raise ConfigError(f"{self.scheme} initialization does not take a checkpoint")


@dataclass
class PissaResult:
    adapter: LoraAdapter
    residual: np.ndarray


def _check_rank(dims, r: int) -> tuple[int, int]:
    d_out, d_in = (int(d) for d in dims)
    if r < 1:
        raise ConfigError(f"adapter rank must be at least 1, got {r}")
    if r > min(d_out, d_in):
        raise ConfigError(f"adapter rank {r} exceeds min(dims)={min(d_out, d_in)}")
    return d_out, d_in


def _adapter(A: np.ndarray, B: np.ndarray, r: int, alpha: float, tag: str) -> LoraAdapter:
    return LoraAdapter(Tensor(A, requires_grad=True), Tensor(B, requires_grad=True), r, float(alpha), tag)


def init_vanilla(dims, r: int, seed, alpha: float | None = None, tag: str = "") -> LoraAdapter:
    """B ~ N(0, 0.02^2), A = 0, so the initial update is exactly zero."""
    d_out, d_in = _check_rank(dims, r)
    rng = np.random.default_rng(seed)
    B = rng.normal(0.0, GAUSSIAN_STD, (r, d_in))
    return _adapter(np.zeros((d_out, r)), B, r, r if alpha is None else alpha, tag)


def init_kaiming(dims, r: int, seed, alpha: float | None = None, tag: str = "") -> LoraAdapter:
    """B ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)) with fan_in = d_in, A = 0."""
    d_out, d_in = _check_rank(dims, r)
    bound = math.sqrt(6.0 / d_in)
    rng = np.random.default_rng(seed)
    B = rng.uniform(-bound, bound, (r, d_in))
    return _adapter(np.zeros((d_out, r)), B, r, r if alpha is None else alpha, tag)


def init_pissa(W, r: int, alpha: float, tag: str = "") -> PissaResult:
    """Principal singular components into the adapter, the rest into a frozen residual."""
    W = np.asarray(W, dtype=np.float64)
    _check_rank(W.shape, r)
    U, S, V = svd(W)
    root = np.sqrt(S[:r])
    k = math.sqrt(r / alpha)
    A = U[:, :r] * root * k
    B = (root[:, None] * V[:, :r].T) * k
    adapter = _adapter(A, B, r, alpha, tag)
    return PissaResult(adapter, W - adapter.delta())


def init_olora(W, r: int, alpha: float, tag: str = "") -> PissaResult:
    """Leading QR factors: A from Q's first r columns, B from R's first r rows."""
    W = np.asarray(W, dtype=np.float64)
    _check_rank(W.shape, r)
    Q, R = qr(W)
    k = math.sqrt(r / alpha)
    adapter = _adapter(Q[:, :r] * k, R[:r, :] * k, r, alpha, tag)
    return PissaResult(adapter, W - adapter.delta())


def _tag_seed(seed: int, index: int) -> list[int]:
    return [int(seed), int(index)]


def config_differences(a: dict, b: dict) -> list[str]:
    keys = sorted(set(a) | set(b))
    return [k for k in keys if a.get(k) != b.get(k)]


def init_d2lora(checkpoint_path, config: ModelConfig) -> AdapterSet:
    """Load warm-up adapters, refusing checkpoints built for a different model."""
    manifest = read_manifest(checkpoint_path)
    saved = manifest.get("config") or {}
    diff = config_differences(saved, config.to_dict())
    if manifest.get("rank") != config.adapter_rank and "adapter_rank" not in diff:
        diff.append("adapter_rank")
    if diff:
        raise CompatibilityError(
            f"checkpoint {checkpoint_path} was saved for a different model config; "
            f"differing fields: {', '.join(diff)}",
            diff,
        )
    adapters = load_adapters(checkpoint_path)
    adapters.check_coverage(config)
    return adapters


def initialize(model: Model, spec: InitSpec) -> Model:
    """Return a copy of ``model`` with adapters attached according to ``spec``.

    PiSSA and OLoRA also rewrite the copied base weights to their residuals.
    """
    cfg = model.config
    out = model.copy()
    r, alpha = cfg.adapter_rank, cfg.adapter_alpha
    if spec.scheme == "d2lora":
        out.attach(init_d2lora(Path(spec.source_checkpoint), cfg))
        return out
    adapters = AdapterSet(meta={"config": cfg.to_dict(),
                                "provenance": {"scheme": spec.scheme, "seed": spec.seed}})
    for idx, tag in enumerate(cfg.adapter_tags()):
        dims = cfg.role_dims(role_of(tag))
        if spec.scheme == "vanilla":
            adapters[tag] = init_vanilla(dims, r, _tag_seed(spec.seed, idx), alpha, tag)
        elif spec.scheme == "kaiming":
            adapters[tag] = init_kaiming(dims, r, _tag_seed(spec.seed, idx), alpha, tag)
        else:
            fn = init_pissa if spec.scheme == "pissa" else init_olora
            res = fn(out.base[f"{tag}.W"].data, r, alpha, tag)
            adapters[tag] = res.adapter
            out.base[f"{tag}.W"] = Tensor(res.residual, name=f"{tag}.W")
    out.attach(adapters)
    return out
