"""Tiny decoder-only transformer with frozen base weights and low-rank adapters.

Every adapted linear layer computes ``x @ (W + (alpha/r) * A @ B).T + b`` in
factored form, with ``A`` of shape (d_out, r) and ``B`` of shape (r, d_in).
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (CompatibilityError, ConfigError, FormatError, InputError, VersionError)

ADAPTER_ROLES = ("attn_q", "attn_k", "attn_v", "attn_o", "mlp_in", "mlp_out")
CHECKPOINT_VERSION = 1
CHECKPOINT_FORMAT = "loralab-adapters"
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "adapters.bin"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_seq: int = 256
    adapter_rank: int = 4
    adapter_alpha: float = 4.0
    target_modules: tuple[str, ...] = ADAPTER_ROLES

    def __post_init__(self):
        object.__setattr__(self, "target_modules", tuple(self.target_modules))
        self.validate()

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.max_seq < 2:
            raise ConfigError(f"max_seq must be at least 2, got {self.max_seq}")
        if not 1 <= self.adapter_rank <= min(self.d_model, self.d_ff):
            raise ConfigError(
                f"adapter_rank={self.adapter_rank} outside [1, {min(self.d_model, self.d_ff)}]"
            )
        if not self.adapter_alpha > 0:
            raise ConfigError(f"adapter_alpha must be positive, got {self.adapter_alpha}")
        unknown = set(self.target_modules) - set(ADAPTER_ROLES)
        if unknown:
            raise ConfigError(f"unknown target modules {sorted(unknown)}")
        if len(set(self.target_modules)) != len(self.target_modules):
            raise ConfigError("target_modules contains duplicates")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def role_dims(self, role: str) -> tuple[int, int]:
        """(d_out, d_in) of the linear layer playing ``role``."""
        d, f = self.d_model, self.d_ff
        return {"attn_q": (d, d), "attn_k": (d, d), "attn_v": (d, d), "attn_o": (d, d),
                "mlp_in": (f, d), "mlp_out": (d, f)}[role]

    def adapter_tags(self) -> list[str]:
        return [f"layer{i}.{role}" for i in range(self.n_layers)
                for role in ADAPTER_ROLES if role in self.target_modules]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["target_modules"] = list(self.target_modules)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config fields {sorted(extra)}")
        return cls(**d)


def role_of(tag: str) -> str:
    return tag.split(".", 1)[1]


@dataclass
class LoraAdapter:
    A: Tensor
    B: Tensor
    rank: int
    alpha: float
    layer_tag: str

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scale * (self.A.data @ self.B.data)

    @property
    def n_params(self) -> int:
        return self.A.size + self.B.size

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(Tensor(self.A.data.copy(), requires_grad=True),
                           Tensor(self.B.data.copy(), requires_grad=True),
                           self.rank, self.alpha, self.layer_tag)


class AdapterSet(dict):
    """Mapping layer_tag -> LoraAdapter, plus free-form provenance in ``meta``."""

    def __init__(self, items=(), meta: dict | None = None):
        super().__init__(items)
        self.meta = dict(meta or {})

    def parameters(self) -> list[Tensor]:
        out = []
        for tag in self:
            out.extend((self[tag].A, self[tag].B))
        return out

    def copy(self) -> "AdapterSet":
        return AdapterSet(((t, a.copy()) for t, a in self.items()), meta=copy.deepcopy(self.meta))

    def check_coverage(self, config: ModelConfig) -> None:
        expected = config.adapter_tags()
        if sorted(self) != sorted(expected):
            missing = sorted(set(expected) - set(self))
            extra = sorted(set(self) - set(expected))
            raise CompatibilityError(
                f"adapter tags do not cover target modules (missing {missing}, extra {extra})",
                ["target_modules"],
            )
        for tag in expected:
            a = self[tag]
            d_out, d_in = config.role_dims(role_of(tag))
            if a.A.shape != (d_out, config.adapter_rank) or a.B.shape != (config.adapter_rank, d_in):
                raise CompatibilityError(
                    f"{tag}: adapter shapes {a.A.shape}/{a.B.shape} do not match config",
                    ["adapter_rank"],
                )


def _linear_names(i: int) -> list[str]:
    return [f"layer{i}.{role}" for role in ADAPTER_ROLES]


class Model:
    """Frozen base weights plus an optional adapter set.

    ``base`` maps parameter names to tensors; adapted linear layers are stored
    as ``"<tag>.W"`` (d_out, d_in) and ``"<tag>.b"`` (d_out,).
    """

    def __init__(self, config: ModelConfig, base: dict[str, Tensor],
                 adapters: AdapterSet | None = None):
        self.config = config
        self.base = base
        self.adapters = adapters
        self._masks: dict[int, np.ndarray] = {}

    # -- bookkeeping ---------------------------------------------------------

    def base_parameters(self) -> list[Tensor]:
        return [self.base[k] for k in sorted(self.base)]

    def trainable_parameters(self) -> list[Tensor]:
        return self.adapters.parameters() if self.adapters is not None else []

    def base_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.base):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.base[k].data).tobytes())
        return h.hexdigest()

    def attach(self, adapters: AdapterSet) -> "Model":
        adapters.check_coverage(self.config)
        self.adapters = adapters
        return self

    def copy(self) -> "Model":
        base = {k: Tensor(v.data.copy(), name=k) for k, v in self.base.items()}
        return Model(self.config, base, self.adapters.copy() if self.adapters is not None else None)

    def frozen_copy(self) -> "Model":
        """Detached snapshot, e.g. a DPO reference policy."""
        m = self.copy()
        if m.adapters is not None:
            for p in m.adapters.parameters():
                p.requires_grad = False
        return m

    # -- forward -------------------------------------------------------------

    def linear(self, x: Tensor, tag: str) -> Tensor:
        W = self.base[f"{tag}.W"]
        y = ad.matmul(x, ad.transpose(W)) + self.base[f"{tag}.b"]
        if self.adapters is not None and tag in self.adapters:
            a = self.adapters[tag]
            low = ad.matmul(ad.matmul(x, ad.transpose(a.B)), ad.transpose(a.A))
            y = y + low * a.scale
        return y

    def _causal_mask(self, T: int) -> np.ndarray:
        m = self._masks.get(T)
        if m is None:
            m = np.tril(np.ones((T, T), dtype=bool))
            self._masks[T] = m
        return m

    def __call__(self, tokens) -> Tensor:
        return forward(self, tokens)


def build_model(config: ModelConfig, seed: int) -> Model:
    """Base weights from a seeded scaled Gaussian; no adapters attached."""
    config.validate()
    rng = np.random.default_rng(seed)
    d, f, V = config.d_model, config.d_ff, config.vocab_size
    out_scale = 1.0 / math.sqrt(2 * config.n_layers)
    base: dict[str, np.ndarray] = {
        "tok_emb": rng.normal(0.0, 0.02, (V, d)),
        "pos_emb": rng.normal(0.0, 0.02, (config.max_seq, d)),
    }
    for i in range(config.n_layers):
        base[f"layer{i}.ln1.g"] = np.ones(d)
        base[f"layer{i}.ln1.b"] = np.zeros(d)
        base[f"layer{i}.ln2.g"] = np.ones(d)
        base[f"layer{i}.ln2.b"] = np.zeros(d)
        for tag in _linear_names(i):
            d_out, d_in = config.role_dims(role_of(tag))
            std = 1.0 / math.sqrt(d_in)
            if role_of(tag) in ("attn_o", "mlp_out"):
                std *= out_scale
            base[f"{tag}.W"] = rng.normal(0.0, std, (d_out, d_in))
            base[f"{tag}.b"] = np.zeros(d_out)
    base["ln_f.g"] = np.ones(d)
    base["ln_f.b"] = np.zeros(d)
    base["lm_head.W"] = rng.normal(0.0, 1.0 / math.sqrt(d), (V, d))
    return Model(config, {k: Tensor(v, name=k) for k, v in base.items()})


def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    ids = np.asarray(tokens)
    if ids.ndim not in (1, 2):
        raise InputError(f"tokens must be a sequence or a batch of sequences, got shape {ids.shape}")
    if ids.shape[-1] < 1:
        raise InputError("empty token sequence")
    if ids.shape[-1] > config.max_seq:
        raise InputError(f"sequence length {ids.shape[-1]} exceeds max_seq={config.max_seq}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError("token ids must be integers")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise InputError(f"token id out of range [0, {config.vocab_size})")
    return ids.astype(np.int64)


def hidden_states(model: Model, ids: np.ndarray) -> Tensor:
    """Final-layer-normed residual stream (B, T, d_model) for validated ids (B, T)."""
    cfg = model.config
    B, T = ids.shape
    H, dh = cfg.n_heads, cfg.head_dim
    p = model.base
    x = ad.embedding_lookup(p["tok_emb"], ids) + ad.embedding_lookup(p["pos_emb"], np.arange(T))
    mask = model._causal_mask(T)
    inv_sqrt = 1.0 / math.sqrt(dh)
    for i in range(cfg.n_layers):
        h = ad.layer_norm(x, p[f"layer{i}.ln1.g"], p[f"layer{i}.ln1.b"])
        q = ad.transpose(ad.reshape(model.linear(h, f"layer{i}.attn_q") * inv_sqrt, (B, T, H, dh)),
                         (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(model.linear(h, f"layer{i}.attn_k"), (B, T, H, dh)), (0, 2, 3, 1))
        v = ad.transpose(ad.reshape(model.linear(h, f"layer{i}.attn_v"), (B, T, H, dh)), (0, 2, 1, 3))
        att = ad.softmax(ad.matmul(q, k), mask)
        ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, cfg.d_model))
        x = x + model.linear(ctx, f"layer{i}.attn_o")
        h = ad.layer_norm(x, p[f"layer{i}.ln2.g"], p[f"layer{i}.ln2.b"])
        x = x + model.linear(ad.relu(model.linear(h, f"layer{i}.mlp_in")), f"layer{i}.mlp_out")
    return ad.layer_norm(x, p["ln_f.g"], p["ln_f.b"])


def forward(model: Model, tokens) -> Tensor:
    """Causal logits: (T, V) for a single sequence, (B, T, V) for a batch."""
    cfg = model.config
    ids = _check_tokens(cfg, tokens)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    logits = ad.matmul(hidden_states(model, ids), ad.transpose(model.base["lm_head.W"]))
    if single:
        logits = ad.reshape(logits, (ids.shape[1], cfg.vocab_size))
    return logits


def merge(model: Model) -> Model:
    """New adapter-free model whose weights are ``W + (alpha/r) A B``; ``model`` is untouched."""
    base = {k: Tensor(v.data.copy(), name=k) for k, v in model.base.items()}
    if model.adapters is not None:
        for tag, a in model.adapters.items():
            base[f"{tag}.W"] = Tensor(model.base[f"{tag}.W"].data + a.delta(), name=f"{tag}.W")
    return Model(model.config, base, None)


# ---------------------------------------------------------------- sequence scoring


def pack_pairs(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], pad_id: int = 0):
    """Pack (prompt, completion) id pairs into next-token training arrays.

    Returns ``(inputs, targets, mask)``, each (B, T) with T the longest
    ``len(prompt) + len(completion) - 1``. ``mask`` is 1 exactly on positions
    whose target is a completion token.
    """
    rows = []
    for prompt, completion in pairs:
        if len(completion) == 0:
            raise InputError("completion must be non-empty")
        if len(prompt) == 0:
            raise InputError("prompt must be non-empty (it carries the separator)")
        rows.append((list(prompt) + list(completion), len(prompt)))
    T = max(len(ids) for ids, _ in rows) - 1
    B = len(rows)
    inputs = np.full((B, T), pad_id, dtype=np.int64)
    targets = np.full((B, T), pad_id, dtype=np.int64)
    mask = np.zeros((B, T))
    for r, (ids, lp) in enumerate(rows):
        n = len(ids) - 1
        inputs[r, :n] = ids[:-1]
        targets[r, :n] = ids[1:]
        mask[r, lp - 1:n] = 1.0
    return inputs, targets, mask


def completion_logprobs(model: Model, pairs, normalization: str = "sum") -> Tensor:
    """Differentiable per-pair completion log-probabilities, shape (B,).

    Only completion positions go through the output projection, since prompt
    positions never contribute.
    """
    if normalization not in ("sum", "mean"):
        raise InputError(f"unknown normalization {normalization!r}")
    inputs, targets, mask = pack_pairs(pairs)
    ids = _check_tokens(model.config, inputs)
    if ids.shape[1] + 1 > model.config.max_seq:
        raise InputError(f"prompt+completion length {ids.shape[1] + 1} exceeds max_seq")
    B, T = ids.shape
    rows, cols = np.nonzero(mask)
    h = ad.take(ad.reshape(hidden_states(model, ids), (B * T, model.config.d_model)), rows * T + cols)
    logits = ad.matmul(h, ad.transpose(model.base["lm_head.W"]))
    lp = ad.segment_sum(ad.token_logprobs(logits, targets[rows, cols]), rows, B)
    if normalization == "mean":
        lp = lp * (1.0 / mask.sum(axis=1))
    return lp


def sequence_log_prob(model: Model, prompt, completion, normalization: str = "sum") -> float:
    """Log-probability of ``completion`` given ``prompt`` (sum or per-token mean)."""
    with ad.no_grad():
        return float(completion_logprobs(model, [(prompt, completion)], normalization).data[0])


def _np_layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc * (1.0 / np.sqrt(var + ad.LAYER_NORM_EPS)) * g + b


class _KVDecoder:
    """Incremental numpy forward pass with per-row key/value caches.

    Rows may hold prompts of different lengths; each row tracks its own
    position and attends only to its own filled cache slots.
    """

    def __init__(self, model: Model, batch: int, capacity: int):
        cfg = model.config
        self.model = model
        self.cfg = cfg
        self.p = {k: v.data for k, v in model.base.items()}
        self.weights = {}
        for i in range(cfg.n_layers):
            for tag in _linear_names(i):
                W = self.p[f"{tag}.W"]
                if model.adapters is not None and tag in model.adapters:
                    W = W + model.adapters[tag].delta()
                self.weights[tag] = (W.T.copy(), self.p[f"{tag}.b"])
        shape = (batch, cfg.n_heads, capacity, cfg.head_dim)
        self.k = [np.zeros(shape) for _ in range(cfg.n_layers)]
        self.v = [np.zeros(shape) for _ in range(cfg.n_layers)]

    def _lin(self, x, tag):
        Wt, b = self.weights[tag]
        return x @ Wt + b

    def step(self, rows: np.ndarray, tokens: np.ndarray, pos: np.ndarray) -> np.ndarray:
        """Feed one token per listed row at its position; returns next-token logits."""
        cfg, p = self.cfg, self.p
        H, dh = cfg.n_heads, cfg.head_dim
        n = rows.size
        x = p["tok_emb"][tokens] + p["pos_emb"][pos]
        span = int(pos.max()) + 1
        keep = np.arange(span)[None, :] <= pos[:, None]
        for i in range(cfg.n_layers):
            h = _np_layer_norm(x, p[f"layer{i}.ln1.g"], p[f"layer{i}.ln1.b"])
            q = self._lin(h, f"layer{i}.attn_q").reshape(n, H, dh)
            self.k[i][rows, :, pos] = self._lin(h, f"layer{i}.attn_k").reshape(n, H, dh)
            self.v[i][rows, :, pos] = self._lin(h, f"layer{i}.attn_v").reshape(n, H, dh)
            K = self.k[i][rows, :, :span]
            V = self.v[i][rows, :, :span]
            scores = np.einsum("nhd,nhtd->nht", q, K) / math.sqrt(dh)
            scores = np.where(keep[:, None, :], scores, -np.inf)
            scores = np.exp(scores - scores.max(axis=-1, keepdims=True))
            att = scores / scores.sum(axis=-1, keepdims=True)
            ctx = np.einsum("nht,nhtd->nhd", att, V).reshape(n, cfg.d_model)
            x = x + self._lin(ctx, f"layer{i}.attn_o")
            h = _np_layer_norm(x, p[f"layer{i}.ln2.g"], p[f"layer{i}.ln2.b"])
            x = x + self._lin(np.maximum(self._lin(h, f"layer{i}.mlp_in"), 0.0), f"layer{i}.mlp_out")
        x = _np_layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        return x @ p["lm_head.W"].T


def greedy_decode(model: Model, prompts: Sequence[Sequence[int]], max_new_tokens: int,
                  stop_id: int | None = None, batch_size: int = 64) -> list[list[int]]:
    """Greedy continuation of each prompt; returns generated ids (stop id excluded).

    Generation also stops when a sequence reaches ``max_seq``.
    """
    cfg = model.config
    results: list[list[int]] = []
    for start in range(0, len(prompts), batch_size):
        chunk = [list(p) for p in prompts[start:start + batch_size]]
        for p in chunk:
            _check_tokens(cfg, p)
        dec = _KVDecoder(model, len(chunk), cfg.max_seq)
        gen: list[list[int]] = [[] for _ in chunk]
        lengths = np.array([len(p) for p in chunk])
        # prefill one position at a time across rows that still have prompt left
        last_logits = np.zeros((len(chunk), cfg.vocab_size))
        for t in range(int(lengths.max())):
            rows = np.nonzero(lengths > t)[0]
            toks = np.array([chunk[r][t] for r in rows])
            out = dec.step(rows, toks, np.full(rows.size, t))
            done = lengths[rows] == t + 1
            last_logits[rows[done]] = out[done]
        active = np.nonzero(lengths < cfg.max_seq)[0]
        pos = lengths.copy()
        for _ in range(max_new_tokens):
            nxt = np.argmax(last_logits[active], axis=-1)
            keep = []
            for r, tok in zip(active, nxt):
                if stop_id is not None and tok == stop_id:
                    continue
                gen[r].append(int(tok))
                if pos[r] + 1 < cfg.max_seq:
                    keep.append(r)
            active = np.array(keep, dtype=np.int64)
            if active.size == 0:
                break
            toks = np.array([gen[r][-1] for r in active])
            last_logits[active] = dec.step(active, toks, pos[active])
            pos[active] += 1
        results.extend(gen)
    return results


# ---------------------------------------------------------------- checkpoints


def save_adapters(adapters: AdapterSet, path, config: ModelConfig | None = None,
                  provenance: dict | None = None) -> Path:
    """Write ``manifest.json`` plus a little-endian float64 blob into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors, chunks, offset = [], [], 0
    ranks = {a.rank for a in adapters.values()}
    alphas = {a.alpha for a in adapters.values()}
    for tag, a in adapters.items():
        for name, t in (("A", a.A), ("B", a.B)):
            arr = np.ascontiguousarray(t.data, dtype="<f8")
            tensors.append({"tag": tag, "name": name, "shape": list(arr.shape),
                            "offset": offset, "count": int(arr.size)})
            offset += int(arr.size)
            chunks.append(arr.tobytes())
    blob = b"".join(chunks)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config.to_dict() if config is not None else adapters.meta.get("config"),
        "rank": ranks.pop() if len(ranks) == 1 else None,
        "alpha": alphas.pop() if len(alphas) == 1 else None,
        "layer_tags": list(adapters),
        "provenance": provenance if provenance is not None else adapters.meta.get("provenance", {}),
        "tensors": tensors,
        "blob": BLOB_NAME,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    tmp = path / (BLOB_NAME + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path / BLOB_NAME)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text())
    except FileNotFoundError as e:
        raise FormatError(f"no adapter manifest at {path}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest is not valid JSON: {e}") from e
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"unexpected checkpoint format {manifest.get('format')!r}")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {manifest.get('version')!r}")
    return manifest


def load_adapters(path) -> AdapterSet:
    """Inverse of ``save_adapters``; bit-exact."""
    path = Path(path)
    manifest = read_manifest(path)
    try:
        blob = (path / manifest["blob"]).read_bytes()
    except FileNotFoundError as e:
        raise FormatError(f"missing adapter blob in {path}") from e
    if len(blob) != manifest["blob_bytes"] or len(blob) % 8:
        raise FormatError(
            f"adapter blob has {len(blob)} bytes, manifest declares {manifest['blob_bytes']}"
        )
    values = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    rank, alpha = manifest["rank"], manifest["alpha"]
    parts: dict[str, dict[str, np.ndarray]] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        start, count = entry["offset"], entry["count"]
        if int(np.prod(shape)) != count or start + count > values.size:
            raise FormatError(f"{entry['tag']}.{entry['name']}: shape {shape} inconsistent with blob")
        parts.setdefault(entry["tag"], {})[entry["name"]] = values[start:start + count].reshape(shape).copy()
    adapters = AdapterSet(meta={"config": manifest.get("config"),
                                "provenance": manifest.get("provenance", {})})
    for tag in manifest["layer_tags"]:
        ab = parts.get(tag, {})
        if "A" not in ab or "B" not in ab:
            raise FormatError(f"{tag}: missing A or B matrix")
        A, B = ab["A"], ab["B"]
        if A.ndim != 2 or B.ndim != 2 or A.shape[1] != rank or B.shape[0] != rank:
            raise FormatError(
                f"{tag}: manifest rank {rank} does not match matrix shapes {A.shape}, {B.shape}"
            )
        adapters[tag] = LoraAdapter(Tensor(A, requires_grad=True), Tensor(B, requires_grad=True),
                                    int(rank), float(alpha), tag)
    return adapters
