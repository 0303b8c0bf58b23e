"""Experiment sweeps: data scaling, warm-up effectiveness, forgetting, and scarce data.

Each sweep writes a fresh JSONL metrics file (one record per line) plus a
manifest holding the resolved configuration. The pre-trained base model and
warm-up checkpoints are cached on disk keyed by hashes of everything that
determines them, so repeated sweeps reuse them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable

import numpy as np

from . import __version__
from .autodiff import Tensor
from .datagen import GENERATOR_VERSION, Corpus, gen_corpus
from .errors import ConfigError, DataError, FormatError
from .init_schemes import InitSpec, initialize
from .kernels import BACKEND
from .metrics import evaluate, mcq_accuracy
from .model import Model, ModelConfig, build_model, save_adapters
from .objectives import OBJECTIVE_KINDS, ObjectiveConfig
from .trainer import PhasePlan, pretrain_base, pretraining_documents, run_phase

log = logging.getLogger(__name__)

EXPERIMENTS = ("data_scaling", "effectiveness", "forgetting", "scarce")
ARM_SCHEMES = ("vanilla", "kaiming", "pissa", "olora", "d2lora")
SCARCE_LIMIT = 1000

DEFAULT_GRIDS = {
    "data_scaling": (100, 200, 500, 1000, 2000),
    "effectiveness": (100, 2000),
    "forgetting": (0, 100, 500, 2000),
    "scarce": (100, 200, 500, 1000),
}
DEFAULT_METHODS = {
    "data_scaling": ("sft",),
    "effectiveness": ("sft",),
    "forgetting": ("sft",),
    "scarce": ("orpo",),
}
DEFAULT_SCHEMES = {
    "data_scaling": ("vanilla",),
    "effectiveness": ("vanilla", "d2lora"),
    "forgetting": ("vanilla", "d2lora"),
    "scarce": ("vanilla", "d2lora"),
}

# Fixed corpus seeds; train, evaluation and pre-training draws never share a seed.
CORPUS_SEEDS = {"pretrain": 1000, "general": 100, "task": 200, "eval": 5000, "probe": 5001}

# Document counts per corpus kind in the base pre-training stream. Skills and facts appear
# as plain text here; the prompt/separator/answer layout is left for the adapters to learn.
BASE_MIX = {"general": 12000, "math": 20000, "mcq": 4000, "title": 3000}


@dataclass(frozen=True)
class LabConfig:
    """Everything besides the sweep grid that determines a run."""

    model: ModelConfig = field(default_factory=ModelConfig)
    task: str = "math"
    batch_size: int = 16
    warmup_lr: float = 1e-2
    warmup_epochs: int = 1
    adapt_lr: float = 1e-2
    epochs: dict = field(default_factory=lambda: {"sft": 3, "dpo": 3, "orpo": 3})
    beta: float = 0.1
    orpo_weight: float = 0.1
    eval_size: int = 100
    probe_size: int = 200
    base_seed: int = 0
    base_steps: int = 2400
    base_lr: float = 3e-3
    base_batch: int = 16
    base_context: int = 176
    base_mix: dict = field(default_factory=lambda: dict(BASE_MIX))
    corpus_seeds: dict = field(default_factory=lambda: dict(CORPUS_SEEDS))

    def __post_init__(self):
        if self.task not in ("math", "title"):
            raise ConfigError(f"task must be math or title, got {self.task!r}")
        missing = set(OBJECTIVE_KINDS) - set(self.epochs)
        if missing:
            raise ConfigError(f"epochs missing for {sorted(missing)}")
        for name in ("batch_size", "warmup_epochs", "eval_size", "probe_size", "base_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")

    def objective(self, method: str) -> ObjectiveConfig:
        return ObjectiveConfig(method, beta=self.beta, orpo_weight=self.orpo_weight)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LabConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown lab config fields {sorted(extra)}")
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "epochs" in d:
            d["epochs"] = {**LabConfig().epochs, **d["epochs"]}
        if "corpus_seeds" in d:
            d["corpus_seeds"] = {**CORPUS_SEEDS, **d["corpus_seeds"]}
        return cls(**d)


def paper_scale(lab: LabConfig | None = None) -> LabConfig:
    """The published hyperparameter table applied to the desk-scale lab."""
    lab = lab or LabConfig()
    return replace(lab, model=replace(lab.model, adapter_rank=16, adapter_alpha=16.0),
                   warmup_lr=1e-7, warmup_epochs=1, adapt_lr=1e-6,
                   epochs={"sft": 3, "dpo": 4, "orpo": 4}, beta=0.1)


@dataclass(frozen=True)
class ExperimentSpec:
    experiment: str
    methods: tuple[str, ...] = ()
    init_schemes: tuple[str, ...] = ()
    n_grid: tuple[int, ...] = ()
    m: int = 2000
    seeds: tuple[int, ...] = (0,)
    lab: LabConfig = field(default_factory=LabConfig)
    output_dir: str = "loralab-out"
    cache_dir: str | None = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        set_ = object.__setattr__
        set_(self, "methods", tuple(self.methods) or DEFAULT_METHODS[self.experiment])
        set_(self, "init_schemes", tuple(self.init_schemes) or DEFAULT_SCHEMES[self.experiment])
        set_(self, "n_grid", tuple(int(n) for n in self.n_grid) or DEFAULT_GRIDS[self.experiment])
        set_(self, "seeds", tuple(int(s) for s in self.seeds))
        bad = set(self.methods) - set(OBJECTIVE_KINDS)
        if bad:
            raise ConfigError(f"unknown methods {sorted(bad)}")
        bad = set(self.init_schemes) - set(ARM_SCHEMES)
        if bad:
            raise ConfigError(f"unknown init schemes {sorted(bad)}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ConfigError(f"n_grid must be strictly increasing, got {list(self.n_grid)}")
        if self.n_grid[0] < 0:
            raise ConfigError("n_grid values must be non-negative")
        if self.m < 0:
            raise ConfigError("m must be non-negative")

    @property
    def cache(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else Path(self.output_dir) / "cache"

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "methods": list(self.methods),
                "init_schemes": list(self.init_schemes), "n_grid": list(self.n_grid),
                "m": self.m, "seeds": list(self.seeds), "lab": self.lab.to_dict(),
                "output_dir": self.output_dir, "cache_dir": self.cache_dir}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown experiment fields {sorted(extra)}")
        d = dict(d)
        if "lab" in d:
            d["lab"] = LabConfig.from_dict(d["lab"])
        for k in ("methods", "init_schemes", "n_grid", "seeds"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class MetricsRecord:
    experiment: str
    method: str
    scheme: str
    m: int
    n: int
    seed: int
    metric: str
    value: float
    wall_time: float = 0.0

    @property
    def key(self) -> tuple:
        return (self.experiment, self.method, self.scheme, self.m, self.n, self.seed, self.metric)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class RunManifest:
    config: dict
    versions: dict
    corpus_seeds: dict
    started: str
    finished: str | None = None
    metrics_file: str | None = None

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _versions() -> dict:
    return {"loralab": __version__, "numpy": np.__version__,
            "python": platform.python_version(), "kernels": BACKEND}


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------- metrics files


class MetricsWriter:
    """Appends records to a new JSONL file, refusing duplicate keys."""

    def __init__(self, path: Path):
        self.path = path
        self._keys: set[tuple] = set()
        self._fh = path.open("x", encoding="utf-8")

    def write(self, rec: MetricsRecord) -> None:
        if rec.key in self._keys:
            raise DataError(f"duplicate metrics record {rec.key}")
        self._keys.add(rec.key)
        self._fh.write(rec.to_json() + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def new_metrics_path(out_dir, experiment: str) -> Path:
    """Next unused ``<experiment>-NNN.jsonl`` in ``out_dir``; earlier runs are never touched."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k = 0
    while (out / f"{experiment}-{k:03d}.jsonl").exists():
        k += 1
    return out / f"{experiment}-{k:03d}.jsonl"


def load_records(path) -> list[MetricsRecord]:
    recs, seen = [], set()
    names = {f.name for f in fields(MetricsRecord)}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rec = MetricsRecord(**{k: obj[k] for k in names if k in obj})
        except (json.JSONDecodeError, TypeError) as e:
            raise FormatError(f"{path}: line {lineno}: not a metrics record ({e})") from e
        if rec.key in seen:
            raise DataError(f"{path}: line {lineno}: duplicate record {rec.key}")
        seen.add(rec.key)
        recs.append(rec)
    return recs


def deterministic_view(path) -> list[dict]:
    """Records with ``wall_time`` dropped, for run-to-run comparison."""
    out = []
    for rec in load_records(path):
        d = asdict(rec)
        d.pop("wall_time")
        out.append(d)
    return out


def grouped(records: Iterable[MetricsRecord], metric: str) -> dict[tuple, dict[int, dict[int, float]]]:
    """{(method, scheme): {n: {seed: value}}} for one metric."""
    out: dict[tuple, dict[int, dict[int, float]]] = {}
    for r in records:
        if r.metric == metric:
            out.setdefault((r.method, r.scheme), {}).setdefault(r.n, {})[r.seed] = r.value
    return out


def paired_gaps(records: Iterable[MetricsRecord], metric: str, n: int, method: str,
                arm: str = "d2lora", baseline: str = "vanilla") -> list[float]:
    """Per-seed ``arm - baseline`` differences at sample count ``n``."""
    g = grouped(records, metric)
    a = g.get((method, arm), {}).get(n, {})
    b = g.get((method, baseline), {}).get(n, {})
    return [a[s] - b[s] for s in sorted(set(a) & set(b))]


# ---------------------------------------------------------------- the lab


class Lab:
    """Shared state for a sweep: corpora, cached base model, cached warm-up checkpoints."""

    def __init__(self, config: LabConfig, cache_dir):
        self.config = config
        self.cache = Path(cache_dir)
        self._corpora: dict[tuple, Corpus] = {}
        self._base: Model | None = None

    def corpus(self, kind: str, size: int, role: str) -> Corpus:
        key = (kind, role)
        have = self._corpora.get(key)
        if have is None or len(have) < size:
            have = gen_corpus(kind, max(size, 1), self.config.corpus_seeds[role])
            self._corpora[key] = have
        return have.head(size)

    # -- base model ------------------------------------------------------------

    def base_key(self) -> str:
        c = self.config
        return _digest({"model": c.model.to_dict(), "seed": c.base_seed, "steps": c.base_steps,
                        "lr": c.base_lr, "batch": c.base_batch, "context": c.base_context,
                        "mix": c.base_mix, "corpus_seed": c.corpus_seeds["pretrain"],
                        "generator": GENERATOR_VERSION})

    def base(self) -> Model:
        """Pre-trained base model, built once and cached under the cache directory."""
        if self._base is not None:
            return self._base
        c = self.config
        path = self.cache / f"base-{self.base_key()}.npz"
        if path.exists():
            with np.load(path) as z:
                base = {k: Tensor(z[k].copy(), name=k) for k in z.files}
            self._base = Model(c.model, base)
            return self._base
        log.info("pre-training base model (%d steps); cached at %s", c.base_steps, path)
        docs = pretraining_documents([gen_corpus(kind, count, c.corpus_seeds["pretrain"])
                                      for kind, count in sorted(c.base_mix.items()) if count])
        model = build_model(c.model, c.base_seed)
        if c.base_steps:
            model, _ = pretrain_base(model, docs, c.base_steps, c.base_lr, c.base_batch,
                                     c.base_seed, c.base_context)
        self.cache.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, **{k: v.data for k, v in model.base.items()})
        tmp.replace(path)
        self._base = model
        return model

    # -- phases ------------------------------------------------------------------

    def warmup_plan(self, m: int, seed: int) -> PhasePlan:
        c = self.config
        return PhasePlan("warmup", m, ObjectiveConfig("sft"), c.warmup_lr, c.warmup_epochs,
                         c.batch_size, seed, corpus="general")

    def adapt_plan(self, method: str, n: int, seed: int) -> PhasePlan:
        c = self.config
        return PhasePlan("adapt", n, c.objective(method), c.adapt_lr, c.epochs[method],
                         c.batch_size, seed, corpus=c.task)

    def warmup_dir(self, m: int, seed: int) -> Path:
        plan = self.warmup_plan(m, seed)
        key = _digest({"base": self.base_key(), "m": m, "seed": seed, "lr": plan.lr_max,
                       "epochs": plan.epochs, "batch": plan.batch_size,
                       "corpus_seed": self.config.corpus_seeds["general"]})
        return self.cache / f"warmup-{key}"

    def warmup(self, m: int, seed: int) -> Path:
        """Checkpoint of the warm-up phase; trained only if not cached already."""
        path = self.warmup_dir(m, seed)
        if (path / "manifest.json").exists():
            return path
        model = initialize(self.base(), InitSpec("vanilla", seed))
        state = run_phase(model, self.warmup_plan(m, seed), self.corpus("general", m, "general"))
        tmp = path.with_name(path.name + ".tmp")
        save_adapters(state.adapters, tmp, self.config.model,
                      {"phase": "warmup", "m": m, "seed": seed})
        tmp.replace(path)
        return path

    def init_model(self, scheme: str, m: int, seed: int) -> Model:
        if scheme == "d2lora":
            return initialize(self.base(), InitSpec("d2lora", seed, str(self.warmup(m, seed))))
        return initialize(self.base(), InitSpec(scheme, seed))

    def train(self, scheme: str, method: str, m: int, n: int, seed: int) -> Model:
        """One arm: initialize per ``scheme`` (warm-up if d2lora), then adapt on ``n`` task samples."""
        model = self.init_model(scheme, m, seed)
        run_phase(model, self.adapt_plan(method, n, seed), self.corpus(self.config.task, n, "task"))
        return model

    def evaluate_task(self, model: Model, seed: int) -> dict[str, float]:
        ev = self.corpus(self.config.task, self.config.eval_size, "eval")
        return {k: r.value for k, r in evaluate(model, ev, self.config.task, seed).items()}

    def evaluate_probe(self, model: Model, seed: int) -> float:
        return mcq_accuracy(model, self.corpus("mcq", self.config.probe_size, "probe"), seed).value


# ---------------------------------------------------------------- sweeps


def _arm_m(scheme: str, m: int) -> int:
    return m if scheme == "d2lora" else 0


def _run(spec: ExperimentSpec, cells, measure) -> Path:
    """Shared driver: iterate cells, write records as each finishes, then the manifest."""
    path = new_metrics_path(spec.output_dir, spec.experiment)
    manifest = RunManifest(spec.to_dict(), _versions(), dict(spec.lab.corpus_seeds), _now(),
                           metrics_file=path.name)
    lab = Lab(spec.lab, spec.cache)
    writer = MetricsWriter(path)
    try:
        for method, scheme, n, seed in cells:
            t0 = time.perf_counter()
            values = measure(lab, method, scheme, n, seed)
            wall = round(time.perf_counter() - t0, 3)
            for metric, value in values.items():
                writer.write(MetricsRecord(spec.experiment, method, scheme, _arm_m(scheme, spec.m),
                                           n, seed, metric, float(value), wall))
            log.info("%s %s %s n=%d seed=%d: %s", spec.experiment, method, scheme, n, seed, values)
    finally:
        writer.close()
        manifest.finished = _now()
        manifest.write(path.with_suffix(".manifest.json"))
    return path


def _cells(spec: ExperimentSpec):
    for method in spec.methods:
        for n in spec.n_grid:
            for seed in spec.seeds:
                for scheme in spec.init_schemes:
                    yield method, scheme, n, seed


def _task_measure(lab: Lab, method: str, scheme: str, n: int, seed: int, m: int) -> dict:
    return lab.evaluate_task(lab.train(scheme, method, m, n, seed), seed)


def run_data_scaling(spec: ExperimentSpec) -> Path:
    """Task metric of plain adapters as the task sample count grows."""
    if spec.experiment != "data_scaling":
        raise ConfigError("run_data_scaling needs a data_scaling spec")
    return _run(spec, _cells(spec), lambda lab, *cell: _task_measure(lab, *cell, spec.m))


def run_effectiveness(spec: ExperimentSpec) -> Path:
    """Warm-up-initialized vs plain adapters, paired per (method, n, seed)."""
    if spec.experiment != "effectiveness":
        raise ConfigError("run_effectiveness needs an effectiveness spec")
    if "d2lora" in spec.init_schemes and spec.m <= 0:
        raise ConfigError("effectiveness runs need m > 0")
    return _run(spec, _cells(spec), lambda lab, *cell: _task_measure(lab, *cell, spec.m))


def run_forgetting(spec: ExperimentSpec) -> Path:
    """General-knowledge probe accuracy after each task-adaptation size."""
    if spec.experiment != "forgetting":
        raise ConfigError("run_forgetting needs a forgetting spec")

    def measure(lab, method, scheme, n, seed):
        return {"mcq_accuracy": lab.evaluate_probe(lab.train(scheme, method, spec.m, n, seed), seed)}

    return _run(spec, _cells(spec), measure)


def run_scarce(spec: ExperimentSpec) -> Path:
    """Small-sample comparison (ORPO by default) over n up to 1000."""
    if spec.experiment != "scarce":
        raise ConfigError("run_scarce needs a scarce spec")
    too_big = [n for n in spec.n_grid if not 1 <= n <= SCARCE_LIMIT]
    if too_big:
        raise ConfigError(f"scarce-data grid must lie in [1, {SCARCE_LIMIT}], got {too_big}")
    return _run(spec, _cells(spec), lambda lab, *cell: _task_measure(lab, *cell, spec.m))


RUNNERS = {"data_scaling": run_data_scaling, "effectiveness": run_effectiveness,
           "forgetting": run_forgetting, "scarce": run_scarce}


def run_experiment(spec: ExperimentSpec) -> Path:
    return RUNNERS[spec.experiment](spec)
