"""Synthetic corpora, JSONL ingestion, and the byte-level tokenizer.

Four corpus kinds stand in for the real datasets:

* ``math``: 2-4 operation integer word problems answered by an equation
  chain ending in ``boxed{answer}``; the rejected answer corrupts one step.
* ``title``: short pseudo-abstracts whose title is a deterministic keyword
  extraction.
* ``general``: a uniform mixture of instruction templates (arithmetic drills,
  keyword titles, word reversal) used for base pre-training and for the
  adapter warm-up.
* ``mcq``: knowledge-base questions with four candidate answers.

The knowledge base is fixed (independent of corpus seeds). Base pre-training
reads it as plain text; the warm-up mix never asks about it, so the
multiple-choice probe measures knowledge held by the base model.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError, EncodingError, ParseError

PAD_ID = 0
EOS_ID = 3
SEP_ID = 30
RESERVED_IDS = frozenset({PAD_ID, EOS_ID, SEP_ID})
VOCAB_SIZE = 256

CORPUS_KINDS = ("math", "title", "general", "mcq")
ANSWER_LIMIT = 10_000
# running values of generated chains stay single-digit so a desk-scale model can learn them
STEP_MAX = 9
# Bumped whenever generated content changes, so cached models built from it go stale.
GENERATOR_VERSION = 2
BOXED_HINT = "Answer in boxed{}."


# ---------------------------------------------------------------- tokenizer


def tokenize(text: str | bytes) -> list[int]:
    """UTF-8 bytes as ids. Reserved control bytes are rejected."""
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    ids = list(data)
    bad = RESERVED_IDS.intersection(ids)
    if bad:
        raise EncodingError(f"payload contains reserved id(s) {sorted(bad)}")
    return ids


def detokenize_bytes(ids: Sequence[int]) -> bytes:
    ids = [int(i) for i in ids]
    bad = RESERVED_IDS.intersection(ids)
    if bad:
        raise EncodingError(f"reserved id(s) {sorted(bad)} inside payload")
    if any(i < 0 or i >= VOCAB_SIZE for i in ids):
        raise EncodingError("id outside the byte range")
    return bytes(ids)


def detokenize(ids: Sequence[int]) -> str:
    return detokenize_bytes(ids).decode("utf-8", errors="replace")


def encode_prompt(text: str) -> list[int]:
    return tokenize(text) + [SEP_ID]


def encode_completion(text: str) -> list[int]:
    return tokenize(text) + [EOS_ID]


def decode_generation(ids: Sequence[int]) -> str:
    """Text of model output, dropping any reserved ids the model emitted."""
    return bytes(int(i) for i in ids if int(i) not in RESERVED_IDS).decode("utf-8", errors="replace")


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class PreferenceExample:
    prompt: str
    chosen: str
    rejected: str | None = None
    task_tag: str = "general"
    options: tuple[str, ...] | None = None
    answer_index: int | None = None
    answer: str | None = None

    def __post_init__(self):
        if not self.prompt or not self.chosen:
            raise DataError("prompt and chosen must be non-empty")
        if self.task_tag == "mcq":
            if self.options is None or len(self.options) != 4:
                raise DataError("mcq examples need exactly 4 options")
            if self.answer_index is None or not 0 <= self.answer_index < 4:
                raise DataError("mcq examples need an answer index in [0, 4)")
            if self.options[self.answer_index] != self.chosen:
                raise DataError("mcq chosen text must equal the correct option")

    def to_dict(self) -> dict:
        d = {"prompt": self.prompt, "chosen": self.chosen, "task_tag": self.task_tag}
        if self.rejected is not None:
            d["rejected"] = self.rejected
        if self.options is not None:
            d["options"] = list(self.options)
            d["answer_index"] = self.answer_index
        if self.answer is not None:
            d["answer"] = self.answer
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PreferenceExample":
        opts = d.get("options")
        return cls(d["prompt"], d["chosen"], d.get("rejected"), d.get("task_tag", "general"),
                   tuple(opts) if opts is not None else None, d.get("answer_index"), d.get("answer"))


@dataclass
class Corpus:
    examples: list[PreferenceExample]
    seed: int | None = None
    task_tag: str = "general"

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[PreferenceExample]:
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def head(self, n: int) -> "Corpus":
        return Corpus(self.examples[:n], self.seed, self.task_tag)

    def to_jsonl(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for ex in self.examples:
                fh.write(json.dumps(ex.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
        return path


# ---------------------------------------------------------------- vocabulary

_NAMES = ["Ann", "Ben", "Cal", "Dee", "Eli", "Fay", "Gus", "Ida", "Jo", "Kai",
          "Lea", "Max", "Ned", "Ola", "Pip", "Rex", "Sue", "Tom", "Uma", "Viv"]
_ITEMS = ["pens", "cups", "eggs", "pots", "hats", "keys", "rugs", "jars", "bats", "nuts"]

_TOPICS = ["tariffs", "inflation", "automation", "migration", "credit", "tourism",
           "subsidies", "unions", "housing", "energy", "banking", "trade"]
_OUTCOMES = ["wages", "exports", "prices", "savings", "output", "rents",
             "profits", "jobs", "imports", "growth"]
_REGIONS = ["Asia", "Europe", "Africa", "Chile", "Texas", "Canada", "Brazil", "India",
            "Japan", "Peru"]
_METHODS = ["panel", "survey", "census", "firm", "bank", "trade"]
_STOPWORDS = frozenset(
    "a an and are as at by data for from in is of on or that the this to we with using show "
    "study find effect effects strongest raises lowers shifts".split()
)

_SYLLABLES = ["ka", "lo", "mi", "ru", "ze", "ta", "vo", "ni", "pe", "su", "da", "fi", "go", "ha"]


def _pseudo_word(rng: np.random.Generator, n_syll: int) -> str:
    return "".join(rng.choice(_SYLLABLES, n_syll)).capitalize()


def _build_knowledge_base(n_entities: int = 64, seed: int = 20240601):
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    countries, capitals = [], []
    while len(countries) < n_entities:
        w = _pseudo_word(rng, 3)
        if w not in seen:
            seen.add(w)
            countries.append(w)
    while len(capitals) < n_entities:
        w = _pseudo_word(rng, 2)
        if w not in seen:
            seen.add(w)
            capitals.append(w)
    return list(zip(countries, capitals))


KNOWLEDGE_BASE: list[tuple[str, str]] = _build_knowledge_base()


# ---------------------------------------------------------------- math


@dataclass(frozen=True)
class ArithmeticChain:
    start: int
    ops: tuple[tuple[str, int], ...]

    def values(self, corrupt_at: int | None = None, offset: int = 0) -> list[int]:
        vals = [self.start]
        for k, (op, b) in enumerate(self.ops):
            v = vals[-1]
            v = v + b if op == "+" else v - b if op == "-" else v * b
            if k == corrupt_at:
                v += offset
            vals.append(v)
        return vals

    @property
    def answer(self) -> int:
        return self.values()[-1]

    def solution(self, corrupt_at: int | None = None, offset: int = 0) -> str:
        vals = self.values(corrupt_at, offset)
        steps = [f"{vals[k]}{op}{b}={vals[k + 1]}." for k, (op, b) in enumerate(self.ops)]
        return " ".join(steps) + f" boxed{{{vals[-1]}}}"

    def expression(self) -> str:
        """Left-to-right form, e.g. ``2 +8 *2``."""
        return str(self.start) + "".join(f" {op}{b}" for op, b in self.ops)


def _random_chain(rng: np.random.Generator, n_ops: int) -> ArithmeticChain:
    """Chain whose running value stays within [0, STEP_MAX] at every step."""
    v = int(rng.integers(1, STEP_MAX + 1))
    start = v
    ops = []
    for _ in range(n_ops):
        choices = [op for op, ok in (("+", v < STEP_MAX), ("-", v > 0), ("*", 0 < 2 * v <= STEP_MAX)) if ok]
        op = str(rng.choice(choices))
        if op == "+":
            b = int(rng.integers(1, STEP_MAX - v + 1))
            v += b
        elif op == "-":
            b = int(rng.integers(1, v + 1))
            v -= b
        else:
            b = 3 if 3 * v <= STEP_MAX and rng.random() < 0.5 else 2
            v *= b
        ops.append((op, b))
    chain = ArithmeticChain(start, tuple(ops))
    assert 0 <= chain.answer <= ANSWER_LIMIT
    return chain


def _rejected_solution(chain: ArithmeticChain, rng: np.random.Generator) -> str:
    at = int(rng.integers(0, len(chain.ops)))
    offset = int(rng.integers(1, 4))
    return chain.solution(at, offset)


def _math_example(rng: np.random.Generator) -> PreferenceExample:
    chain = _random_chain(rng, int(rng.integers(2, 5)))
    name = str(rng.choice(_NAMES))
    item = str(rng.choice(_ITEMS))
    parts = [f"{name} has {chain.start} {item}."]
    for op, b in chain.ops:
        if op == "+":
            parts.append(f"Gets {b} more.")
        elif op == "-":
            parts.append(f"Loses {b}.")
        else:
            parts.append(f"Then {'doubles' if b == 2 else 'triples'} them.")
    parts.append(f"How many {item}? {BOXED_HINT}")
    return PreferenceExample(" ".join(parts), chain.solution(), _rejected_solution(chain, rng),
                             "math", answer=str(chain.answer))


# ---------------------------------------------------------------- titles


def keywords(text: str, k: int = 3) -> list[str]:
    """Top-k content words by frequency, ties broken by first occurrence,
    returned in order of first occurrence."""
    words = re.findall(r"[A-Za-z]+", text)
    counts: dict[str, int] = {}
    first: dict[str, int] = {}
    surface: dict[str, str] = {}
    for i, w in enumerate(words):
        key = w.lower()
        if key in _STOPWORDS:
            continue
        counts[key] = counts.get(key, 0) + 1
        first.setdefault(key, i)
        surface.setdefault(key, w)
    top = sorted(counts, key=lambda w: (-counts[w], first[w]))[:k]
    return [surface[w] for w in sorted(top, key=lambda w: first[w])]


def extract_title(text: str) -> str:
    return " ".join(w[:1].upper() + w[1:] for w in keywords(text))


_ABSTRACT_TEMPLATES = [
    "We study {t} in {r}. Using {m} data, {t} raises {o} in {r}; {o} grow.",
    "This paper links {t} to {o}. With {m} data from {r}, {t} lowers {o} in {r}.",
    "How does {t} shape {o} in {r}? {m} data show {t} shifts {o} across {r}.",
]


def _title_example(rng: np.random.Generator) -> PreferenceExample:
    tmpl = _ABSTRACT_TEMPLATES[int(rng.integers(len(_ABSTRACT_TEMPLATES)))]
    t, o = str(rng.choice(_TOPICS)), str(rng.choice(_OUTCOMES))
    r, m = str(rng.choice(_REGIONS)), str(rng.choice(_METHODS))
    if m == t:
        m = "survey"
    text = tmpl.format(t=t, o=o, r=r, m=m)
    text = text[0].upper() + text[1:]
    return PreferenceExample(f"Title: {text}", extract_title(text), None, "title")


# ---------------------------------------------------------------- general mix


def _general_arith(rng):
    chain = _random_chain(rng, int(rng.integers(1, 4)))
    return PreferenceExample(f"Compute in order: {chain.expression()}. {BOXED_HINT}", chain.solution(),
                             _rejected_solution(chain, rng), "general", answer=str(chain.answer))


def _kb_question(country: str) -> str:
    return f"Question: What is the capital of {country}? Answer:"


def knowledge_statement(country: str, capital: str) -> str:
    return f"The capital of {country} is {capital}."


def _general_keywords(rng):
    a, b = str(rng.choice(_TOPICS)), str(rng.choice(_OUTCOMES))
    c = str(rng.choice(_REGIONS))
    text = f"Notes on {a} and {b}: {a} moves {b} in {c}, says {c}."
    rejected = " ".join(w.capitalize() for w in (b, a, c))
    return PreferenceExample(f"Title: {text}", extract_title(text), rejected, "general")


def _general_reverse(rng):
    words = [str(w) for w in rng.choice(_TOPICS + _OUTCOMES + _ITEMS, int(rng.integers(2, 5)),
                                        replace=False)]
    return PreferenceExample(f"Reverse: {' '.join(words)}", " ".join(reversed(words)),
                             " ".join(words), "general")


_GENERAL_MAKERS = (_general_arith, _general_keywords, _general_reverse)


def _general_example(rng: np.random.Generator) -> PreferenceExample:
    return _GENERAL_MAKERS[int(rng.integers(len(_GENERAL_MAKERS)))](rng)


# ---------------------------------------------------------------- mcq


def _mcq_example(rng: np.random.Generator) -> PreferenceExample:
    i = int(rng.integers(len(KNOWLEDGE_BASE)))
    country, capital = KNOWLEDGE_BASE[i]
    others = [c for k, (_, c) in enumerate(KNOWLEDGE_BASE) if k != i]
    picks = [others[k] for k in rng.choice(len(others), 3, replace=False)]
    pos = int(rng.integers(4))
    options = picks[:pos] + [capital] + picks[pos:]
    wrong = options[(pos + 1) % 4]
    return PreferenceExample(_kb_question(country), capital, wrong, "mcq", tuple(options), pos)


# ---------------------------------------------------------------- raw text


_BOXED_TAIL = re.compile(r"\s*boxed\{([^{}]*)\}\s*$")


def raw_documents(ex: PreferenceExample) -> list[str]:
    """Plain-text renderings of an example for base-model pre-training.

    The content of prompt and answer appears as ordinary prose, not in the
    prompt/separator/answer layout the adapters are trained on: the boxed-answer
    hint is dropped, a final ``boxed{N}`` becomes ``So N.`` and a newline
    stands where the separator token would go. Capital-city questions also
    yield the fact as a declarative statement.
    """
    prompt = ex.prompt.replace(" " + BOXED_HINT, "").strip()
    answer = _BOXED_TAIL.sub(lambda m: f" So {m.group(1)}.", ex.chosen).strip()
    doc = f"{prompt}\n{answer}"
    statement = _kb_statements().get(ex.prompt)
    return [statement, doc] if statement else [doc]


def _kb_statements() -> dict[str, str]:
    return {_kb_question(c): knowledge_statement(c, k) for c, k in KNOWLEDGE_BASE}


_MAKERS = {"math": _math_example, "title": _title_example, "general": _general_example,
           "mcq": _mcq_example}


def gen_corpus(kind: str, size: int, seed: int) -> Corpus:
    """Deterministic synthetic corpus: (kind, size, seed) fixes every byte."""
    if kind not in _MAKERS:
        raise ConfigError(f"unknown corpus kind {kind!r}; expected one of {CORPUS_KINDS}")
    if size < 1:
        raise ConfigError(f"corpus size must be at least 1, got {size}")
    rng = np.random.default_rng([int(seed), CORPUS_KINDS.index(kind)])
    return Corpus([_MAKERS[kind](rng) for _ in range(size)], seed, kind)


# ---------------------------------------------------------------- ingestion

JSONL_SCHEMAS = {
    "step_dpo": ("prompt", "chosen", "rejected"),
    "econ_title": ("text", "title"),
}


def load_jsonl(path, schema: str) -> Corpus:
    """Read newline-delimited JSON in one of the supported schemas.

    ``step_dpo`` rows carry ``prompt``/``chosen``/``rejected`` and become math
    examples; ``econ_title`` rows carry ``text``/``title`` and become title
    examples with the abstract as prompt.
    """
    if schema not in JSONL_SCHEMAS:
        raise ConfigError(f"unknown schema {schema!r}; expected one of {sorted(JSONL_SCHEMAS)}")
    required = JSONL_SCHEMAS[schema]
    raw = Path(path).read_bytes()
    examples = []
    for lineno, line in enumerate(raw.split(b"\n"), start=1):
        if not line.strip():
            continue
        try:
            text = line.decode("utf-8")
        except UnicodeDecodeError as e:
            raise EncodingError(f"line {lineno}: invalid UTF-8 ({e.reason})") from e
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON ({e.msg})", lineno) from e
        if not isinstance(obj, dict):
            raise ParseError("expected a JSON object", lineno)
        missing = [k for k in required if not isinstance(obj.get(k), str)]
        if missing:
            raise ParseError(f"missing field(s) {', '.join(missing)}", lineno)
        try:
            if schema == "step_dpo":
                from .metrics import extract_boxed

                examples.append(PreferenceExample(obj["prompt"], obj["chosen"], obj["rejected"], "math",
                                                  answer=extract_boxed(obj["chosen"])))
            else:
                examples.append(PreferenceExample(obj["text"], obj["title"], None, "title"))
        except DataError as e:
            raise ParseError(str(e), lineno) from e
    return Corpus(examples, None, "math" if schema == "step_dpo" else "title")


def iter_chunks(items: Sequence, size: int):
    for i in range(0, len(items), size):
        yield items[i:i + size]
