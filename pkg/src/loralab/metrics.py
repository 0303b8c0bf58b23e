"""Evaluation: boxed-answer exact match, ROUGE-1/2/L, and multiple-choice accuracy."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .datagen import (EOS_ID, PreferenceExample, decode_generation, encode_completion, encode_prompt,
                      tokenize)
from .errors import DataError
from .kernels import lcs_length
from .model import Model, completion_logprobs, greedy_decode

ROUGE_VARIANTS = ("r1", "r2", "rl")
DECODE_CAP = 128

_BOXED = re.compile(r"boxed\{([^{}]*)\}")


@dataclass(frozen=True)
class EvalReport:
    task_tag: str
    metric: str
    value: float
    sample_count: int
    seed: int | None = None

    def __post_init__(self):
        if self.sample_count < 1:
            raise DataError("an evaluation needs at least one sample")
        if not 0.0 <= self.value <= 1.0:
            raise DataError(f"{self.metric}={self.value} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def extract_boxed(text: str) -> str | None:
    """Whitespace-trimmed content of the last ``boxed{...}`` span, or None."""
    spans = _BOXED.findall(text)
    return spans[-1].strip() if spans else None


def normalize_answer(ans: str | None) -> str | None:
    """Drop surrounding whitespace and leading zeros; nothing else."""
    if ans is None:
        return None
    s = ans.strip()
    sign = ""
    if s[:1] in "+-" and len(s) > 1:
        sign, s = s[0], s[1:]
    digits = s.lstrip("0")
    if s and not digits:
        digits = "0"
    if sign == "+":
        sign = ""
    return sign + digits


def _require(examples: Sequence[PreferenceExample], what: str) -> list[PreferenceExample]:
    examples = list(examples)
    if not examples:
        raise DataError(f"cannot compute {what} on an empty corpus")
    return examples


def generate(model: Model, prompts: Sequence[str], max_new_tokens: int = DECODE_CAP,
             batch_size: int = 64) -> list[str]:
    """Greedy completions (text up to the first end-of-sequence token)."""
    ids = greedy_decode(model, [encode_prompt(p) for p in prompts], max_new_tokens,
                        stop_id=EOS_ID, batch_size=batch_size)
    return [decode_generation(g) for g in ids]


def ground_truth(ex: PreferenceExample) -> str | None:
    return normalize_answer(ex.answer if ex.answer is not None else extract_boxed(ex.chosen))


def exact_match_accuracy(model: Model, eval_corpus, max_new_tokens: int = DECODE_CAP,
                         seed: int | None = None) -> EvalReport:
    """Fraction of prompts whose greedy output boxes the right integer.

    Outputs without a boxed span count as wrong.
    """
    examples = _require(eval_corpus, "exact-match accuracy")
    outputs = generate(model, [ex.prompt for ex in examples], max_new_tokens)
    hits = 0
    for ex, out in zip(examples, outputs):
        pred = normalize_answer(extract_boxed(out))
        hits += pred is not None and pred == ground_truth(ex)
    return EvalReport(examples[0].task_tag, "exact_match", hits / len(examples), len(examples), seed)


# ---------------------------------------------------------------- ROUGE


def _words(text: str) -> list[str]:
    return text.lower().split()


def _ngrams(words: list[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def _prf(overlap: float, n_cand: int, n_ref: int) -> tuple[float, float, float]:
    if n_cand == 0 or n_ref == 0 or overlap == 0:
        return 0.0, 0.0, 0.0
    p = overlap / n_cand
    r = overlap / n_ref
    return p, r, 2 * p * r / (p + r)


def _as_ids(words: list[str], vocab: dict[str, int]) -> np.ndarray:
    return np.array([vocab.setdefault(w, len(vocab)) for w in words], dtype=np.int64)


def rouge(candidate: str, reference: str, variant: str = "rl") -> tuple[float, float, float]:
    """(precision, recall, f1) on lowercased whitespace tokens.

    Args:
        candidate: Generated text.
        reference: Ground-truth text.
        variant: ``r1`` (clipped unigram overlap), ``r2`` (clipped bigram
            overlap) or ``rl`` (longest common subsequence).

    Returns:
        Three floats in [0, 1]; all zero when either side is empty.
    """
    if variant not in ROUGE_VARIANTS:
        raise DataError(f"unknown ROUGE variant {variant!r}; expected one of {ROUGE_VARIANTS}")
    c, r = _words(candidate), _words(reference)
    if variant == "rl":
        if not c or not r:
            return 0.0, 0.0, 0.0
        vocab: dict[str, int] = {}
        return _prf(lcs_length(_as_ids(c, vocab), _as_ids(r, vocab)), len(c), len(r))
    n = 1 if variant == "r1" else 2
    cg, rg = _ngrams(c, n), _ngrams(r, n)
    overlap = sum((cg & rg).values())
    return _prf(overlap, sum(cg.values()), sum(rg.values()))


def rouge_reports(model: Model, eval_corpus, max_new_tokens: int = DECODE_CAP,
                  seed: int | None = None) -> dict[str, EvalReport]:
    """Mean ROUGE-1/2/L F1 of greedy outputs against the chosen completions."""
    examples = _require(eval_corpus, "ROUGE")
    outputs = generate(model, [ex.prompt for ex in examples], max_new_tokens)
    tag = examples[0].task_tag
    out = {}
    for variant in ROUGE_VARIANTS:
        f1 = [rouge(o, ex.chosen, variant)[2] for o, ex in zip(outputs, examples)]
        name = {"r1": "rouge1_f1", "r2": "rouge2_f1", "rl": "rougeL_f1"}[variant]
        out[name] = EvalReport(tag, name, float(np.mean(f1)), len(examples), seed)
    return out


# ---------------------------------------------------------------- multiple choice


def mcq_context(prompt: str) -> list[int]:
    """Plain-text context for scoring an option: the question, then a newline.

    Options are scored as continuations of ordinary text, not through the
    instruction separator, so the probe measures stored knowledge rather than
    familiarity with the prompt layout.
    """
    return tokenize(prompt + "\n")


def mcq_predictions(model: Model, eval_corpus, batch_size: int = 64) -> list[int]:
    """Index of the option with the highest mean token log-probability (lowest index on ties)."""
    examples = _require(eval_corpus, "multiple-choice accuracy")
    for k, ex in enumerate(examples):
        if ex.options is None or len(ex.options) != 4:
            raise DataError(f"item {k} does not carry exactly 4 options")
    # score each distinct (prompt, option) once so duplicate options tie exactly
    keys = [(ex.prompt, o) for ex in examples for o in ex.options]
    unique = list(dict.fromkeys(keys))
    pairs = [(mcq_context(p), encode_completion(o)) for p, o in unique]
    scores = []
    with ad.no_grad():
        for start in range(0, len(pairs), batch_size * 4):
            scores.append(completion_logprobs(model, pairs[start:start + batch_size * 4], "mean").data)
    lookup = dict(zip(unique, np.concatenate(scores)))
    table = np.array([lookup[k] for k in keys]).reshape(len(examples), 4)
    # argmax returns the first maximal index, which is the tie-break we want
    return [int(np.argmax(row)) for row in table]


def mcq_accuracy(model: Model, eval_corpus, seed: int | None = None) -> EvalReport:
    examples = _require(eval_corpus, "multiple-choice accuracy")
    preds = mcq_predictions(model, examples)
    hits = sum(int(p == ex.answer_index) for p, ex in zip(preds, examples))
    return EvalReport("mcq", "mcq_accuracy", hits / len(examples), len(examples), seed)


def evaluate(model: Model, eval_corpus, task_tag: str, seed: int | None = None) -> dict[str, EvalReport]:
    """Headline reports for a task: exact match (math), ROUGE (title) or mcq accuracy."""
    if task_tag == "math":
        return {"exact_match": exact_match_accuracy(model, eval_corpus, seed=seed)}
    if task_tag == "title":
        return rouge_reports(model, eval_corpus, seed=seed)
    if task_tag == "mcq":
        return {"mcq_accuracy": mcq_accuracy(model, eval_corpus, seed=seed)}
    raise DataError(f"no evaluation defined for task {task_tag!r}")
