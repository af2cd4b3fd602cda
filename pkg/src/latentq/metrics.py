"""Evaluation: tail-extraction P/R/F1, macro relation-classification scores,
and perplexity of a sequence model on an input/output corpus.

Matching is case-insensitive exact string equality after trimming
surrounding whitespace; the literal "NO_ANSWER" is the null prediction.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .seqmodel import ConditionalSeqModel
from .vocab import NO_ANSWER_TOKEN


def _norm(s: str) -> str:
    return s.strip().lower()


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass(frozen=True)
class TEMetrics:
    precision: float
    recall: float
    f1: float
    tp: int
    predicted_non_null: int
    gold_positive: int

    def to_json(self) -> dict:
        return {
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "tp": self.tp, "predicted_non_null": self.predicted_non_null,
            "gold_positive": self.gold_positive,
        }


@dataclass(frozen=True)
class ZREMetrics:
    per_relation: dict[str, dict[str, float]]
    macro_precision: float
    macro_recall: float
    macro_f1: float

    def to_json(self) -> dict:
        return {
            "per_relation": self.per_relation,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
        }


def te_score(
    preds: Sequence[str], golds: Sequence[Sequence[str] | None]
) -> TEMetrics:
    """Tail-extraction scores.

    golds[i] is the accepted-answer list of a positive example or None for a
    negative. A prediction counts as non-null unless it is "NO_ANSWER"; a
    true positive is a non-null prediction matching any accepted answer of a
    positive example.
    """
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(golds)} golds")
    tp = 0
    predicted_non_null = 0
    gold_positive = 0
    for pred, gold in zip(preds, golds):
        is_null = _norm(pred) == _norm(NO_ANSWER_TOKEN)
        if not is_null:
            predicted_non_null += 1
        if gold is None:
            continue
        gold_positive += 1
        if not is_null and any(_norm(pred) == _norm(g) for g in gold):
            tp += 1
    p = tp / predicted_non_null if predicted_non_null else 0.0
    r = tp / gold_positive if gold_positive else 0.0
    return TEMetrics(p, r, _f1(p, r), tp, predicted_non_null, gold_positive)


def zre_score(pred_relations: Sequence[str], gold_relations: Sequence[str]) -> ZREMetrics:
    """Macro P/R/F1 over the gold relation types (positives only by contract)."""
    if len(pred_relations) != len(gold_relations):
        raise ValueError(
            f"length mismatch: {len(pred_relations)} predictions vs {len(gold_relations)} golds"
        )
    gold_types = sorted(set(gold_relations))
    per: dict[str, dict[str, float]] = {}
    for rel in gold_types:
        correct = sum(1 for p, g in zip(pred_relations, gold_relations) if p == g == rel)
        predicted = sum(1 for p in pred_relations if p == rel)
        gold_n = sum(1 for g in gold_relations if g == rel)
        p = correct / predicted if predicted else 0.0
        r = correct / gold_n if gold_n else 0.0
        per[rel] = {"precision": p, "recall": r, "f1": _f1(p, r)}
    n = len(gold_types)
    return ZREMetrics(
        per_relation=per,
        macro_precision=sum(v["precision"] for v in per.values()) / n if n else 0.0,
        macro_recall=sum(v["recall"] for v in per.values()) / n if n else 0.0,
        macro_f1=sum(v["f1"] for v in per.values()) / n if n else 0.0,
    )


def perplexity(
    model: ConditionalSeqModel,
    pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
) -> float:
    """exp(− Σ log_prob / Σ tokens) over (input, output) id pairs.

    Token counts include the terminating EOS, so a uniform model over V
    tokens scores exactly V.
    """
    if not pairs:
        raise ValueError("perplexity needs at least one pair")
    total_lp = 0.0
    total_tokens = 0
    for inp, out in pairs:
        total_lp += model.log_prob(inp, out)
        total_tokens += len(out)
    return math.exp(-total_lp / total_tokens)


@dataclass(frozen=True)
class EvalReport:
    te: TEMetrics | None = None
    zre: ZREMetrics | None = None

    def to_json(self) -> dict:
        out: dict = {}
        if self.te is not None:
            out["te"] = self.te.to_json()
        if self.zre is not None:
            out["zre"] = self.zre.to_json()
            out["per_relation"] = self.zre.per_relation
        return out

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["section", "name", "precision", "recall", "f1"])
            if self.te is not None:
                w.writerow(["te", "all", self.te.precision, self.te.recall, self.te.f1])
            if self.zre is not None:
                w.writerow([
                    "zre", "macro", self.zre.macro_precision,
                    self.zre.macro_recall, self.zre.macro_f1,
                ])
                for rel, v in sorted(self.zre.per_relation.items()):
                    w.writerow(["zre", rel, v["precision"], v["recall"], v["f1"]])
