# =====================================================
# utils/retrieval_eval.py
# =====================================================

"""Composed-query inference, cosine ranking and Recall@K reporting."""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Set

import numpy as np
import pandas as pd

from utils.embedding_store import l2_normalize, l2_normalize_rows
from utils.encoders import FrozenEncoders, PromptKind, build_prompt, text_forward
from utils.errors import EmptyTaskSetError, InvalidInputError, TemplateError
from utils.pcm import MappingParams, map_forward

logger = logging.getLogger(__name__)


class TemplateKind(str, Enum):
    DOMAIN_CONVERSION = "domain_conversion"
    OBJECT_COMPOSITION = "object_composition"
    SENTENCE_MANIPULATION = "sentence_manipulation"


_PROMPT_KIND = {
    TemplateKind.DOMAIN_CONVERSION: PromptKind.DOMAIN,
    TemplateKind.OBJECT_COMPOSITION: PromptKind.OBJECT,
    TemplateKind.SENTENCE_MANIPULATION: PromptKind.SENTENCE,
}


@dataclass(frozen=True)
class QueryTemplate:
    kind: TemplateKind
    tokens: tuple

    def validate(self):
        n = len(self.tokens)
        if self.kind == TemplateKind.DOMAIN_CONVERSION and n != 1:
            raise TemplateError(f"domain conversion takes exactly one domain tag, got {n}")
        if n < 1:
            raise TemplateError(f"{self.kind.value} needs at least one token")

    @classmethod
    def domain(cls, tag: int) -> "QueryTemplate":
        return cls(TemplateKind.DOMAIN_CONVERSION, (int(tag),))

    @classmethod
    def objects(cls, tags: Sequence[int]) -> "QueryTemplate":
        return cls(TemplateKind.OBJECT_COMPOSITION, tuple(int(t) for t in tags))

    @classmethod
    def sentence(cls, tokens: Sequence[int]) -> "QueryTemplate":
        return cls(TemplateKind.SENTENCE_MANIPULATION, tuple(int(t) for t in tokens))


@dataclass
class EvalQuery:
    query_id: str
    reference: np.ndarray
    template: QueryTemplate
    truth: Set[int]            # gallery indices
    truth_ids: List[str] = field(default_factory=list)


@dataclass
class EvalTaskSet:
    name: str
    queries: List[EvalQuery]
    gallery: np.ndarray
    gallery_ids: List[str]


@dataclass
class RetrievalReport:
    rows: List[Dict]
    metadata: Dict = field(default_factory=dict)

    def recall(self, task: str, k: int) -> float:
        for row in self.rows:
            if row["task"] == task and row["k"] == k:
                return row["recall"]
        raise KeyError(f"no row for task={task!r}, K={k}")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["task", "k", "recall", "queries"])

    def to_dict(self) -> Dict:
        return {"metadata": self.metadata, "rows": self.rows}


def build_query_prompt(pseudo_token: Optional[np.ndarray], template: QueryTemplate, encoders: FrozenEncoders):
    template.validate()
    return build_prompt(_PROMPT_KIND[template.kind], pseudo_token, list(template.tokens), encoders.vocab)


def compose_query(params: MappingParams, v_r: np.ndarray, template: QueryTemplate,
                  encoders: FrozenEncoders) -> np.ndarray:
    """Normalized text embedding of the template filled with S_* = f_M(v_r)."""
    template.validate()
    S, _ = map_forward(params, np.asarray(v_r, dtype=np.float64))
    seq = build_query_prompt(np.asarray(S, dtype=np.float64), template, encoders)
    return l2_normalize(text_forward(seq, encoders.text))


def rank_candidates(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """
    Gallery indices by descending cosine similarity; ties go to the lowest index.

    Args:
        query: Non-zero query embedding
        gallery: n x d candidate embeddings (no zero rows)

    Returns:
        np.ndarray: permutation of range(n)
    """
    gallery = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if gallery.shape[0] == 0:
        raise InvalidInputError("gallery must not be empty")
    gallery_hat, _ = l2_normalize_rows(gallery)
    scores = gallery_hat @ l2_normalize(query)
    return np.argsort(-scores, kind="stable")


def recall_at_k(rankings: Sequence[Sequence[int]], truth: Sequence[Iterable[int]], k: int) -> float:
    """
    Fraction of queries with at least one ground-truth index in their top-K.

    K larger than the gallery is clamped with a warning.
    """
    if k < 1:
        raise InvalidInputError(f"K must be >= 1, got {k}")
    if len(rankings) != len(truth):
        raise InvalidInputError("one truth set is required per ranking")
    if not rankings:
        raise EmptyTaskSetError("no rankings to score")
    hits = 0
    warned = False
    for ranked, targets in zip(rankings, truth):
        targets = set(int(t) for t in targets)
        if not targets:
            raise InvalidInputError("every query needs a non-empty truth set")
        kk = k
        if k > len(ranked):
            kk = len(ranked)
            if not warned:
                logger.warning(f"Recall@{k} exceeds gallery size {len(ranked)}; clamping")
                warned = True
        if targets.intersection(int(i) for i in ranked[:kk]):
            hits += 1
    return hits / len(rankings)


def evaluate(params: MappingParams, tasks: Sequence[EvalTaskSet], encoders: FrozenEncoders,
             ks: Sequence[int] = (1, 5, 10, 50), metadata: Optional[Dict] = None,
             include_average: bool = True) -> RetrievalReport:
    """
    Run compose_query -> rank_candidates -> recall_at_k for every task set.

    Args:
        params: Mapping parameters
        tasks: Task sets (synthetic or loaded from manifests)
        encoders: Frozen encoders
        ks: Recall cut-offs
        metadata: Extra report metadata (seed, config hash, ...)
        include_average: Add an ``average`` row per K (arithmetic mean over tasks)

    Returns:
        RetrievalReport
    """
    if not tasks:
        raise EmptyTaskSetError("evaluation needs at least one task set")
    rows = []
    for task in tasks:
        if not task.queries:
            raise EmptyTaskSetError(f"task {task.name!r} has no queries")
        rankings = [rank_candidates(compose_query(params, q.reference, q.template, encoders), task.gallery)
                    for q in task.queries]
        truth = [q.truth for q in task.queries]
        for k in sorted(ks):
            rows.append({"task": task.name, "k": int(k), "recall": recall_at_k(rankings, truth, k),
                         "queries": len(task.queries)})
        logger.info(f"Evaluated {task.name}: {len(task.queries)} queries, gallery {len(task.gallery_ids)}")
    if include_average and len(tasks) > 1:
        rows.extend(average_rows(rows, ks))
    return RetrievalReport(rows, dict(metadata or {}))


def average_rows(rows: Sequence[Dict], ks: Sequence[int]) -> List[Dict]:
    """Arithmetic mean of recall across tasks at each K."""
    out = []
    for k in sorted(ks):
        values = [r["recall"] for r in rows if r["k"] == k and r["task"] != "average"]
        if values:
            out.append({"task": "average", "k": int(k), "recall": float(np.mean(values)),
                        "queries": int(sum(r["queries"] for r in rows if r["k"] == k and r["task"] != "average"))})
    return out
