"""Similarity search over unit embeddings and the evaluation metrics.

Relevance throughout this package is class-match: a candidate is relevant to
a query iff it carries the query's class label. Image-to-image retrieval over
its own database excludes the query item itself. Rankings sort scores
descending with ties broken by ascending candidate index, so results are
stable across runs and platforms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ContractError, EvaluationError, LabelError, ShapeError
from .objectives import NUM_CLASSES

INDEX_MAGIC = b"EMBX"
INDEX_VERSION = 1


@dataclass
class EmbeddingIndex:
    ids: list[str]
    embeddings: np.ndarray  # (n, d), unit rows
    labels: Optional[np.ndarray] = None  # class ids, or None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        n = len(self.ids)
        if len(set(self.ids)) != n:
            raise ContractError("index ids must be unique")
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != n:
            raise ShapeError(
                f"embeddings shape {self.embeddings.shape} inconsistent with {n} ids")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ShapeError(f"labels shape {self.labels.shape} inconsistent with {n} ids")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class RankedResult:
    query_id: object
    candidate_ids: list
    scores: np.ndarray = field(repr=False)

    def rank_of(self, wanted: set) -> Optional[int]:
        """1-based rank of the first candidate in `wanted`, or None."""
        for pos, cid in enumerate(self.candidate_ids, start=1):
            if cid in wanted:
                return pos
        return None


@dataclass
class ClassificationReport:
    confusion: np.ndarray  # (num_classes, num_classes), rows = truth
    accuracy: float
    precision: float
    recall: float
    f1: float


def cosine_sim_matrix(q: np.ndarray, db: np.ndarray) -> np.ndarray:
    """Dot-product matrix; equals cosine similarity when rows are unit-norm."""
    q = np.asarray(q, dtype=np.float64)
    db = np.asarray(db, dtype=np.float64)
    if q.ndim != 2 or db.ndim != 2 or q.shape[1] != db.shape[1]:
        raise ShapeError(f"query width and database width differ: {q.shape} vs {db.shape}")
    return q @ db.T


def text_image_scores(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-softmax over text-image dot products; each row sums to 1."""
    raw = cosine_sim_matrix(u, v)
    e = np.exp(raw - raw.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def rank_queries(scores: np.ndarray, exclude_self: bool = False,
                 query_ids: Optional[Sequence] = None,
                 candidate_ids: Optional[Sequence] = None) -> list[RankedResult]:
    """Per-row descending ranking with stable ascending-index tie-break."""
    scores = np.asarray(scores, dtype=np.float64)
    m, n = scores.shape
    if exclude_self and m != n:
        raise ContractError(f"exclude_self needs a square score matrix, got {scores.shape}")
    if query_ids is None:
        query_ids = list(range(m))
    if candidate_ids is None:
        candidate_ids = list(range(n))
    results = []
    for i in range(m):
        order = np.argsort(-scores[i], kind="stable")
        if exclude_self:
            order = order[order != i]
        results.append(RankedResult(query_id=query_ids[i],
                                    candidate_ids=[candidate_ids[j] for j in order],
                                    scores=scores[i][order]))
    return results


def _relevant_for(result: RankedResult, relevant: Mapping) -> set:
    wanted = relevant.get(result.query_id)
    if not wanted:
        raise EvaluationError(f"query {result.query_id!r} has no relevant items")
    return set(wanted)


def recall_at_k(results: Sequence[RankedResult], relevant: Mapping, k: int) -> float:
    """Fraction of queries with any relevant candidate ranked in the top k."""
    if k < 1:
        raise EvaluationError(f"k must be >= 1, got {k}")
    if not results:
        raise EvaluationError("no queries to evaluate")
    hits = 0
    for res in results:
        wanted = _relevant_for(res, relevant)
        if any(cid in wanted for cid in res.candidate_ids[:k]):
            hits += 1
    return hits / len(results)


def mrr(results: Sequence[RankedResult], relevant: Mapping) -> float:
    """Mean reciprocal rank of the first relevant candidate (0 when absent)."""
    if not results:
        raise EvaluationError("no queries to evaluate")
    total = 0.0
    for res in results:
        rank = res.rank_of(_relevant_for(res, relevant))
        if rank is not None:
            total += 1.0 / rank
    return total / len(results)


def class_match_relevance(query_labels: Sequence[int], index: EmbeddingIndex,
                          exclude_self_ids: bool = False,
                          query_ids: Optional[Sequence] = None) -> dict:
    """Relevance sets mapping each query to index ids sharing its class."""
    if index.labels is None:
        raise EvaluationError("index carries no labels; class-match relevance undefined")
    if query_ids is None:
        query_ids = list(range(len(query_labels)))
    relevant = {}
    for qid, lab in zip(query_ids, query_labels):
        members = {index.ids[j] for j in np.flatnonzero(index.labels == lab)}
        if exclude_self_ids:
            members.discard(qid)
        relevant[qid] = members
    return relevant


def classification_report(pred: Sequence[int], truth: Sequence[int],
                          num_classes: int = NUM_CLASSES) -> ClassificationReport:
    """Confusion matrix plus accuracy and macro precision/recall/F1.

    Macro averages run over classes with nonzero support; a supported class
    that is never predicted contributes precision 0.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise EvaluationError(f"pred length {pred.shape} != truth length {truth.shape}")
    if pred.size == 0:
        raise EvaluationError("empty prediction set")
    for arr, name in ((pred, "pred"), (truth, "truth")):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise LabelError(f"{name} labels must lie in [0, {num_classes})")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(truth, pred):
        confusion[t, p] += 1
    accuracy = float(np.trace(confusion)) / pred.size
    precisions, recalls, f1s = [], [], []
    for c in range(num_classes):
        support = confusion[c].sum()
        if support == 0:
            continue
        predicted = confusion[:, c].sum()
        tp = confusion[c, c]
        p = tp / predicted if predicted > 0 else 0.0
        r = tp / support
        precisions.append(p)
        recalls.append(r)
        f1s.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    return ClassificationReport(confusion=confusion, accuracy=accuracy,
                                precision=float(np.mean(precisions)),
                                recall=float(np.mean(recalls)),
                                f1=float(np.mean(f1s)))


# ---------------------------------------------------------------------------
# binary index persistence
# ---------------------------------------------------------------------------

def save_index(index: EmbeddingIndex, path) -> None:
    """Write the versioned little-endian EMBX container."""
    n, d = index.embeddings.shape
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<III", INDEX_VERSION, n, d))
        for i in range(n):
            encoded = index.ids[i].encode("utf-8")
            label = int(index.labels[i]) if index.labels is not None else -1
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<i", label))
            fh.write(index.embeddings[i].astype("<f8").tobytes())


def load_index(path) -> EmbeddingIndex:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != INDEX_MAGIC:
            raise EvaluationError(f"not an embedding index: bad magic {magic!r}")
        version, n, d = struct.unpack("<III", fh.read(12))
        if version != INDEX_VERSION:
            raise EvaluationError(f"unsupported index version {version}")
        ids, labels = [], []
        embeddings = np.empty((n, d))
        for i in range(n):
            (id_len,) = struct.unpack("<I", fh.read(4))
            ids.append(fh.read(id_len).decode("utf-8"))
            (label,) = struct.unpack("<i", fh.read(4))
            labels.append(label)
            embeddings[i] = np.frombuffer(fh.read(8 * d), dtype="<f8")
    labels_arr = np.asarray(labels, dtype=np.int64)
    return EmbeddingIndex(ids=ids, embeddings=embeddings,
                          labels=None if np.all(labels_arr == -1) else labels_arr)
