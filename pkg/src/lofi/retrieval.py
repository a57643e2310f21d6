"""Flat cosine-similarity index, top-k search, sub-report splitting and R@K."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Set

import numpy as np

INDEX_MAGIC = b"LOFIIDX\x00"
INDEX_VERSION = 1
RECALL_KS = (1, 5, 10, 20, 40)


@dataclass(frozen=True)
class RankingResult:
    query_id: Hashable
    ids: tuple
    scores: tuple


class EmbeddingIndex:
    """Immutable set of unit-norm rows keyed by unique ids."""

    def __init__(self, vectors: np.ndarray, ids: Sequence, metadata: Optional[Sequence[dict]] = None):
        self._vectors = vectors
        self._vectors.setflags(write=False)
        self.ids = tuple(ids)
        self.metadata = tuple(metadata) if metadata is not None else tuple({} for _ in self.ids)
        self._order = {i: n for n, i in enumerate(self.ids)}

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self._vectors.shape[1]

    def vector(self, id_) -> np.ndarray:
        return self._vectors[self._order[id_]]

    def save(self, path) -> None:
        """Flat binary: magic, header (version, N, d), id table, float64 rows."""
        with open(path, "wb") as fh:
            fh.write(INDEX_MAGIC)
            fh.write(struct.pack("<IQI", INDEX_VERSION, len(self), self.dim))
            for i in self.ids:
                raw = str(i).encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
            fh.write(np.ascontiguousarray(self._vectors, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        with open(path, "rb") as fh:
            if fh.read(len(INDEX_MAGIC)) != INDEX_MAGIC:
                raise ValueError(f"{path} is not an embedding index")
            version, n, d = struct.unpack("<IQI", fh.read(16))
            if version != INDEX_VERSION:
                raise ValueError(f"unsupported index version {version}")
            ids = []
            for _ in range(n):
                (ln,) = struct.unpack("<I", fh.read(4))
                ids.append(fh.read(ln).decode("utf-8"))
            vecs = np.frombuffer(fh.read(n * d * 8), dtype="<f8").reshape(n, d).astype(np.float64)
        return cls(vecs, ids)


def build_index(embeddings, ids: Sequence, metadata: Optional[Sequence[dict]] = None) -> EmbeddingIndex:
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids in index")
    vecs = np.asarray(embeddings, dtype=np.float64)
    if len(ids) == 0:
        d = vecs.shape[1] if vecs.ndim == 2 else 0
        return EmbeddingIndex(np.zeros((0, d)), [], metadata)
    if vecs.ndim != 2 or vecs.shape[0] != len(ids):
        raise ValueError(f"embeddings of shape {vecs.shape} do not match {len(ids)} ids")
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(vecs)):
        raise ValueError("embeddings must be finite and non-zero")
    return EmbeddingIndex(vecs / norms, ids, metadata)


def cosine_scores(index: EmbeddingIndex, query) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"query of shape {q.shape} does not match index dim {index.dim}")
    q = q / np.linalg.norm(q)
    return index.vectors @ q


def rank_scores(ids: Sequence, scores: np.ndarray, k: Optional[int] = None, query_id=None) -> RankingResult:
    """Sort by descending score, ascending id on ties."""
    order = sorted(range(len(ids)), key=lambda n: (-scores[n], ids[n]))
    if k is not None:
        order = order[:k]
    return RankingResult(query_id, tuple(ids[n] for n in order), tuple(float(scores[n]) for n in order))


def topk(index: EmbeddingIndex, query, k: int, query_id=None) -> RankingResult:
    if len(index) == 0:
        raise ValueError("cannot query an empty index")
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = cosine_scores(index, query)
    return rank_scores(index.ids, scores, min(k, len(index)), query_id)


def split_subreports(sentences: Sequence[str], n: int = 5) -> List[List[str]]:
    if not sentences:
        raise ValueError("empty sentence list")
    if n < 1:
        raise ValueError("n must be >= 1")
    return [list(sentences[i:i + n]) for i in range(0, len(sentences), n)]


def recall_at_k(rankings: Sequence[RankingResult], relevant: Mapping[Hashable, Set], k: int,
                parent_of: Optional[Mapping] = None, queries: Optional[Sequence] = None) -> float:
    """Percent of queries with a relevant candidate in their top ``k``.

    Candidate ids are mapped through ``parent_of`` before the relevance test, so
    a hit on any sub-report counts for its parent report. ``queries`` defaults
    to every key of ``relevant``; each must have a ranking.
    """
    by_query = {r.query_id: r for r in rankings}
    queries = list(relevant) if queries is None else list(queries)
    if not queries:
        raise ValueError("no queries to score")
    hits = 0
    for q in queries:
        if q not in by_query:
            raise KeyError(f"query {q!r} missing from rankings")
        rel = relevant[q]
        if not rel:
            raise ValueError(f"query {q!r} has no relevant candidates")
        top = by_query[q].ids[:k]
        if parent_of is not None:
            top = [parent_of.get(c, c) for c in top]
        if any(c in rel for c in top):
            hits += 1
    return 100.0 * hits / len(queries)


def _report_level_ranking(query_id, sub_ids, sub_scores, parent_of) -> RankingResult:
    best: Dict = {}
    for sid, s in zip(sub_ids, sub_scores):
        p = parent_of[sid]
        if p not in best or s > best[p]:
            best[p] = s
    parents = list(best)
    return rank_scores(parents, np.array([best[p] for p in parents]), query_id=query_id)


def retrieval_eval(image_emb: np.ndarray, image_ids: Sequence, sub_emb: np.ndarray, sub_ids: Sequence,
                   sub_parent: Mapping, ks: Sequence[int] = RECALL_KS, t2i_mode: str = "max") -> Dict[str, Dict]:
    """Report-level image<->text retrieval with sub-report max pooling.

    Report ids must equal the id of the image they describe. ``t2i_mode``
    ``"max"`` scores each report by its best sub-report; ``"separate"`` queries
    every sub-report on its own and counts a report as hit if any sub-report is.
    """
    image_ids = list(image_ids)
    sub_ids = list(sub_ids)
    img = np.asarray(image_emb, dtype=np.float64)
    txt = np.asarray(sub_emb, dtype=np.float64)
    img = img / np.linalg.norm(img, axis=1, keepdims=True)
    txt = txt / np.linalg.norm(txt, axis=1, keepdims=True)
    sim = img @ txt.T

    i2t = [_report_level_ranking(q, sub_ids, sim[n], sub_parent) for n, q in enumerate(image_ids)]
    rel_i2t = {q: {q} for q in image_ids}

    reports = list(dict.fromkeys(sub_parent[s] for s in sub_ids))
    cols_of = {r: [n for n, s in enumerate(sub_ids) if sub_parent[s] == r] for r in reports}
    if t2i_mode == "max":
        t2i = [rank_scores(image_ids, sim[:, cols_of[r]].max(axis=1), query_id=r) for r in reports]
    elif t2i_mode == "separate":
        t2i = [rank_scores(image_ids, sim[:, n], query_id=s) for n, s in enumerate(sub_ids)]
    else:
        raise ValueError(f"unknown t2i_mode {t2i_mode!r}")

    out = {"i2t": {"direction": "i2t"}, "t2i": {"direction": "t2i"}}
    for k in ks:
        out["i2t"][f"R@{k}"] = recall_at_k(i2t, rel_i2t, k)
        if t2i_mode == "max":
            out["t2i"][f"R@{k}"] = recall_at_k(t2i, {r: {r} for r in reports}, k)
        else:
            by_sub = {r.query_id: r for r in t2i}
            hits = sum(any(rep in by_sub[sub_ids[n]].ids[:k] for n in cols_of[rep]) for rep in reports)
            out["t2i"][f"R@{k}"] = 100.0 * hits / len(reports)
    return out
