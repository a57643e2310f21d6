"""Retrieval-based in-context grounding.

Demonstrations are (image, sentence, boxes) triples from a candidate pool,
ranked by cosine similarity of image embeddings. The decoder then sees one
block per demonstration followed by the query block and generates the box
string for the query sentence.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .boxkit import boxes_to_string, string_to_boxes
from .evalmetrics import EvalReport, evaluate_grounding
from .evaluate import embed_images
from .losses import ground_block
from .model import ContextOverflow, DecoderSeq, ImageRef, LoFiModel, block_length, generate
from .retrieval import EmbeddingIndex, build_index, cosine_scores, rank_scores
from .trainer import normalized_boxes

DEFAULT_K = 4
DEFAULT_MAX_LEN = 40


@dataclass(frozen=True)
class Triple:
    id: str
    sample_index: int
    sample_id: str
    sentence: str
    boxes: Tuple[Tuple[int, int, int, int], ...]


@dataclass
class DemonstrationSet:
    triples: List[Triple]
    scores: List[float]

    def __len__(self):
        return len(self.triples)


@dataclass
class CandidatePool:
    """Box-bearing pool triples and their image index.

    ``index`` holds one row per box-bearing image, keyed by sample index.
    Triples inherit the score of their image so sentences of one image tie
    exactly and are ordered by id.
    """

    samples: list
    triples: List[Triple]
    index: EmbeddingIndex

    def __len__(self):
        return len(self.triples)


def pool_triples(samples, image_size) -> List[Triple]:
    out = []
    for n, s in enumerate(samples):
        boxes = normalized_boxes(s, image_size)
        if boxes is None:
            continue
        for j, (sent, bl) in enumerate(zip(s.sentences, boxes)):
            if bl:
                out.append(Triple(f"{s.id}#{j}", n, s.id, sent, tuple(tuple(b) for b in bl)))
    return out


def build_pool(samples, encoder: LoFiModel, image_size=None) -> CandidatePool:
    image_size = image_size or encoder.cfg.image_size
    triples = pool_triples(samples, image_size)
    if not triples:
        raise ValueError("candidate pool has no box-bearing samples")
    used = sorted({t.sample_index for t in triples})
    emb = embed_images(encoder, [samples[i].image for i in used])
    return CandidatePool(list(samples), triples, build_index(emb, used))


def select_demonstrations(query, pool: CandidatePool, k: int, encoder: Optional[LoFiModel] = None,
                          query_id: Optional[str] = None, eval_mode: bool = True) -> DemonstrationSet:
    """Top-k pool triples by cosine similarity to the query image.

    ``query`` is an image (encoded with ``encoder``) or a precomputed embedding
    vector. In eval mode triples of the query's own sample are excluded.
    """
    if len(pool) == 0:
        raise ValueError("empty candidate pool")
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query.detach().cpu() if isinstance(query, torch.Tensor) else query, dtype=np.float64)
    if q.ndim == 2:
        if encoder is None:
            raise ValueError("an encoder is needed to embed a query image")
        q = embed_images(encoder, [q])[0]
    per_image = dict(zip(pool.index.ids, cosine_scores(pool.index, q)))
    scores = np.array([per_image[t.sample_index] for t in pool.triples])
    ranking = rank_scores([t.id for t in pool.triples], scores)
    by_id = {t.id: t for t in pool.triples}
    chosen, chosen_scores = [], []
    for tid, sc in zip(ranking.ids, ranking.scores):
        t = by_id[tid]
        if eval_mode and query_id is not None and t.sample_id == query_id:
            continue
        chosen.append(t)
        chosen_scores.append(sc)
        if len(chosen) == k:
            break
    if eval_mode and query_id is not None:
        assert all(t.sample_id != query_id for t in chosen), "demonstration leaked the query sample"
    return DemonstrationSet(chosen, chosen_scores)


def demo_block(model: LoFiModel, img: ImageRef, sentence: str, boxes) -> list:
    tok = model.tokenizer
    return ground_block(model, img, sentence) + [tok.encode(boxes_to_string(boxes)), [tok.sep_id]]


def assemble_context(model: LoFiModel, demos: DemonstrationSet, demo_refs: Sequence[ImageRef],
                     query_ref: ImageRef, query_sentence: str, reserve: int = 0) -> Tuple[DecoderSeq, int]:
    """Demo blocks in retrieval order, then the query block.

    Lowest-ranked demonstrations are dropped until the context plus
    ``reserve`` generated tokens fits the decoder; returns ``(seq, n_dropped)``.
    """
    cap = model.cfg.context_cap
    nq = model.cfg.n_queries
    query_block = ground_block(model, query_ref, query_sentence)
    blocks = [demo_block(model, r, t.sentence, t.boxes) for t, r in zip(demos.triples, demo_refs)]
    qlen = block_length(query_block, nq)
    if qlen + reserve > cap:
        raise ContextOverflow(f"query block of {qlen} tokens does not fit context cap {cap}")
    dropped = 0
    while blocks and sum(block_length(b, nq) for b in blocks) + qlen + reserve > cap:
        blocks.pop()
        dropped += 1
    return DecoderSeq(blocks + [query_block]), dropped


@dataclass
class GroundingTrace:
    query_id: str
    sentence: str
    demo_ids: List[str]
    demo_scores: List[float]
    context_length: int
    dropped: int
    raw: str
    boxes: List[Tuple[int, int, int, int]]
    malformed: bool
    gt: List = field(default_factory=list)


def _queries(samples, image_size):
    out = []
    for n, s in enumerate(samples):
        boxes = normalized_boxes(s, image_size)
        if boxes is None:
            continue
        for j, (sent, bl) in enumerate(zip(s.sentences, boxes)):
            if bl:
                out.append((f"{s.id}#{j}", n, sent, [tuple(b) for b in bl]))
    return out


@torch.no_grad()
def run_icl(model: LoFiModel, query_samples, pool_samples=None, k: int = DEFAULT_K,
            encoder: Optional[LoFiModel] = None, eval_mode: bool = True, max_len: int = DEFAULT_MAX_LEN,
            batch_size: int = 32, queries=None) -> List[GroundingTrace]:
    """Ground every box-bearing sentence of ``query_samples``.

    ``k=0`` (or no pool) is plain grounding. Demonstrations are selected with
    ``encoder`` (defaults to ``model``) and decoded by ``model``.
    """
    model.eval()
    encoder = encoder or model
    size = model.cfg.image_size
    queries = queries if queries is not None else _queries(query_samples, size)
    use_icl = k > 0 and pool_samples is not None
    q_emb, q_pooled = embed_images(model, [s.image for s in query_samples], with_pooled=True)
    bank = q_pooled
    pool = None
    if use_icl:
        pool = build_pool(pool_samples, encoder, size)
        q_emb = embed_images(encoder, [s.image for s in query_samples]) if encoder is not model else q_emb
        _, p_pooled = embed_images(model, [s.image for s in pool_samples], with_pooled=True)
        bank = torch.cat([q_pooled, p_pooled])
    n_q = len(query_samples)

    traces: List[GroundingTrace] = []
    seqs = []
    for qid, n, sent, gt in queries:
        if use_icl:
            demos = select_demonstrations(q_emb[n], pool, k, query_id=query_samples[n].id, eval_mode=eval_mode)
        else:
            demos = DemonstrationSet([], [])
        refs = [ImageRef(n_q + t.sample_index) for t in demos.triples]
        seq, dropped = assemble_context(model, demos, refs, ImageRef(n), sent, reserve=max_len)
        kept = len(demos) - dropped
        seqs.append(seq)
        traces.append(GroundingTrace(qid, sent, [t.id for t in demos.triples[:kept]], demos.scores[:kept],
                                     seq.cond_length(model.cfg.n_queries), dropped, "", [], False, gt))
    for i in range(0, len(seqs), batch_size):
        outs = generate(model, seqs[i:i + batch_size], bank, max_len)
        for tr, ids in zip(traces[i:i + batch_size], outs):
            tr.raw = model.tokenizer.decode(ids)
            tr.boxes, tr.malformed = string_to_boxes(tr.raw)
    return traces


def ground_with_icl(query_image, query_sentence: str, pool_samples, k: int, model: LoFiModel,
                    encoder: Optional[LoFiModel] = None, query_id: Optional[str] = None,
                    max_len: int = DEFAULT_MAX_LEN, return_trace: bool = False):
    """Predicted normalized boxes for one (image, sentence) query."""
    if model is None:
        raise ValueError("a trained model is required")
    from .synthgen import Sample

    q = Sample(image=np.asarray(query_image, dtype=np.float32), sentences=[query_sentence], id=query_id or "query")
    queries = [(f"{q.id}#0", 0, query_sentence, [])]
    tr = run_icl(model, [q], pool_samples, k, encoder, eval_mode=query_id is not None, max_len=max_len,
                 queries=queries)[0]
    return (tr.boxes, tr) if return_trace else tr.boxes


def evaluate_icl(model: LoFiModel, query_samples, pool_samples=None, k: int = DEFAULT_K,
                 encoder: Optional[LoFiModel] = None, max_len: int = DEFAULT_MAX_LEN, trace_path=None,
                 config: Optional[Dict] = None) -> EvalReport:
    traces = run_icl(model, query_samples, pool_samples, k, encoder, eval_mode=True, max_len=max_len)
    if trace_path is not None:
        with open(trace_path, "w", encoding="utf-8") as fh:
            for t in traces:
                fh.write(json.dumps(t.__dict__) + "\n")
    preds = [t.boxes for t in traces]
    gts = [t.gt for t in traces]
    n_images = len({t.query_id.split("#")[0] for t in traces})
    cfg = {"k": k, "max_len": max_len, **(config or {})}
    return evaluate_grounding(preds, gts, n_malformed=sum(t.malformed for t in traces), n_images=n_images,
                              config=cfg)
