"""Model-level evaluation glue: batched embedding and the report-level
retrieval protocol."""
from __future__ import annotations

from typing import Dict, List, Sequence

import numpy as np
import torch

from .model import LoFiModel
from .retrieval import RECALL_KS, retrieval_eval, split_subreports


@torch.no_grad()
def embed_images(model: LoFiModel, images, batch_size: int = 64, with_pooled: bool = False):
    """Unit image embeddings as float64 numpy, optionally with pooled tokens."""
    was_training = model.training
    model.eval()
    embs, pooled = [], []
    try:
        for i in range(0, len(images), batch_size):
            e, p = model.encode_images(np.stack(images[i:i + batch_size]), with_pooled=with_pooled)
            embs.append(e.double().cpu().numpy())
            if with_pooled:
                pooled.append(p)
    finally:
        model.train(was_training)
    emb = np.concatenate(embs) if embs else np.zeros((0, model.cfg.d))
    if with_pooled:
        return emb, (torch.cat(pooled) if pooled else None)
    return emb


@torch.no_grad()
def embed_texts(model: LoFiModel, texts: Sequence[str], batch_size: int = 128) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        out = [model.encode_texts(list(texts[i:i + batch_size])).double().cpu().numpy()
               for i in range(0, len(texts), batch_size)]
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.d))


def evaluate_retrieval(model: LoFiModel, samples, ks: Sequence[int] = RECALL_KS, subreport_n: int = 5,
                       t2i_mode: str = "max") -> Dict[str, Dict]:
    """Image<->report retrieval over ``samples``; every report is split into
    ``subreport_n``-sentence sub-reports and scored at report level."""
    image_ids = [s.id for s in samples]
    sub_texts: List[str] = []
    sub_ids: List[str] = []
    parent = {}
    for s in samples:
        for n, chunk in enumerate(split_subreports(s.sentences, subreport_n)):
            sid = f"{s.id}/{n}"
            sub_texts.append(" ".join(chunk))
            sub_ids.append(sid)
            parent[sid] = s.id
    img = embed_images(model, [s.image for s in samples])
    txt = embed_texts(model, sub_texts)
    return retrieval_eval(img, image_ids, txt, sub_ids, parent, ks=ks, t2i_mode=t2i_mode)
