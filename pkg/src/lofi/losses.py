"""Sigmoid contrastive loss, the three autoregressive losses (captioning,
grounding, dense captioning) and their weighted total."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .boxkit import boxes_to_string
from .model import DecoderSeq, ImageRef, LoFiModel, PromptSet, sequence_logprobs

TAUS = ("c", "g", "d")
LOSS_VARIANTS = ("full", "no_gd", "sigmoid_only")


# ---------------------------------------------------------------------------
# decoder sequence builders


def _prompts(model: LoFiModel, prompts: Optional[PromptSet]) -> PromptSet:
    return prompts or model.cfg.prompts


def caption_seq(model: LoFiModel, img: ImageRef, text: str, prompts: Optional[PromptSet] = None) -> DecoderSeq:
    tok = model.tokenizer
    p = _prompts(model, prompts)
    return DecoderSeq([[img, tok.encode(p.caption_prompt), [tok.sep_id]]], tok.encode(text) + [tok.eos_id])


def ground_block(model: LoFiModel, img: ImageRef, sentence: str, prompts: Optional[PromptSet] = None):
    tok = model.tokenizer
    p = _prompts(model, prompts)
    return [img, tok.encode(p.ground_prompt), tok.encode(sentence), [tok.sep_id]]


def ground_seq(model: LoFiModel, img: ImageRef, sentence: str, boxes, prompts: Optional[PromptSet] = None) -> DecoderSeq:
    tok = model.tokenizer
    return DecoderSeq([ground_block(model, img, sentence, prompts)], tok.encode(boxes_to_string(boxes)) + [tok.eos_id])


def dense_seq(model: LoFiModel, img: ImageRef, boxes, sentence: str, prompts: Optional[PromptSet] = None) -> DecoderSeq:
    tok = model.tokenizer
    p = _prompts(model, prompts)
    block = [img, tok.encode(p.dense_prompt), tok.encode(boxes_to_string(boxes)), [tok.sep_id]]
    return DecoderSeq([block], tok.encode(sentence) + [tok.eos_id])


# ---------------------------------------------------------------------------
# losses


def sign_matrix(n: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """+1 on the diagonal (matched pairs), -1 elsewhere."""
    return 2 * torch.eye(n, dtype=dtype, device=device) - 1


def sigmoid_loss(z_img: torch.Tensor, z_txt: torch.Tensor, scale=1.0, bias=0.0) -> torch.Tensor:
    """Mean over all B*B pairs of -log sigmoid(sign * (scale * <z_i, z_t> + bias))."""
    if z_img.shape != z_txt.shape or z_img.dim() != 2:
        raise ValueError("embedding batches must both be (B, d)")
    if not (torch.isfinite(z_img).all() and torch.isfinite(z_txt).all()):
        raise ValueError("non-finite embeddings")
    logits = scale * z_img @ z_txt.T + bias
    signs = sign_matrix(z_img.shape[0], logits.dtype, logits.device)
    return -F.logsigmoid(signs * logits).mean()


def _nll(model: LoFiModel, seqs: Sequence[DecoderSeq], bank, norm: str = "token") -> torch.Tensor:
    lp, n = sequence_logprobs(model, seqs, bank)
    if norm == "token":
        return -lp / n
    if norm == "sequence":
        return -lp
    raise ValueError(f"unknown normalization {norm!r}")


def _single_bank(model: LoFiModel, image):
    _, pooled = model.encode_images(model.as_image_tensor(image))
    return pooled


def captioning_loss(model: LoFiModel, image, text: str, prompts: Optional[PromptSet] = None, norm: str = "token"):
    bank = _single_bank(model, image)
    return _nll(model, [caption_seq(model, ImageRef(0), text, prompts)], bank, norm)[0]


def grounding_loss(model: LoFiModel, image, sentence: str, boxes, prompts: Optional[PromptSet] = None, norm: str = "token"):
    if not boxes:
        raise ValueError("grounding loss needs a sample with boxes")
    bank = _single_bank(model, image)
    return _nll(model, [ground_seq(model, ImageRef(0), sentence, boxes, prompts)], bank, norm)[0]


def dense_captioning_loss(model: LoFiModel, image, boxes, sentence: str, prompts: Optional[PromptSet] = None,
                          norm: str = "token"):
    if not boxes:
        raise ValueError("dense captioning loss needs a sample with boxes")
    bank = _single_bank(model, image)
    return _nll(model, [dense_seq(model, ImageRef(0), boxes, sentence, prompts)], bank, norm)[0]


# ---------------------------------------------------------------------------
# total loss


@dataclass
class LossBatch:
    """One training batch.

    ``boxes[i]`` is None for samples without annotations, otherwise a list
    aligned with ``reports[i]`` of normalized box lists.
    """

    images: object
    texts: List[str]
    reports: List[List[str]]
    boxes: List[Optional[List[list]]]
    ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.texts) == len(self.reports) == len(self.boxes)):
            raise ValueError("batch fields differ in length")
        for r, b in zip(self.reports, self.boxes):
            if b is not None and len(b) != len(r):
                raise ValueError("boxes must align with report sentences")

    def __len__(self):
        return len(self.texts)

    @property
    def has_boxes(self) -> List[bool]:
        return [b is not None and any(len(x) for x in b) for b in self.boxes]

    def signs(self) -> torch.Tensor:
        return sign_matrix(len(self))


@dataclass
class TauChoice:
    taus: List[str]
    sentence_idx: List[Optional[int]]


class PerSampleTau:
    """Per-sample draw: with boxes c/g/d at 1/2, 1/4, 1/4; without boxes always c."""

    name = "per_sample"

    def terms(self, has_boxes: bool, rng: np.random.Generator):
        if not has_boxes:
            return [("c", 1.0)]
        u = rng.random()
        return [("c" if u < 0.5 else "g" if u < 0.75 else "d", 1.0)]


class SummedTerms:
    """Deterministic mixture 1/2 L_c + 1/4 L_g + 1/4 L_d for box-bearing samples."""

    name = "summed"

    def terms(self, has_boxes: bool, rng: np.random.Generator):
        if not has_boxes:
            return [("c", 1.0)]
        return [("c", 0.5), ("g", 0.25), ("d", 0.25)]


SAMPLERS = {"per_sample": PerSampleTau, "summed": SummedTerms}


def draw_taus(has_boxes: Sequence[bool], seed, variant: str = "full", sampler=None):
    """Loss terms per sample plus the sentence index used by g/d terms."""
    if variant not in LOSS_VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}")
    sampler = sampler or PerSampleTau()
    rng = np.random.default_rng(seed)
    out = []
    for hb in has_boxes:
        if variant == "sigmoid_only":
            out.append([])
        elif variant == "no_gd":
            out.append([("c", 1.0)])
        else:
            out.append(sampler.terms(hb, rng))
    # the same stream then picks sentences for g/d terms
    return out, rng


def total_loss(model: LoFiModel, batch: LossBatch, lam: float = 5.0, seed=0, variant: str = "full",
               sampler=None, norm: str = "token", return_parts: bool = False):
    """L_s + lam * mean over samples of the drawn autoregressive term(s).

    Returns ``(loss, TauChoice)``, or ``(loss, TauChoice, parts)`` with
    ``return_parts``.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    emb_i, pooled = model.encode_images(model.as_image_tensor(batch.images))
    emb_t = model.encode_texts(batch.texts)
    ls = sigmoid_loss(emb_i, emb_t, model.logit_scale, model.logit_bias)
    terms, sent_rng = draw_taus(batch.has_boxes, seed, variant, sampler)
    taus = [t[0][0] if len(t) == 1 else ("mix" if t else "-") for t in terms]
    sent_idx: List[Optional[int]] = [None] * len(batch)
    parts = {"sigmoid": float(ls.detach())}
    if lam == 0 or variant == "sigmoid_only":
        choice = TauChoice(taus if variant != "sigmoid_only" else ["-"] * len(batch), sent_idx)
        return (ls, choice, parts) if return_parts else (ls, choice)

    seqs, weights, owner = [], [], []
    for i, sample_terms in enumerate(terms):
        img = ImageRef(i)
        if any(t in ("g", "d") for t, _ in sample_terms):
            boxed = [j for j, b in enumerate(batch.boxes[i]) if b]
            sent_idx[i] = boxed[int(sent_rng.integers(len(boxed)))]
        for tau, w in sample_terms:
            if tau == "c":
                seqs.append(caption_seq(model, img, " ".join(batch.reports[i])))
            elif tau == "g":
                j = sent_idx[i]
                seqs.append(ground_seq(model, img, batch.reports[i][j], batch.boxes[i][j]))
            else:
                j = sent_idx[i]
                seqs.append(dense_seq(model, img, batch.boxes[i][j], batch.reports[i][j]))
            weights.append(w)
            owner.append(tau)
    nll = _nll(model, seqs, pooled, norm)
    w = torch.tensor(weights, dtype=nll.dtype, device=nll.device)
    lar = (nll * w).sum() / len(batch)
    for tau in TAUS:
        sel = [n for n, o in enumerate(owner) if o == tau]
        if sel:
            parts[tau] = float(nll[sel].mean().detach())
    parts["ar"] = float(lar.detach())
    loss = ls + lam * lar
    choice = TauChoice(taus, sent_idx)
    return (loss, choice, parts) if return_parts else (loss, choice)
