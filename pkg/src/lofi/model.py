"""Toy image encoder, text encoder, 64-query attention pooler and causal
decoder LM, plus the closed-vocabulary tokenizer, LoRA adapters and
checkpoint I/O.
"""
from __future__ import annotations

import copy
import hashlib
import io
import json
import math
import re
import zipfile
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import synthgen

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "<sep>"
SPECIALS = (PAD, BOS, EOS, SEP)
BOX_SYMBOLS = tuple("0123456789") + ("[", "]", ",", ";")
_TOKEN_RE = re.compile(r"[a-z]+(?:-[a-z]+)*|\d|\S")

CHECKPOINT_VERSION = "lofi-ckpt-1"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class PromptSet:
    caption_prompt: str = "report this scan ."
    ground_prompt: str = "detect all instances of :"
    dense_prompt: str = "describe the regions :"

    def words(self) -> List[str]:
        return [t for p in (self.caption_prompt, self.ground_prompt, self.dense_prompt) for t in _TOKEN_RE.findall(p)]


class Tokenizer:
    """Closed vocabulary: specials, grammar words, prompt words, box symbols."""

    def __init__(self, prompts: Optional[PromptSet] = None, extra_words: Iterable[str] = ()):
        prompts = prompts or PromptSet()
        vocab: List[str] = list(SPECIALS)
        for w in list(synthgen.GRAMMAR_WORDS) + prompts.words() + list(extra_words) + list(synthgen.PUNCTUATION) + list(BOX_SYMBOLS):
            if w not in vocab:
                vocab.append(w)
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}
        self.pad_id, self.bos_id, self.eos_id, self.sep_id = (self.index[s] for s in SPECIALS)

    def __len__(self) -> int:
        return len(self.vocab)

    def tokenize(self, text: str) -> List[str]:
        return _TOKEN_RE.findall(text)

    def encode(self, text: str) -> List[int]:
        ids = []
        for tok in self.tokenize(text):
            if tok not in self.index:
                raise ValueError(f"token {tok!r} is not in the vocabulary")
            ids.append(self.index[tok])
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        out = ""
        prev_box = False
        for i in ids:
            tok = self.vocab[int(i)]
            if tok in SPECIALS:
                continue
            is_box = tok in BOX_SYMBOLS
            if out and not (is_box and prev_box):
                out += " "
            out += tok
            prev_box = is_box
        return out


@dataclass
class ModelConfig:
    image_size: Tuple[int, int] = (128, 128)
    patch: int = 16
    d: int = 64
    heads: int = 4
    image_blocks: int = 2
    text_blocks: int = 2
    text_max_len: int = 64
    n_queries: int = 64
    d_dec: int = 64
    dec_blocks: int = 4
    dec_heads: int = 4
    context_cap: int = 640
    mlp_ratio: int = 4
    init_std: float = 0.02  # learned embeddings and positions
    image_pos: str = "sincos"  # fixed 2-D sin-cos patch positions, or "learned"
    logit_scale_init: float = 10.0
    logit_bias_init: float = -10.0
    sigmoid_mode: str = "learned"  # "literal": scale 1, bias 0, frozen
    prompts: PromptSet = field(default_factory=PromptSet)

    @classmethod
    def from_dict(cls, d: Dict) -> "ModelConfig":
        d = dict(d)
        if "prompts" in d and isinstance(d["prompts"], dict):
            d["prompts"] = PromptSet(**d["prompts"])
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Attention(nn.Module):
    """Multi-head attention with separate query/key/value/output projections."""

    def __init__(self, d: int, heads: int, d_kv: Optional[int] = None):
        super().__init__()
        if d % heads:
            raise ValueError("width must be divisible by heads")
        d_kv = d_kv or d
        self.heads = heads
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d_kv, d)
        self.value = nn.Linear(d_kv, d)
        self.output = nn.Linear(d, d)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x, context=None, mask=None, cache=None):
        context = x if context is None else context
        q = self._split(self.query(x))
        k = self._split(self.key(context))
        v = self._split(self.value(context))
        if cache is not None:
            k = torch.cat([cache[0], k], dim=2)
            v = torch.cat([cache[1], v], dim=2)
        att = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if mask is not None:
            att = att.masked_fill(~mask, float("-inf"))
        out = att.softmax(dim=-1) @ v
        b, h, n, dh = out.shape
        return self.output(out.transpose(1, 2).reshape(b, n, h * dh)), (k, v)


class Block(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(), nn.Linear(mlp_ratio * d, d))

    def forward(self, x, mask=None, cache=None):
        a, kv = self.attn(self.norm1(x), mask=mask, cache=cache)
        x = x + a
        return x + self.mlp(self.norm2(x)), kv


class AttentionPool(nn.Module):
    """Learned queries cross-attending to a token set."""

    def __init__(self, n_queries: int, d: int, heads: int):
        super().__init__()
        # unit-scale queries attend to distinct patches from the first step
        self.queries = nn.Parameter(torch.randn(n_queries, d))
        self.norm = nn.LayerNorm(d)
        self.attn = Attention(d, heads)

    def forward(self, tokens):
        q = self.queries.unsqueeze(0).expand(tokens.shape[0], -1, -1).contiguous()
        out, _ = self.attn(q, context=self.norm(tokens))
        return out


def sincos_2d(gh: int, gw: int, d: int) -> torch.Tensor:
    """Fixed (gh*gw, d) positions: half the channels encode the row, half the column."""
    if d % 4:
        raise ValueError("sin-cos positions need a width divisible by 4")
    freqs = 1.0 / (10000 ** (torch.arange(d // 4, dtype=torch.float64) / (d // 4)))
    ys, xs = torch.meshgrid(torch.arange(gh, dtype=torch.float64), torch.arange(gw, dtype=torch.float64),
                            indexing="ij")
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        ang = coord[:, None] * freqs[None]
        parts += [ang.sin(), ang.cos()]
    return torch.cat(parts, dim=1).float()


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h, w = cfg.image_size
        if h % cfg.patch or w % cfg.patch:
            raise ValueError("image size must be a multiple of the patch size")
        self.image_size = (h, w)
        self.patch_embed = nn.Conv2d(1, cfg.d, cfg.patch, stride=cfg.patch)
        gh, gw = h // cfg.patch, w // cfg.patch
        if cfg.image_pos == "sincos":
            self.register_buffer("pos", sincos_2d(gh, gw, cfg.d), persistent=False)
        elif cfg.image_pos == "learned":
            self.pos = nn.Parameter(torch.randn(gh * gw, cfg.d) * cfg.init_std)
        else:
            raise ValueError(f"unknown image position scheme {cfg.image_pos!r}")
        self.blocks = nn.ModuleList(Block(cfg.d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.image_blocks))
        self.norm = nn.LayerNorm(cfg.d)
        self.head_pool = AttentionPool(1, cfg.d, cfg.heads)
        self.head = nn.Linear(cfg.d, cfg.d)

    def forward(self, images):
        """images (B, H, W) -> (unit embeddings (B, d), patch tokens (B, N, d))."""
        if tuple(images.shape[-2:]) != self.image_size:
            raise ValueError(f"expected images of size {self.image_size}, got {tuple(images.shape[-2:])}")
        x = self.patch_embed(images.unsqueeze(1)).flatten(2).transpose(1, 2) + self.pos
        for blk in self.blocks:
            x, _ = blk(x)
        tokens = self.norm(x)
        emb = self.head(self.head_pool(tokens)[:, 0])
        return F.normalize(emb, dim=-1), tokens


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab_size: int):
        super().__init__()
        self.max_len = cfg.text_max_len
        self.embed = nn.Embedding(vocab_size, cfg.d)
        self.pos = nn.Parameter(torch.randn(cfg.text_max_len, cfg.d) * cfg.init_std)
        self.blocks = nn.ModuleList(Block(cfg.d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.text_blocks))
        self.norm = nn.LayerNorm(cfg.d)
        self.head = nn.Linear(cfg.d, cfg.d)

    def forward(self, ids, valid):
        x = self.embed(ids) + self.pos[: ids.shape[1]]
        n = ids.shape[1]
        mask = (valid[:, None, None, :] | torch.eye(n, dtype=torch.bool, device=ids.device))
        for blk in self.blocks:
            x, _ = blk(x, mask=mask)
        x = self.norm(x)
        w = valid.to(x.dtype).unsqueeze(-1)
        pooled = (x * w).sum(1) / w.sum(1).clamp(min=1.0)
        return F.normalize(self.head(pooled), dim=-1)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab_size: int):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, cfg.d_dec)
        self.pos = nn.Embedding(cfg.context_cap, cfg.d_dec)
        self.blocks = nn.ModuleList(Block(cfg.d_dec, cfg.dec_heads, cfg.mlp_ratio) for _ in range(cfg.dec_blocks))
        self.norm = nn.LayerNorm(cfg.d_dec)
        self.lm_head = nn.Linear(cfg.d_dec, vocab_size)
        nn.init.normal_(self.embed.weight, std=cfg.init_std)
        nn.init.normal_(self.pos.weight, std=cfg.init_std)

    def embed_inputs(self, ids, img_idx, bank, pos):
        x = self.embed(ids)
        if bank is not None and bank.shape[0] > 0:
            img = bank[img_idx.clamp(min=0)]
            x = torch.where((img_idx >= 0).unsqueeze(-1), img, x)
        return x + self.pos(pos)

    def forward(self, x, mask, caches=None):
        new = []
        for n, blk in enumerate(self.blocks):
            x, kv = blk(x, mask=mask, cache=None if caches is None else caches[n])
            new.append(kv)
        return self.lm_head(self.norm(x)), new


class LoFiModel(nn.Module):
    """E_I, E_T, attention pooler + projection, decoder LM and sigmoid scale/bias."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.tokenizer = Tokenizer(cfg.prompts)
        v = len(self.tokenizer)
        self.image_encoder = ImageEncoder(cfg)
        self.text_encoder = TextEncoder(cfg, v)
        self.pooler = AttentionPool(cfg.n_queries, cfg.d, cfg.heads)
        self.projection = nn.Sequential(nn.LayerNorm(cfg.d), nn.Linear(cfg.d, cfg.d_dec))
        self.decoder = Decoder(cfg, v)
        literal = cfg.sigmoid_mode == "literal"
        if cfg.sigmoid_mode not in ("learned", "literal"):
            raise ValueError(f"unknown sigmoid_mode {cfg.sigmoid_mode!r}")
        self.log_logit_scale = nn.Parameter(torch.tensor(0.0 if literal else math.log(cfg.logit_scale_init)),
                                            requires_grad=not literal)
        self.logit_bias = nn.Parameter(torch.tensor(0.0 if literal else cfg.logit_bias_init), requires_grad=not literal)

    @property
    def logit_scale(self):
        return self.log_logit_scale.exp()

    @property
    def device(self):
        return self.log_logit_scale.device

    @property
    def dtype(self):
        return self.log_logit_scale.dtype

    def as_image_tensor(self, images) -> torch.Tensor:
        if isinstance(images, torch.Tensor):
            t = images
        else:
            t = torch.as_tensor(np.asarray(images, dtype=np.float32))
        if t.dim() == 2:
            t = t.unsqueeze(0)
        return t.to(device=self.device, dtype=self.dtype)

    def encode_images(self, images, with_pooled: bool = True):
        """(B, H, W) -> unit embeddings (B, d) and pooled tokens (B, n_queries, d_dec)."""
        emb, tokens = self.image_encoder(self.as_image_tensor(images))
        if not with_pooled:
            return emb, None
        return emb, self.projection(self.pooler(tokens))

    def text_batch(self, texts: Sequence[str]):
        rows = []
        for t in texts:
            ids = self.tokenizer.encode(t)
            if not ids:
                raise ValueError("cannot encode empty text")
            rows.append(ids[: self.cfg.text_max_len])
        n = max(len(r) for r in rows)
        ids = torch.full((len(rows), n), self.tokenizer.pad_id, dtype=torch.long, device=self.device)
        valid = torch.zeros((len(rows), n), dtype=torch.bool, device=self.device)
        for i, r in enumerate(rows):
            ids[i, : len(r)] = torch.tensor(r)
            valid[i, : len(r)] = True
        return ids, valid

    def encode_texts(self, texts: Sequence[str]):
        ids, valid = self.text_batch(texts)
        return self.text_encoder(ids, valid)


# ---------------------------------------------------------------------------
# decoder sequences


@dataclass(frozen=True)
class ImageRef:
    """Placeholder for a pooled-token block; ``index`` selects a bank row."""

    index: int


Part = Union[ImageRef, Sequence[int]]
Block_ = List[Part]


@dataclass
class DecoderSeq:
    """Condition blocks plus target ids.

    Positions restart at 0 at the start of every block; the target continues
    the positions of the last block.
    """

    blocks: List[Block_]
    target: List[int] = field(default_factory=list)

    def cond_length(self, n_queries: int) -> int:
        return sum(block_length(b, n_queries) for b in self.blocks)


def block_length(block: Block_, n_queries: int) -> int:
    return sum(n_queries if isinstance(p, ImageRef) else len(p) for p in block)


def _flatten(seq: DecoderSeq, n_queries: int, pad_id: int):
    ids, img, pos = [], [], []
    for block in seq.blocks:
        p = 0
        for part in block:
            if isinstance(part, ImageRef):
                ids.extend([pad_id] * n_queries)
                img.extend(part.index * n_queries + j for j in range(n_queries))
                pos.extend(range(p, p + n_queries))
                p += n_queries
            else:
                ids.extend(part)
                img.extend([-1] * len(part))
                pos.extend(range(p, p + len(part)))
                p += len(part)
    last = pos[-1] + 1 if pos else 0
    ids.extend(seq.target)
    img.extend([-1] * len(seq.target))
    pos.extend(range(last, last + len(seq.target)))
    return ids, img, pos


def pack(seqs: Sequence[DecoderSeq], n_queries: int, pad_id: int, context_cap: int, device=None):
    """Left-pad a batch of sequences into tensors."""
    flat = [_flatten(s, n_queries, pad_id) for s in seqs]
    n = max(len(f[0]) for f in flat)
    for f in flat:
        if max(f[2], default=0) >= context_cap or len(f[0]) > context_cap:
            raise ContextOverflow(f"sequence of length {len(f[0])} exceeds context cap {context_cap}")
    b = len(seqs)
    ids = torch.full((b, n), pad_id, dtype=torch.long)
    img = torch.full((b, n), -1, dtype=torch.long)
    pos = torch.zeros((b, n), dtype=torch.long)
    valid = torch.zeros((b, n), dtype=torch.bool)
    tmask = torch.zeros((b, n), dtype=torch.bool)
    for i, ((fi, fm, fp), s) in enumerate(zip(flat, seqs)):
        off = n - len(fi)
        ids[i, off:] = torch.tensor(fi, dtype=torch.long)
        img[i, off:] = torch.tensor(fm, dtype=torch.long)
        pos[i, off:] = torch.tensor(fp, dtype=torch.long)
        valid[i, off:] = True
        # position t predicts token t + 1
        if s.target:
            tmask[i, n - len(s.target) - 1: n - 1] = True
    dev = device
    return ids.to(dev), img.to(dev), pos.to(dev), valid.to(dev), tmask.to(dev)


class ContextOverflow(ValueError):
    pass


def _attn_mask(valid):
    n = valid.shape[1]
    causal = torch.tril(torch.ones(n, n, dtype=torch.bool, device=valid.device))
    eye = torch.eye(n, dtype=torch.bool, device=valid.device)
    return ((causal & valid[:, None, :]) | eye).unsqueeze(1)


def decoder_logits(model: LoFiModel, seqs: Sequence[DecoderSeq], bank):
    """Teacher-forced logits. ``bank`` is (n_images, n_queries, d_dec)."""
    cfg = model.cfg
    ids, img, pos, valid, tmask = pack(seqs, cfg.n_queries, model.tokenizer.pad_id, cfg.context_cap, model.device)
    flat_bank = None if bank is None else bank.reshape(-1, bank.shape[-1])
    x = model.decoder.embed_inputs(ids, img, flat_bank, pos)
    logits, _ = model.decoder(x, _attn_mask(valid))
    return logits, ids, tmask


def sequence_logprobs(model: LoFiModel, seqs: Sequence[DecoderSeq], bank):
    """Per-sequence summed target log-probability and target token counts."""
    logits, ids, tmask = decoder_logits(model, seqs, bank)
    logp = logits[:, :-1].log_softmax(-1)
    nxt = ids[:, 1:]
    tok_lp = logp.gather(-1, nxt.unsqueeze(-1)).squeeze(-1)
    m = tmask[:, :-1].to(tok_lp.dtype)
    return (tok_lp * m).sum(1), m.sum(1)


def decoder_logprob(model: LoFiModel, seq: DecoderSeq, bank) -> torch.Tensor:
    """Sum over target tokens of log p(target_t | condition, target_<t)."""
    if not seq.target:
        return torch.zeros((), dtype=model.dtype, device=model.device)
    lp, _ = sequence_logprobs(model, [seq], bank)
    return lp[0]


@torch.no_grad()
def generate(model: LoFiModel, seqs: Sequence[DecoderSeq], bank, max_len: int) -> List[List[int]]:
    """Greedy decoding with a key/value cache; stops at EOS or ``max_len``.

    Returns generated ids without the EOS token.
    """
    if max_len <= 0:
        return [[] for _ in seqs]
    cfg = model.cfg
    seqs = [DecoderSeq(s.blocks, []) for s in seqs]
    ids, img, pos, valid, _ = pack(seqs, cfg.n_queries, model.tokenizer.pad_id, cfg.context_cap, model.device)
    flat_bank = None if bank is None else bank.reshape(-1, bank.shape[-1])
    x = model.decoder.embed_inputs(ids, img, flat_bank, pos)
    logits, caches = model.decoder(x, _attn_mask(valid))
    next_pos = pos[:, -1] + 1
    keys_valid = valid
    out = [[] for _ in seqs]
    done = torch.zeros(len(seqs), dtype=torch.bool, device=model.device)
    eos = model.tokenizer.eos_id
    for _ in range(max_len):
        tok = logits[:, -1].argmax(-1)
        for i in range(len(seqs)):
            if not done[i]:
                if tok[i].item() == eos:
                    done[i] = True
                else:
                    out[i].append(int(tok[i]))
        if bool(done.all()) or all(len(o) >= max_len for o, d in zip(out, done) if not d):
            break
        if int(next_pos.max()) >= cfg.context_cap:
            raise ContextOverflow("generation ran past the context cap")
        keys_valid = torch.cat([keys_valid, torch.ones_like(done).unsqueeze(1)], dim=1)
        x = model.decoder.embed(tok.unsqueeze(1)) + model.decoder.pos(next_pos.unsqueeze(1))
        logits, caches = model.decoder(x, keys_valid[:, None, None, :], caches)
        next_pos = next_pos + 1
    return out


def encode_image(model: LoFiModel, image):
    """Single image -> (unit embedding (d,), pooled tokens (n_queries, d_dec))."""
    emb, pooled = model.encode_images(model.as_image_tensor(image))
    return emb[0], pooled[0]


def encode_text(model: LoFiModel, text: str):
    return model.encode_texts([text])[0]


# ---------------------------------------------------------------------------
# LoRA


@dataclass
class LoraSpec:
    encoder_rank: int = 16
    decoder_rank: int = 4
    encoder_targets: Tuple[str, ...] = ("query", "key", "value", "output")
    decoder_targets: Tuple[str, ...] = ("query", "value")
    scaling: float = 1.0

    def __post_init__(self):
        if self.encoder_rank < 1 or self.decoder_rank < 1:
            raise ValueError("LoRA ranks must be >= 1")
        if not self.encoder_targets or not self.decoder_targets:
            raise ValueError("LoRA targets must be nonempty")
        self.encoder_targets = tuple(self.encoder_targets)
        self.decoder_targets = tuple(self.decoder_targets)


class LoRALinear(nn.Module):
    """Frozen linear layer plus ``scaling * B @ A`` with B zero-initialized."""

    def __init__(self, base: nn.Linear, rank: int, scaling: float):
        super().__init__()
        if rank > min(base.in_features, base.out_features):
            raise ValueError(f"rank {rank} exceeds layer dimension {base.in_features}x{base.out_features}")
        self.base = base
        self.scaling = scaling
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features, dtype=base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=base.weight.dtype))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        for p in self.base.parameters():
            p.requires_grad_(False)

    @property
    def in_features(self):
        return self.base.in_features

    @property
    def out_features(self):
        return self.base.out_features

    def forward(self, x):
        return self.base(x) + self.scaling * F.linear(F.linear(x, self.lora_A), self.lora_B)

    def merged(self) -> nn.Linear:
        lin = nn.Linear(self.in_features, self.out_features, dtype=self.base.weight.dtype)
        with torch.no_grad():
            lin.weight.copy_(self.base.weight + self.scaling * self.lora_B @ self.lora_A)
            lin.bias.copy_(self.base.bias)
        return lin


def _lora_sites(model: LoFiModel, spec: LoraSpec):
    for enc in (model.image_encoder, model.text_encoder):
        for blk in enc.blocks:
            for name in spec.encoder_targets:
                yield blk.attn, name, spec.encoder_rank
    for blk in model.decoder.blocks:
        for name in spec.decoder_targets:
            yield blk.attn, name, spec.decoder_rank


def apply_lora(model: LoFiModel, spec: LoraSpec, seed: int = 0) -> LoFiModel:
    """Copy of ``model`` with adapters on the attention projections.

    Base weights are frozen; adapters, the pooler and projection stay trainable.
    """
    adapted = copy.deepcopy(model)
    for p in adapted.parameters():
        p.requires_grad_(False)
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        for attn, name, rank in _lora_sites(adapted, spec):
            base = getattr(attn, name)
            if not isinstance(base, nn.Linear):
                raise ValueError(f"target {name!r} is not a plain linear layer")
            setattr(attn, name, LoRALinear(base, rank, spec.scaling))
    finally:
        torch.random.set_rng_state(gen_state)
    for mod in (adapted.pooler, adapted.projection):
        for p in mod.parameters():
            p.requires_grad_(True)
    adapted.lora_spec = spec
    return adapted


def merge_lora(model: LoFiModel) -> LoFiModel:
    merged = copy.deepcopy(model)
    for mod in list(merged.modules()):
        if isinstance(mod, Attention):
            for name in ("query", "key", "value", "output"):
                lin = getattr(mod, name)
                if isinstance(lin, LoRALinear):
                    setattr(mod, name, lin.merged())
    if hasattr(merged, "lora_spec"):
        del merged.lora_spec
    return merged


def lora_parameters(model: nn.Module) -> List[nn.Parameter]:
    return [p for n, p in model.named_parameters() if "lora_" in n]


def expected_lora_param_count(model: LoFiModel, spec: LoraSpec) -> int:
    total = 0
    for attn, name, rank in _lora_sites(model, spec):
        lin = getattr(attn, name)
        total += rank * (lin.in_features + lin.out_features)
    return total


# ---------------------------------------------------------------------------
# checkpoints


def state_arrays(model: nn.Module) -> Dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def save_checkpoint(path, model: LoFiModel, config: Dict, config_text: str = "", extra: Optional[Dict] = None) -> str:
    """Write a deterministic zip archive and return its sha256 digest."""
    buf = io.BytesIO()
    meta = {"version": CHECKPOINT_VERSION, "model": asdict(model.cfg), "config": config, "extra": extra or {}}
    if getattr(model, "lora_spec", None) is not None:
        meta["lora"] = asdict(model.lora_spec)
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        def put(name, data: bytes):
            zf.writestr(zipfile.ZipInfo(name, date_time=_ZIP_DATE), data)

        put("meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        put("config.txt", config_text.encode())
        for k, arr in sorted(state_arrays(model).items()):
            b = io.BytesIO()
            np.save(b, arr, allow_pickle=False)
            put(f"params/{k}.npy", b.getvalue())
    data = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def load_checkpoint(path) -> Tuple[LoFiModel, Dict]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        model = LoFiModel(ModelConfig.from_dict(meta["model"]))
        if "lora" in meta:
            model = apply_lora(model, LoraSpec(**meta["lora"]))
        expected = model.state_dict()
        params = {}
        for name in zf.namelist():
            if name.startswith("params/"):
                key = name[len("params/"):-len(".npy")]
                params[key] = torch.from_numpy(np.load(io.BytesIO(zf.read(name)), allow_pickle=False))
        missing = set(expected) - set(params)
        unexpected = set(params) - set(expected)
        if missing or unexpected:
            raise ValueError(f"checkpoint keys mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, v in params.items():
            if tuple(v.shape) != tuple(expected[k].shape):
                raise ValueError(f"shape mismatch for {k}: {tuple(v.shape)} vs {tuple(expected[k].shape)}")
        model.load_state_dict(params)
        meta["config_text"] = zf.read("config.txt").decode()
    return model, meta
