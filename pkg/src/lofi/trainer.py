"""Seeded training loop with cosine-annealed learning rate, per-epoch
checkpoints, JSON-lines metrics and the ablation harness."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import synthgen
from .boxkit import normalize_box
from .losses import LOSS_VARIANTS, SAMPLERS, LossBatch, total_loss
from .model import LoFiModel, LoraSpec, ModelConfig, apply_lora, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr0: float = 3e-4
    lam: float = 5.0
    seed: int = 0
    loss_variant: str = "full"
    tau_sampler: str = "per_sample"
    ar_norm: str = "token"
    grad_clip: Optional[float] = 1.0
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    n_min_sentences: int = 4
    n_max_sentences: int = 8
    checkpoint_every_epoch: bool = True
    lora: Optional[LoraSpec] = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2 or self.lr0 <= 0:
            raise ValueError("epochs >= 1, batch_size >= 2 and lr0 > 0 are required")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant {self.loss_variant!r}")
        if self.tau_sampler not in SAMPLERS:
            raise ValueError(f"unknown tau sampler {self.tau_sampler!r}")
        self.betas = tuple(self.betas)

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if isinstance(d.get("model"), dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        if isinstance(d.get("lora"), dict):
            d["lora"] = LoraSpec(**d["lora"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, batch_index: int, ids: Sequence[str]):
        super().__init__(f"non-finite loss at step {step} (epoch batch {batch_index}, samples {list(ids)})")
        self.step = step
        self.batch_index = batch_index
        self.ids = list(ids)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def normalized_boxes(sample: synthgen.Sample, image_size):
    if not sample.has_boxes:
        return None
    return [[normalize_box(b, image_size) for b in bl] for bl in sample.boxes_per_sentence]


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Shuffled index batches; a trailing singleton borrows the epoch's first index."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches[-1]) < 2 and n >= 2:
        batches[-1] = np.concatenate([batches[-1], perm[:1]])
    return batches


def make_batch(samples: Sequence[synthgen.Sample], idx, cfg: TrainConfig, seed) -> LossBatch:
    chosen = [samples[i] for i in idx]
    texts = [
        " ".join(synthgen.sample_sentences(s, cfg.n_min_sentences, cfg.n_max_sentences, [*seed, n]))
        for n, s in enumerate(chosen)
    ]
    size = cfg.model.image_size
    return LossBatch(
        images=np.stack([s.image for s in chosen]),
        texts=texts,
        reports=[s.sentences for s in chosen],
        boxes=[normalized_boxes(s, size) for s in chosen],
        ids=[s.id for s in chosen],
    )


def build_model(cfg: TrainConfig) -> LoFiModel:
    torch.manual_seed(cfg.seed)
    model = LoFiModel(cfg.model)
    if cfg.lora is not None:
        model = apply_lora(model, cfg.lora, seed=cfg.seed)
    return model


@dataclass
class TrainResult:
    model: LoFiModel
    checkpoint: Optional[Path]
    digest: Optional[str]
    metrics_path: Optional[Path]
    metrics: List[Dict]


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def train(cfg: TrainConfig, samples: Sequence[synthgen.Sample], out_dir=None, config_text: str = "",
          echo: Optional[Dict] = None, model: Optional[LoFiModel] = None) -> TrainResult:
    """Gradient descent on the total loss for ``epochs * ceil(N / batch)`` steps.

    With ``out_dir`` set, writes ``metrics.jsonl``, ``epoch_XXX.ckpt`` and
    ``final.ckpt``. Raises :class:`NonFiniteLoss` on a NaN/inf loss.
    """
    if len(samples) < 2:
        raise ValueError("training needs at least two samples")
    torch.use_deterministic_algorithms(True)
    model = model if model is not None else build_model(cfg)
    model.train()
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr0, betas=cfg.betas, weight_decay=cfg.weight_decay)
    sampler = SAMPLERS[cfg.tau_sampler]()
    total = cfg.epochs * _steps_per_epoch(len(samples), cfg.batch_size)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "metrics.jsonl", "w", encoding="utf-8")
    ckpt_cfg = {"train": cfg.to_dict(), **(echo or {})}
    metrics: List[Dict] = []
    step = 0
    digest = None
    ckpt = None
    try:
        for epoch in range(cfg.epochs):
            for b, idx in enumerate(epoch_batches(len(samples), cfg.batch_size, cfg.seed, epoch)):
                t0 = time.perf_counter()
                lr = cosine_lr(step, total, cfg.lr0)
                for g in opt.param_groups:
                    g["lr"] = lr
                batch = make_batch(samples, idx, cfg, (cfg.seed, step))
                loss, choice, parts = total_loss(model, batch, cfg.lam, seed=[cfg.seed, step, 1],
                                                 variant=cfg.loss_variant, sampler=sampler, norm=cfg.ar_norm,
                                                 return_parts=True)
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(step, b, batch.ids)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
                rec = {
                    "step": step, "epoch": epoch, "loss": float(loss.detach()), "tau": choice.taus, "lr": lr,
                    "wall_ms": round(1000 * (time.perf_counter() - t0), 3), "parts": parts,
                    "has_boxes": batch.has_boxes, "ids": batch.ids,
                }
                metrics.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec) + "\n")
                step += 1
            log.info("epoch %d done, last loss %.4f", epoch, metrics[-1]["loss"])
            if out is not None and cfg.checkpoint_every_epoch:
                save_checkpoint(out / f"epoch_{epoch:03d}.ckpt", model, ckpt_cfg, config_text, {"epoch": epoch})
        if out is not None:
            ckpt = out / "final.ckpt"
            digest = save_checkpoint(ckpt, model, ckpt_cfg, config_text, {"epoch": cfg.epochs - 1, "steps": step})
            (out / "final.sha256").write_text(digest + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return TrainResult(model, ckpt, digest, out / "metrics.jsonl" if out else None, metrics)


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationSettings:
    variants: Sequence[str] = ("full", "no_gd", "sigmoid_only")
    lambdas: Sequence[float] = (5.0,)
    seeds: Sequence[int] = (0,)
    icl_k: int = 4
    recall_ks: Sequence[int] = (1, 40)


def _mean_rows(rows: List[Dict], keys: Sequence[str], metrics: Sequence[str]) -> List[Dict]:
    groups: Dict[tuple, List[Dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for g, rs in groups.items():
        row = dict(zip(keys, g))
        row["n_seeds"] = len(rs)
        for m in metrics:
            row[m] = float(np.mean([r[m] for r in rs]))
        out.append(row)
    return out


ABLATION_METRICS = ("R@1", "R@40", "RoL", "F05")


def ablate(base: TrainConfig, settings: AblationSettings, train_samples, test_samples, pool_samples,
           out_dir=None, trained_cache: Optional[Dict] = None) -> Dict:
    """Train and evaluate every (variant, lambda, seed) combination.

    Each row carries image-to-text R@1/R@40 on ``test_samples`` and ICL
    grounding Ro/L and F@0.5 (demonstrations from ``pool_samples``, selected
    and decoded by the row's own model).
    """
    from .evaluate import evaluate_retrieval
    from .iclground import evaluate_icl

    combos = [(v, lam, s) for v in settings.variants for lam in settings.lambdas for s in settings.seeds]
    if len(set(settings.variants)) < 2 and len(set(settings.lambdas)) < 2:
        raise ValueError("ablation needs at least two variants or two lambda values")
    rows = []
    for variant, lam, seed in combos:
        cfg = replace(base, loss_variant=variant, lam=float(lam), seed=int(seed))
        key = (variant, float(lam), int(seed))
        if trained_cache is not None and key in trained_cache:
            model = trained_cache[key]
        else:
            run_dir = None
            if out_dir is not None:
                run_dir = Path(out_dir) / f"{variant}_lam{lam:g}_seed{seed}"
            model = train(cfg, train_samples, run_dir).model
            if trained_cache is not None:
                trained_cache[key] = model
        ret = evaluate_retrieval(model, test_samples, ks=settings.recall_ks)
        grd = evaluate_icl(model, test_samples, pool_samples, k=settings.icl_k, encoder=model)
        row = {"variant": variant, "lambda": float(lam), "seed": int(seed),
               "R@1": ret["i2t"]["R@1"], "R@40": ret["i2t"][f"R@{max(settings.recall_ks)}"],
               "RoL": grd.RoL, "F05": grd.F05, "P05": grd.P05, "R05": grd.R05,
               "n_malformed": grd.counts["n_malformed"]}
        rows.append(row)
        log.info("ablation row %s", row)
    report = {
        "rows": rows,
        "mean": _mean_rows(rows, ("variant", "lambda"), ABLATION_METRICS),
        "settings": {k: list(v) if isinstance(v, (list, tuple)) else v for k, v in asdict(settings).items()},
        "base_config": base.to_dict(),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        (out / "ablation.md").write_text(ablation_table(report))
    return report


def ablation_table(report: Dict) -> str:
    lines = ["| variant | lambda | seeds | " + " | ".join(ABLATION_METRICS) + " |",
             "|" + "---|" * (3 + len(ABLATION_METRICS))]
    for r in report["mean"]:
        vals = " | ".join(f"{r[m]:.2f}" for m in ABLATION_METRICS)
        lines.append(f"| {r['variant']} | {r['lambda']:g} | {r['n_seeds']} | {vals} |")
    return "\n".join(lines) + "\n"
