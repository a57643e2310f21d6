"""Command-line entry point.

Every subcommand resolves one configuration record (built-in defaults, then
an optional YAML file, then ``--set dotted.key=value`` overrides, then the
explicit flags) and writes it, with the command line, seed and version tag,
into each artifact it produces.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import shlex
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import yaml

from . import VERSION_TAG

log = logging.getLogger("lofi")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
DEFAULT_OUT = "runs"


class ConfigError(ValueError):
    pass


def _plain(x):
    """Tuples to lists, recursively, so configs dump as plain YAML/JSON."""
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def default_config() -> Dict:
    from .model import ModelConfig
    from .synthgen import DatasetConfig
    from .trainer import TrainConfig

    data = asdict(DatasetConfig())
    data.pop("seed")
    train = TrainConfig().to_dict()
    for k in ("seed", "model", "lora"):
        train.pop(k)
    return _plain({
        "seed": 0,
        "data": data,
        "train": train,
        "lora": None,
        "model": asdict(ModelConfig()),
        "eval": {"split": "test", "pool_split": "pool", "k": 4, "max_len": 40, "subreport_n": 5,
                 "t2i_mode": "max", "batch_size": 32},
        "ablate": {"variants": ["full", "no_gd", "sigmoid_only"], "lambdas": [5.0], "seeds": [0], "icl_k": 4},
    })


def _merge(base: Dict, upd: Dict, path: str = "") -> Dict:
    out = copy.deepcopy(base)
    for k, v in upd.items():
        key = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, key + ".")
        elif isinstance(out[k], dict) and out[k] and v is not None:
            raise ConfigError(f"config key {key!r} needs a mapping")
        else:
            out[k] = v
    return out


def set_dotted(cfg: Dict, dotted: str, value) -> Dict:
    upd: Dict = {}
    cur = upd
    parts = dotted.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return _merge(cfg, upd)


def parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        return key.strip(), yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value of {key!r}: {exc}") from exc


def resolve_config(config_path: Optional[str], overrides: Sequence[str], flags: Dict) -> Dict:
    cfg = default_config()
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        cfg = _merge(cfg, loaded)
    for o in overrides:
        cfg = set_dotted(cfg, *parse_override(o))
    for k, v in flags.items():
        if v is not None:
            cfg = set_dotted(cfg, k, v)
    return cfg


def config_text(cfg: Dict) -> str:
    return yaml.safe_dump(_plain(cfg), sort_keys=True)


# ---------------------------------------------------------------------------
# builders from the resolved record


def dataset_config(cfg: Dict):
    from .synthgen import DatasetConfig, GeneratorConfig

    d = dict(cfg["data"])
    gen = dict(d.pop("generator"))
    gen["image_size"] = tuple(gen["image_size"])
    try:
        return DatasetConfig(seed=int(cfg["seed"]), generator=GeneratorConfig(**gen), **d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def train_config(cfg: Dict):
    from .trainer import TrainConfig

    d = dict(cfg["train"], seed=int(cfg["seed"]), model=cfg["model"], lora=cfg["lora"])
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# run context


class Run:
    """Resolved config plus the provenance every artifact carries."""

    def __init__(self, args, cfg: Dict, argv: List[str]):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out or os.environ.get("LOFI_OUT") or DEFAULT_OUT)
        self.argv = argv

    @property
    def command_line(self) -> str:
        # output locations are replaced so that reruns elsewhere produce identical artifacts
        argv = list(self.argv)
        for i, a in enumerate(argv):
            if a == "--out" and i + 1 < len(argv):
                argv[i + 1] = "<out>"
            elif a.startswith("--out="):
                argv[i] = "--out=<out>"
        return shlex.join(["lofi", *argv])

    def provenance(self) -> Dict:
        return {"command": self.command_line, "config": _plain(self.cfg), "seed": self.cfg["seed"],
                "version": VERSION_TAG}

    def prepare_out(self) -> Path:
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {self.out}: {exc}") from exc
        return self.out

    def write_json(self, name: str, payload: Dict) -> Path:
        path = self.prepare_out() / name
        rec = {"run": self.provenance(), **payload}
        path.write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _data_root(args) -> Path:
    root = Path(args.data)
    if not root.is_dir():
        raise ConfigError(f"data directory {root} does not exist")
    return root


def _load_split(args, split: str, limit: Optional[int] = None):
    from .synthgen import load_manifest

    path = _data_root(args) / f"{split}.jsonl"
    if not path.exists():
        raise ConfigError(f"manifest {path} not found")
    samples = load_manifest(path)
    return samples[:limit] if limit else samples


def _load_model(path):
    from .model import load_checkpoint

    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} not found")
    return load_checkpoint(path)[0]


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(run: Run) -> int:
    from .synthgen import build_dataset

    dc = dataset_config(run.cfg)
    try:
        manifests = build_dataset(dc, run.out)
    except OSError as exc:
        raise ConfigError(str(exc)) from exc
    run.write_json("run.json", {"manifests": {k: v.name for k, v in manifests.items()}})
    for split, path in manifests.items():
        print(f"{split}: {path}")
    return EXIT_OK


def cmd_train(run: Run) -> int:
    from .trainer import train

    tc = train_config(run.cfg)
    samples = _load_split(run.args, "train", run.args.limit)
    text = config_text(run.cfg)
    echo = {"epochs": tc.epochs, "batch_size": tc.batch_size, "lr0": tc.lr0, "lambda": tc.lam,
            "loss_variant": tc.loss_variant, "seed": tc.seed}
    print("config: " + " ".join(f"{k}={v}" for k, v in echo.items()))
    out = run.prepare_out()
    res = train(tc, samples, out, config_text=text, echo={"run": run.provenance()})
    run.write_json("run.json", {"checkpoint": res.checkpoint.name, "sha256": res.digest, "steps": len(res.metrics),
                                "final_loss": res.metrics[-1]["loss"]})
    print(f"checkpoint: {res.checkpoint} sha256={res.digest}")
    return EXIT_OK


def cmd_eval_retrieval(run: Run) -> int:
    from .evaluate import evaluate_retrieval

    ev = run.cfg["eval"]
    model = _load_model(run.args.ckpt)
    samples = _load_split(run.args, ev["split"], run.args.limit)
    res = evaluate_retrieval(model, samples, subreport_n=ev["subreport_n"], t2i_mode=ev["t2i_mode"])
    path = run.write_json("retrieval.json", {"checkpoint": str(run.args.ckpt), "n_images": len(samples), **res})
    for direction in ("i2t", "t2i"):
        print(direction + " " + " ".join(f"{k}={v:.2f}" for k, v in res[direction].items() if k.startswith("R@")))
    print(f"report: {path}")
    return EXIT_OK


def _ground(run: Run, k: int, name: str) -> int:
    from .evalmetrics import write_per_query_csv
    from .iclground import evaluate_icl

    ev = run.cfg["eval"]
    model = _load_model(run.args.ckpt)
    encoder = _load_model(run.args.encoder_ckpt) if getattr(run.args, "encoder_ckpt", None) else None
    queries = _load_split(run.args, ev["split"], run.args.limit)
    pool = _load_split(run.args, ev["pool_split"]) if k > 0 else None
    out = run.prepare_out()
    trace = out / f"{name}_trace.jsonl"
    report = evaluate_icl(model, queries, pool, k=k, encoder=encoder, max_len=ev["max_len"], trace_path=trace,
                          config={"checkpoint": str(run.args.ckpt)})
    traces = [json.loads(line) for line in trace.read_text(encoding="utf-8").splitlines()]
    write_per_query_csv(out / f"{name}_per_query.csv", [t["query_id"] for t in traces],
                        [t["boxes"] for t in traces], [t["gt"] for t in traces])
    path = run.write_json(f"{name}.json", {"metrics": report.to_dict()})
    print(" ".join(f"{m}={getattr(report, m):.2f}" for m in ("RoL", "RoS", "F05", "P05", "R05")))
    print(f"report: {path}")
    return EXIT_OK


def cmd_eval_ground(run: Run) -> int:
    return _ground(run, 0, "grounding")


def cmd_icl_ground(run: Run) -> int:
    k = run.cfg["eval"]["k"]
    if k < 0:
        raise ConfigError("k must be >= 0")
    return _ground(run, k, "icl_grounding")


def cmd_ablate(run: Run) -> int:
    from .trainer import AblationSettings, ablate

    ab = run.cfg["ablate"]
    try:
        settings = AblationSettings(variants=tuple(ab["variants"]), lambdas=tuple(float(x) for x in ab["lambdas"]),
                                    seeds=tuple(int(s) for s in ab["seeds"]), icl_k=int(ab["icl_k"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    base = train_config(run.cfg)
    limit = run.args.limit
    train_s = _load_split(run.args, "train", limit)
    test_s = _load_split(run.args, run.cfg["eval"]["split"])
    pool_s = _load_split(run.args, run.cfg["eval"]["pool_split"])
    report = ablate(base, settings, train_s, test_s, pool_s, run.prepare_out())
    run.write_json("ablation_run.json", {"mean": report["mean"]})
    print((run.out / "ablation.md").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def _read_boxes(args):
    if args.boxes:
        raw = args.boxes
    elif args.input:
        try:
            raw = Path(args.input).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read {args.input}: {exc}") from exc
    else:
        raise ConfigError("fuse-boxes needs --boxes or --input")
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"boxes must be JSON: {exc}") from exc
    if isinstance(data, dict):
        return data.get("boxes", []), data.get("weights")
    return data, None


def cmd_fuse_boxes(run: Run) -> int:
    from .boxkit import weighted_box_fusion

    boxes, weights = _read_boxes(run.args)
    try:
        fused = weighted_box_fusion(boxes, weights, iou_thresh=run.args.iou_thresh)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    payload = {"input": boxes, "weights": weights, "iou_thresh": run.args.iou_thresh, "fused": [list(b) for b in fused]}
    if run.args.out or os.environ.get("LOFI_OUT"):
        run.write_json("fused.json", payload)
    print(json.dumps(payload["fused"]))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-ground": cmd_eval_ground,
    "icl-ground": cmd_icl_ground,
    "ablate": cmd_ablate,
    "fuse-boxes": cmd_fuse_boxes,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, repeatable")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (default: $LOFI_OUT or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", required=True, help="directory written by gen-data")
    data.add_argument("--limit", type=int, help="use only the first N samples of the main split")

    p = argparse.ArgumentParser(prog="lofi", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    g.add_argument("--train", type=int)
    g.add_argument("--test", type=int)
    g.add_argument("--pool", type=int)
    g.add_argument("--p-nobox", type=float)

    t = sub.add_parser("train", parents=[common, data], help="train a model")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr0", type=float)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--loss-variant", choices=["full", "no_gd", "sigmoid_only"])
    t.add_argument("--tau-sampler", choices=["per_sample", "summed"])
    t.add_argument("--lora", action="store_true", help="train LoRA adapters with default ranks")

    r = sub.add_parser("eval-retrieval", parents=[common, data], help="image/report retrieval recall")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--split")
    r.add_argument("--t2i-mode", choices=["max", "separate"])

    e = sub.add_parser("eval-ground", parents=[common, data], help="plain grounding metrics")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split")

    i = sub.add_parser("icl-ground", parents=[common, data], help="grounding with retrieved demonstrations")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--encoder-ckpt", help="model used to select demonstrations (default: --ckpt)")
    i.add_argument("--k", type=int)
    i.add_argument("--split")
    i.add_argument("--pool-split")

    a = sub.add_parser("ablate", parents=[common, data], help="loss-variant and lambda sweeps")
    a.add_argument("--variants", nargs="+")
    a.add_argument("--lambdas", nargs="+", type=float)
    a.add_argument("--seeds", nargs="+", type=int)
    a.add_argument("--epochs", type=int)

    f = sub.add_parser("fuse-boxes", parents=[common], help="weighted box fusion of a JSON box list")
    f.add_argument("--boxes", help='JSON list of boxes, or {"boxes": [...], "weights": [...]}')
    f.add_argument("--input", help="file holding the same JSON")
    f.add_argument("--iou-thresh", type=float, default=0.55)
    return p


def _flag_overrides(args) -> Dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    flags = {
        "seed": args.seed,
        "data.train": get("train"), "data.test": get("test"), "data.pool": get("pool"),
        "data.p_nobox": get("p_nobox"),
        "train.epochs": get("epochs"), "train.batch_size": get("batch_size"), "train.lr0": get("lr0"),
        "train.lambda": get("lam"), "train.loss_variant": get("loss_variant"),
        "train.tau_sampler": get("tau_sampler"),
        "eval.split": get("split"), "eval.pool_split": get("pool_split"), "eval.k": get("k"),
        "eval.t2i_mode": get("t2i_mode"),
        "ablate.variants": get("variants"), "ablate.lambdas": get("lambdas"), "ablate.seeds": get("seeds"),
    }
    if get("lora"):
        from .model import LoraSpec

        flags["lora"] = asdict(LoraSpec())
    return flags


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .trainer import NonFiniteLoss

    try:
        cfg = resolve_config(args.config, args.overrides, _flag_overrides(args))
        return COMMANDS[args.command](Run(args, cfg, argv))
    except ConfigError as exc:
        print(f"lofi: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        print(f"lofi: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"lofi: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
