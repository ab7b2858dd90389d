"""faithbench command line.

Configuration is a flat UTF-8 ``key = value`` file; ``--set key=value`` overrides
single keys. Every command writes ``manifest.json`` into its output directory
before doing any work; ``faithbench replay manifest.json`` re-executes it.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import html
import json
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import faitheval as fe
from . import plots
from .attribution import METHODS, attribute, predict_labels, top_k_rationale
from .diffcore import NonFiniteError
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .regex_train import (LAMBDA4_SWEEP, MASK_RATIO_SWEEP, RegexTrainConfig, TrainingDiverged, VatConfig,
                          evaluate_f1, train)
from .textdata import (UNK, DataError, SynthSpec, TokenizedExample, Vocabulary, build_vocab, load_jsonl,
                       synth_generate, tokenize, write_synth)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OOV_LIMIT = 0.5


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULTS: dict = {
    # data
    "train_file": "",
    "dev_file": "",
    "test_file": "",
    "num_classes": 2,
    "max_len": 64,
    "min_frequency": 1,
    # model
    "embed_dim": 32,
    "num_layers": 2,
    "num_heads": 4,
    "ffn_dim": 64,
    "dropout_rate": 0.1,
    # training
    "mode": "regex",
    "seed": 0,
    "lambda1": 1.0,
    "lambda2": 0.01,
    "lambda3": 0.5,
    "lambda4": 0.01,
    "mask_ratio": 0.15,
    "mask_mode": "mask",
    "kl_order": "att_ig",
    "attention_scope": "last",
    "vat_eps": 1e-5,
    "vat_step": 1e-3,
    "vat_steps": 2,
    "vat_sigma": 1e-5,
    "vat_norm": "linf",
    "vat_symmetric": False,
    "ig_steps": 8,
    "igr_mode": "finite-diff",
    "igr_h": 1e-4,
    "disable_vat": False,
    "disable_igr": False,
    "disable_egt": False,
    "lr_encoder": 1e-3,
    "lr_head": 1e-3,
    "weight_decay": 0.01,
    "batch_size": 32,
    "epochs": 3,
    "grad_clip": 1.0,
    "grad_accum_fraction": 0.1,
    # evaluation
    "methods": "rand,attention,scaled_attention,saliency,inputxgrad,ig,deeplift",
    "eval_ig_steps": 50,
    "aggregation": "l2",
    "eval_limit": 0,
    "erasure": "delete",
    "fresh_k": 0.2,
    "fresh_methods": "scaled_attention,rand",
    "jaccard_k": 0.25,
    "jaccard_method": "scaled_attention",
}

_TRAIN_KEYS = ("mode", "seed", "lambda1", "lambda2", "lambda3", "lambda4", "mask_ratio", "mask_mode", "kl_order",
               "attention_scope", "ig_steps", "igr_mode", "igr_h", "disable_vat", "disable_igr", "disable_egt",
               "lr_encoder", "lr_head", "weight_decay", "batch_size", "epochs", "grad_clip", "grad_accum_fraction")


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _assign(cfg: dict, key: str, raw: str, where: str) -> None:
    key = key.strip()
    if key not in DEFAULTS:
        raise ConfigError(f"{where}: unknown key {key!r}; valid keys: {', '.join(sorted(DEFAULTS))}")
    cfg[key] = _parse_value(key, raw)


def parse_config_text(text: str, where: str = "config") -> dict:
    cfg: dict = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: line {n}: expected 'key = value'")
        k, v = line.split("=", 1)
        _assign(cfg, k, v, f"{where}: line {n}")
    return cfg


def resolve_config(path: Optional[str], overrides=()) -> dict:
    cfg = dict(DEFAULTS)
    base = Path(".")
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} not found")
        cfg.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
        base = p.parent
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _assign(cfg, k, v, "--set")
    for key in ("train_file", "dev_file", "test_file"):
        if cfg[key] and not Path(cfg[key]).is_absolute():
            cfg[key] = str((base / cfg[key]).resolve())
    return cfg


def render_config(cfg: dict) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        return repr(v) if isinstance(v, float) else str(v)
    return "".join(f"{k} = {fmt(cfg[k])}\n" for k in DEFAULTS)


def config_digest(cfg: dict, keys=None) -> str:
    keys = keys or list(DEFAULTS)
    blob = json.dumps({k: cfg[k] for k in keys}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def train_config(cfg: dict) -> RegexTrainConfig:
    try:
        vat = VatConfig(eps=cfg["vat_eps"], step=cfg["vat_step"], steps=cfg["vat_steps"], sigma=cfg["vat_sigma"],
                        norm=cfg["vat_norm"], symmetric=cfg["vat_symmetric"])
        return RegexTrainConfig(vat=vat, **{k: cfg[k] for k in _TRAIN_KEYS})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def model_config(cfg: dict, vocab_size: int) -> ModelConfig:
    try:
        return ModelConfig(vocab_size=vocab_size, num_classes=cfg["num_classes"], embed_dim=cfg["embed_dim"],
                           num_layers=cfg["num_layers"], num_heads=cfg["num_heads"], ffn_dim=cfg["ffn_dim"],
                           max_len=cfg["max_len"], dropout_rate=cfg["dropout_rate"], seed=cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def method_list(spec: str) -> list:
    ms = [m.strip() for m in spec.split(",") if m.strip()]
    bad = [m for m in ms if m not in METHODS]
    if bad or not ms:
        raise ConfigError(f"unknown attribution method(s) {bad}; valid: {', '.join(METHODS)}")
    return ms


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    args: dict
    config: Optional[str]
    seeds: list
    inputs: dict
    outputs: list
    version: str = __version__

    def write(self, out_dir) -> Path:
        p = Path(out_dir) / "manifest.json"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _inputs(*paths) -> dict:
    out = {}
    for p in paths:
        if p:
            if not Path(p).is_file():
                raise DataError(f"input file {p} not found")
            out[str(p)] = file_digest(p)
    return out


# ---------------------------------------------------------------------------
# shared steps
# ---------------------------------------------------------------------------

def load_split(path: str, vocab: Vocabulary, cfg: dict, check_oov: bool = False) -> list:
    if not path:
        raise DataError("dataset path not configured")
    if not Path(path).is_file():
        raise DataError(f"dataset file {path} not found")
    rows = load_jsonl(path, cfg["num_classes"])
    examples = [tokenize(t, vocab, cfg["max_len"], y) for t, y in rows]
    if check_oov:
        content = sum(e.length - 2 for e in examples)
        unk = sum(1 for e in examples for i in e.content_positions if e.ids[i] == UNK)
        if content and unk / content > OOV_LIMIT:
            raise DataError(f"{path}: {unk}/{content} tokens are outside the checkpoint vocabulary; "
                            "the dataset does not match this checkpoint")
    return examples


def _limit(examples, cfg):
    n = cfg["eval_limit"]
    return examples[:n] if n > 0 else examples


def train_from_config(cfg: dict, log_path=None, seed: Optional[int] = None):
    """Build the vocabulary, initialise and train. Returns (model, vocab, result, splits)."""
    if seed is not None:
        cfg = dict(cfg, seed=seed)
    if not cfg["train_file"]:
        raise DataError("train_file is not configured")
    if not Path(cfg["train_file"]).is_file():
        raise DataError(f"dataset file {cfg['train_file']} not found")
    rows = load_jsonl(cfg["train_file"], cfg["num_classes"])
    vocab = build_vocab((t for t, _ in rows), cfg["min_frequency"])
    tr = [tokenize(t, vocab, cfg["max_len"], y) for t, y in rows]
    dv = load_split(cfg["dev_file"], vocab, cfg) if cfg["dev_file"] else []
    tcfg = train_config(cfg)
    model = init_params(model_config(cfg, len(vocab)), seed=cfg["seed"])
    result = train(model, tr, dv, tcfg, log_path=log_path)
    return model, vocab, result, (tr, dv)


def _extra(cfg: dict, result) -> dict:
    return {"config": render_config(cfg), "best_epoch": result.best_epoch, "best_dev_macro_f1": result.best_f1}


def cached_train(cfg: dict, seed: int):
    """Train, or load the checkpoint cached under the config digest."""
    cfg = dict(cfg, seed=seed)
    cache = Path(os.environ.get("FAITHBENCH_CACHE", Path.home() / ".cache" / "faithbench"))
    inputs = _inputs(cfg["train_file"], cfg["dev_file"])
    key = config_digest({**cfg, "_inputs": sorted(inputs.values())}, list(DEFAULTS) + ["_inputs"])
    path = cache / f"{key}.ckpt"
    if path.is_file():
        model, vocab, _ = load_checkpoint(path)
        return model, vocab
    model, vocab, result, _ = train_from_config(cfg)
    cache.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_checkpoint(tmp, model, vocab, _extra(cfg, result))
    tmp.replace(path)
    return model, vocab


def evaluate_model(model, examples, cfg: dict, methods) -> fe.FaithfulnessReport:
    from .attribution import IgConfig

    rep = fe.evaluate_faithfulness(model, examples, methods, substitute=cfg["erasure"] == "substitute",
                                   seed=cfg["seed"], aggregation=cfg["aggregation"],
                                   ig=IgConfig(cfg["eval_ig_steps"]), scope=cfg["attention_scope"])
    rep.settings.update({"aggregation": cfg["aggregation"], "ig_steps": cfg["eval_ig_steps"],
                         "kl_order": cfg["kl_order"]})
    return rep


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    out = Path(args.out)
    spec = SynthSpec(n_train=args.n_train, n_dev=args.n_dev, n_test=args.n_test, seed=args.seed,
                     vocab_size=args.vocab_size, min_length=args.min_length, max_length=args.max_length,
                     keyword_rate=args.keyword_rate, num_classes=args.num_classes)
    RunManifest("synth-data", _args_dict(args), None, [args.seed], {},
                [str(out / f"{s}.jsonl") for s in ("train", "dev", "test")]).write(out)
    write_synth(synth_generate(spec), out)
    base = dict(train_file="train.jsonl", dev_file="dev.jsonl", test_file="test.jsonl",
                num_classes=args.num_classes, max_len=args.max_length + 2)
    (out / "base.cfg").write_text("".join(f"{k} = {v}\n" for k, v in base.items()), encoding="utf-8")
    print(f"wrote synthetic corpus to {out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    out = Path(args.out)
    inputs = _inputs(cfg["train_file"], cfg["dev_file"])
    RunManifest("train", _args_dict(args), render_config(cfg), [cfg["seed"]], inputs,
                [str(out / n) for n in ("model.ckpt", "train_log.jsonl", "training.png")]).write(out)
    model, vocab, result, _ = train_from_config(cfg, log_path=out / "train_log.jsonl")
    save_checkpoint(out / "model.ckpt", model, vocab, _extra(cfg, result))
    plots.training_curve(result.log, out / "training.png")
    print(f"best dev macro F1 {result.best_f1:.4f} at epoch {result.best_epoch + 1}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def _load(args, cfg):
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint {args.checkpoint} not found")
    model, vocab, extra = load_checkpoint(args.checkpoint)
    if vocab is None:
        raise DataError(f"checkpoint {args.checkpoint} carries no vocabulary")
    if model.config.num_classes != cfg["num_classes"]:
        cfg["num_classes"] = model.config.num_classes
    cfg["max_len"] = min(cfg["max_len"], model.config.max_len)
    return model, vocab


def cmd_evaluate(args, cfg) -> int:
    out = Path(args.out)
    methods = method_list(args.methods or cfg["methods"])
    data = args.data or cfg["test_file"]
    RunManifest("evaluate", _args_dict(args), render_config(cfg), [cfg["seed"]], _inputs(args.checkpoint, data),
                [str(out / n) for n in ("faithfulness.json", "faithfulness.csv", "faithfulness.png")]).write(out)
    model, vocab = _load(args, cfg)
    examples = _limit(load_split(data, vocab, cfg, check_oov=True), cfg)
    rep = evaluate_model(model, examples, cfg, methods)
    rep.write(out)
    plots.faithfulness_bars(rep.to_json(), out / "faithfulness.png")
    for name, m in rep.methods.items():
        print(f"{name:18s} AOPC suff {m.aopc_sufficiency:.4f}  comp {m.aopc_comprehensiveness:.4f}")
    return EXIT_OK


def _tint(score: float, scale: float) -> str:
    a = 0.0 if scale == 0 else min(1.0, abs(score) / scale)
    rgb = "220,50,47" if score >= 0 else "38,139,210"
    return f"rgba({rgb},{a:.3f})"


def cmd_explain(args, cfg) -> int:
    from .attribution import IgConfig

    out = Path(args.out)
    method = method_list(args.method)[0]
    data = args.data or cfg["test_file"]
    RunManifest("explain", _args_dict(args), render_config(cfg), [cfg["seed"]], _inputs(args.checkpoint, data),
                [str(out / n) for n in ("explanations.jsonl", "explanations.html")]).write(out)
    model, vocab = _load(args, cfg)
    examples = _limit(load_split(data, vocab, cfg, check_oov=True), cfg)
    preds = predict_labels(model, examples)
    attrs = attribute(model, examples, method, targets=preds, seed=cfg["seed"], aggregation=cfg["aggregation"],
                      ig=IgConfig(cfg["eval_ig_steps"]), scope=cfg["attention_scope"])
    lines, blocks = [], []
    for i, (e, a, y) in enumerate(zip(examples, attrs, preds)):
        kept = set(top_k_rationale(a, args.k).kept)
        tokens = [vocab.itos[e.ids[p]] for p in a.positions]
        lines.append(json.dumps({"index": i, "label": e.label, "predicted": int(y), "method": method,
                                 "tokens": tokens, "positions": list(a.positions),
                                 "scores": [float(s) for s in a.scores],
                                 "highlight": sorted(kept)}, ensure_ascii=False, sort_keys=True))
        scale = float(np.abs(a.scores).max()) if len(a.scores) else 0.0
        spans = []
        for p, tok, s in zip(a.positions, tokens, a.scores):
            style = f"background:{_tint(float(s), scale)}" + (";font-weight:bold;text-decoration:underline"
                                                               if p in kept else "")
            spans.append(f'<span style="{style}" title="{float(s):.4g}">{html.escape(tok)}</span>')
        blocks.append(f"<p><small>#{i} gold={e.label} pred={int(y)}</small><br>{' '.join(spans)}</p>")
    out.mkdir(parents=True, exist_ok=True)
    (out / "explanations.jsonl").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    page = ("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>"
            f"{html.escape(method)} top-{args.k:g}</title></head>\n<body style=\"font-family:sans-serif\">\n"
            + "\n".join(blocks) + "\n</body></html>\n")
    (out / "explanations.html").write_text(page, encoding="utf-8")
    print(f"explained {len(examples)} examples with {method}")
    return EXIT_OK


def cmd_fresh(args, cfg) -> int:
    out = Path(args.out)
    methods = method_list(cfg["fresh_methods"])
    k = cfg["fresh_k"]
    RunManifest("fresh", _args_dict(args), render_config(cfg), [cfg["seed"]],
                _inputs(cfg["train_file"], cfg["dev_file"], cfg["test_file"]),
                [str(out / n) for n in ("fresh.csv", "fresh.png")]).write(out)
    source, vocab = cached_train(cfg, cfg["seed"])
    splits = [load_split(cfg[f], vocab, cfg) for f in ("train_file", "dev_file", "test_file")]
    base_cfg = replace(train_config(cfg), mode="baseline")
    full_cfg = dict(cfg, mode="baseline")
    full, _ = cached_train(full_cfg, cfg["seed"])
    full_f1 = evaluate_f1(full, splits[2])[0]
    results = [fe.fresh_evaluate(source, m, k, splits, base_cfg, full_text_f1=full_f1, seed=cfg["seed"])
               for m in methods]
    fe.write_fresh(results, out / "fresh.csv")
    plots.fresh_bars(results, out / "fresh.png")
    for r in results:
        print(f"{r.method:18s} k={r.k:g} rationale F1 {r.rationale_f1:.4f}  full text {r.full_text_f1:.4f}")
    return EXIT_OK


def _seeds(text: str) -> list:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from None
    return seeds


def cmd_consistency(args, cfg) -> int:
    out = Path(args.out)
    seeds = _seeds(args.seeds)
    if len(seeds) < 2:
        raise ConfigError("consistency needs at least two seeds")
    RunManifest("consistency", _args_dict(args), render_config(cfg), seeds,
                _inputs(cfg["train_file"], cfg["dev_file"], cfg["test_file"]),
                [str(out / n) for n in ("consistency.csv", "consistency.png")]).write(out)
    models, names, vocab = [], [], None
    for s in seeds:
        m, v = cached_train(cfg, s)
        if vocab is not None and v != vocab:
            raise DataError("models disagree on vocabulary")
        vocab = v
        models.append(m)
        names.append(f"seed{s}")
    if args.include_untrained:
        models.append(init_params(models[0].config, seed=max(seeds) + 1000))
        names.append("untrained")
    examples = _limit(load_split(cfg["test_file"], vocab, cfg), cfg)
    rep = fe.jaccard_consistency(models, examples, method_list(cfg["jaccard_method"])[0], cfg["jaccard_k"],
                                 names=names, seed=cfg["seed"], scope=cfg["attention_scope"])
    rep.write(out / "consistency.csv")
    plots.consistency_heatmap(names, rep.matrix, out / "consistency.png",
                              f"{rep.method} Jaccard@{100 * rep.k:g}%")
    print(f"wrote {len(names)}x{len(names)} Jaccard matrix to {out / 'consistency.csv'}")
    return EXIT_OK


COMPONENT_ROWS = (
    ("full", {}),
    ("w/o robustness", {"disable_vat": True, "disable_igr": True}),
    ("w/o EGT", {"disable_egt": True}),
    ("w/o VAT", {"disable_vat": True}),
    ("w/o IGR", {"disable_igr": True}),
)


def sweep_points(sweep: str) -> list:
    if sweep == "lambda4":
        return [(v, {"lambda4": v}) for v in LAMBDA4_SWEEP]
    if sweep == "mask_ratio":
        return [(v, {"mask_ratio": v}) for v in MASK_RATIO_SWEEP]
    if sweep == "aggregation":
        return [(v, {"aggregation": v}) for v in ("l2", "mean")]
    if sweep == "components":
        return list(COMPONENT_ROWS)
    raise ConfigError(f"unknown sweep {sweep!r}; valid: lambda4, mask_ratio, aggregation, components")


def cmd_ablation(args, cfg) -> int:
    out = Path(args.out)
    points = sweep_points(args.sweep)
    methods = method_list(cfg["methods"])
    RunManifest("ablation", _args_dict(args), render_config(cfg), [cfg["seed"]],
                _inputs(cfg["train_file"], cfg["dev_file"], cfg["test_file"]),
                [str(out / n) for n in ("ablation.csv", "ablation.png")]).write(out)
    rows = []
    for value, change in points:
        pcfg = dict(cfg, mode="regex", **change)
        model, vocab = cached_train(pcfg, pcfg["seed"])
        test = _limit(load_split(cfg["test_file"], vocab, cfg), cfg)
        f1 = evaluate_f1(model, test)[0]
        rep = evaluate_model(model, test, pcfg, methods)
        for name, m in rep.methods.items():
            rows.append({"value": value, "method": name, "suff": m.aopc_sufficiency,
                         "comp": m.aopc_comprehensiveness, "test_macro_f1": f1})
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([args.sweep, "method", "suff", "comp", "test_macro_f1"])
        for r in rows:
            w.writerow([r["value"], r["method"], f"{r['suff']:.12g}", f"{r['comp']:.12g}",
                        f"{r['test_macro_f1']:.12g}"])
    plots.sweep_lines(rows, args.sweep, out / "ablation.png")
    print(f"wrote {len(rows)} rows to {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_replay(args, cfg) -> int:
    man = RunManifest.read(args.manifest)
    for path, digest in man.inputs.items():
        if not Path(path).is_file() or file_digest(path) != digest:
            raise DataError(f"input {path} changed since the manifest was written")
    argv = _argv_from(man, args.out)
    return main(argv, config_text=man.config)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_ARG_SKIP = {"func", "config", "set", "manifest", "command"}


def _args_dict(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _ARG_SKIP}


def _argv_from(man: RunManifest, out: Optional[str]) -> list:
    argv = [man.command]
    for k, v in sorted(man.args.items()):
        if k == "out" and out:
            v = out
        if v is None or v is False:
            continue
        flag = "--" + k.replace("_", "-")
        argv += [flag] if v is True else [flag, str(v)]
    return argv


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="faithbench", description="Faithfulness-oriented training and evaluation.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="flat key = value configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("synth-data", help="write a planted-keyword corpus")
    common(sp)
    sp.add_argument("--n-train", type=int, default=5000)
    sp.add_argument("--n-dev", type=int, default=500)
    sp.add_argument("--n-test", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--vocab-size", type=int, default=400)
    sp.add_argument("--min-length", type=int, default=8)
    sp.add_argument("--max-length", type=int, default=24)
    sp.add_argument("--keyword-rate", type=float, default=0.1)
    sp.add_argument("--num-classes", type=int, default=2)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a classifier")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="faithfulness report for a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="JSONL dataset (defaults to test_file)")
    sp.add_argument("--methods", help="comma-separated attribution methods")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("explain", help="per-token scores as JSONL and HTML")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--method", default="scaled_attention")
    sp.add_argument("--k", type=float, default=0.25)
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("fresh", help="select-then-predict retraining on rationales")
    common(sp)
    sp.set_defaults(func=cmd_fresh)

    sp = sub.add_parser("consistency", help="Jaccard agreement across seeds")
    common(sp)
    sp.add_argument("--seeds", default="1,2,3,4")
    sp.add_argument("--include-untrained", action="store_true")
    sp.set_defaults(func=cmd_consistency)

    sp = sub.add_parser("ablation", help="train and evaluate across a sweep")
    common(sp)
    sp.add_argument("--sweep", required=True, choices=("lambda4", "mask_ratio", "aggregation", "components"))
    sp.set_defaults(func=cmd_ablation)

    sp = sub.add_parser("replay", help="re-execute a run from its manifest")
    sp.add_argument("manifest")
    sp.add_argument("--out", help="output directory (defaults to the recorded one)")
    sp.set_defaults(func=cmd_replay)
    return p


def main(argv=None, config_text: Optional[str] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        if args.command == "replay":
            cfg = {}
        elif config_text is not None:
            cfg = dict(DEFAULTS)
            cfg.update(parse_config_text(config_text, "manifest"))
        else:
            cfg = resolve_config(args.config, args.set)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
