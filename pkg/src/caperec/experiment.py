"""Run configuration, data preparation and end-to-end training runs.

A run config is JSON with these top-level keys (all optional except what the
chosen data source needs)::

    {
      "model": {"backbone": "din", "emb_dim": 16, "pe": {"variant": "cape", "d_pos": 16, "n_max": 30}},
      "train": {"learning_rate": 0.003, "batch_size": 128, "max_epochs": 20, "seed": 0},
      "data": {"train": "train.csv", "valid": "valid.csv", "test": "test.csv"},
      "synthetic": {"n_users": 2000, "n_items": 500, "n_intents": 10},
      "out": "runs/din-cape"
    }

``data`` may instead hold ``{"path": "all.csv", "split": [0.8, 0.1, 0.1]}``
for a user-level split. Without ``data``, the ``synthetic`` spec is generated
in memory. Vocabulary sizes in ``model`` are always taken from the data.
"""

import datetime
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .backbones import BACKBONES, ModelConfig, build_model
from .data import (
    SyntheticSpec,
    Vocabulary,
    encode,
    generate_synthetic,
    parse_csv_dataset,
    split_by_user,
    write_csv,
)
from .errors import ConfigError
from .position import VARIANTS, PEConfig
from .training import TrainConfig, evaluate, item_category_table, train

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: dict = field(default_factory=dict)
    synthetic: SyntheticSpec | None = None
    out: str | None = None

    def problems(self, check_paths=True):
        errs = self.model.problems() + self.train.problems()
        if not self.data and self.synthetic is None:
            errs.append("either data paths or a synthetic spec is required")
        if check_paths:
            paths = [self.data[k] for k in ("path", *SPLITS) if k in self.data]
            errs.extend(f"data path does not exist: {p}" for p in paths if not os.path.exists(p))
        if self.data and "path" not in self.data and not all(k in self.data for k in SPLITS):
            errs.append("data needs either 'path' or all of 'train', 'valid', 'test'")
        return errs

    def validate(self, check_paths=True):
        errs = self.problems(check_paths)
        if errs:
            raise ConfigError("invalid run config:\n  " + "\n  ".join(errs))
        return self

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": dict(self.data),
            "synthetic": None if self.synthetic is None else self.synthetic.to_dict(),
            "out": self.out,
        }


def _section(raw, key, cls, errs):
    sub = raw.get(key) or {}
    unknown = sorted(set(sub) - set(cls.__dataclass_fields__))
    if unknown:
        errs.append(f"unknown {key} keys: {unknown}")
        sub = {k: v for k, v in sub.items() if k not in unknown}
    return sub


def run_config_from_dict(raw):
    errs = []
    unknown = sorted(set(raw) - {"model", "train", "data", "synthetic", "out"})
    if unknown:
        errs.append(f"unknown top-level keys: {unknown}")
    model_raw = _section(raw, "model", ModelConfig, errs)
    pe_raw = dict(model_raw.pop("pe", {}) or {})
    bad_pe = sorted(set(pe_raw) - set(PEConfig.__dataclass_fields__))
    if bad_pe:
        errs.append(f"unknown model.pe keys: {bad_pe}")
        pe_raw = {k: v for k, v in pe_raw.items() if k not in bad_pe}
    train_raw = _section(raw, "train", TrainConfig, errs)
    synth_raw = raw.get("synthetic")
    synthetic = None
    if synth_raw is not None:
        synthetic = SyntheticSpec(**_section(raw, "synthetic", SyntheticSpec, errs))
    if errs:
        raise ConfigError("invalid run config:\n  " + "\n  ".join(errs))
    return RunConfig(
        model=ModelConfig(pe=PEConfig(**pe_raw), **model_raw),
        train=TrainConfig(**train_raw),
        data=dict(raw.get("data") or {}),
        synthetic=synthetic,
        out=raw.get("out"),
    )


def load_run_config(path):
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    cfg = run_config_from_dict(raw)
    base = os.path.dirname(os.path.abspath(path))
    for key, value in list(cfg.data.items()):
        if isinstance(value, str) and not os.path.isabs(value):
            cfg.data[key] = os.path.join(base, value)
    return cfg


def valid_names_message():
    return f"valid backbones: {', '.join(BACKBONES)}; valid variants: {', '.join(VARIANTS)}"


# ---------------------------------------------------------------- data


def load_splits(cfg):
    """Interactions per split, from CSV files or the synthetic generator."""
    n_max = cfg.model.n_max
    if cfg.data.get("path"):
        rows = parse_csv_dataset(cfg.data["path"], n_max)
        fractions = tuple(cfg.data.get("split", (0.8, 0.1, 0.1)))
        return dict(zip(SPLITS, split_by_user(rows, fractions, cfg.train.seed)))
    if cfg.data:
        return {k: parse_csv_dataset(cfg.data[k], n_max) for k in SPLITS}
    ds = generate_synthetic(cfg.synthetic)
    return dict(zip(SPLITS, split_by_user(ds.interactions, seed=cfg.synthetic.seed)))


@dataclass
class Prepared:
    vocab: Vocabulary
    encoded: dict
    item_cats: object
    raw: dict


def prepare(cfg, splits=None):
    splits = splits if splits is not None else load_splits(cfg)
    vocab = Vocabulary.fit(splits["train"])
    encoded = {k: encode(v, vocab, cfg.model.n_max) for k, v in splits.items()}
    cfg.model.n_items, cfg.model.n_cats = vocab.n_items, vocab.n_cats
    return Prepared(vocab, encoded, item_category_table(vocab.n_items, encoded["train"]), splits)


# ---------------------------------------------------------------- runs


def timestamp():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def jsonl_line(row):
    row = dict(row)
    row["meta"] = {"timestamp": timestamp()}
    return json.dumps(row, sort_keys=True)


def checkpoint_metadata(cfg, prepared, best_epoch):
    return {
        "config": cfg.to_dict(),
        "vocab": prepared.vocab.to_dict(),
        "item_cats": prepared.item_cats.tolist(),
        "best_epoch": best_epoch,
    }


def run_training(cfg, out_dir=None, splits=None):
    """Train, pick the best epoch by validation AUC, evaluate it on every split.

    With ``out_dir`` writes ``model.ckpt``, ``metrics.jsonl``, ``report.json``,
    ``config.json`` and the three split CSVs.
    """
    cfg.validate(check_paths=splits is None)
    prepared = prepare(cfg, splits)
    cfg.model.validate()
    model = build_model(cfg.model, cfg.train.seed)

    jsonl = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        for name, rows in prepared.raw.items():
            write_csv(os.path.join(out_dir, f"{name}.csv"), rows)
        jsonl = open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8", newline="\n")

    def on_epoch(row):
        if jsonl is not None:
            jsonl.write(jsonl_line(dict(row, split="valid")) + "\n")
            jsonl.flush()

    try:
        result = train(
            model, prepared.encoded["train"], prepared.encoded["valid"], cfg.train,
            prepared.item_cats, on_epoch,
        )
    finally:
        if jsonl is not None:
            jsonl.close()

    final = {
        name: evaluate(model, data, cfg.train, prepared.item_cats, epoch=result.best_epoch).to_dict()
        for name, data in prepared.encoded.items()
    }
    report = {
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
        "seed": cfg.train.seed,
        "backbone": cfg.model.backbone,
        "variant": cfg.model.pe.variant,
        "metrics": final,
    }
    if out_dir:
        checkpoint.save(
            os.path.join(out_dir, "model.ckpt"), model.state_dict(),
            checkpoint_metadata(cfg, prepared, result.best_epoch),
        )
        with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(dict(report, meta={"timestamp": timestamp()}), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return model, result, report


def load_model(ckpt_path, model_cfg=None):
    """Rebuild a model from a checkpoint; ``model_cfg`` overrides the stored config.

    A config that does not match the stored parameters raises ``ConfigError``
    naming the offending parameter.
    """
    params, meta = checkpoint.load(ckpt_path)
    stored = run_config_from_dict(meta["config"])
    if model_cfg is None:
        model_cfg = stored.model
    else:
        model_cfg.n_items, model_cfg.n_cats = stored.model.n_items, stored.model.n_cats
    model = build_model(model_cfg, stored.train.seed)
    model.load_state_dict(params)
    return model, stored, meta


def evaluate_checkpoint(ckpt_path, data_path, model_cfg=None, train_cfg=None):
    model, stored, meta = load_model(ckpt_path, model_cfg)
    vocab = Vocabulary.from_dict(meta["vocab"])
    rows = parse_csv_dataset(data_path, model.cfg.n_max)
    data = encode(rows, vocab, model.cfg.n_max)
    tcfg = train_cfg or stored.train
    report = evaluate(model, data, tcfg, np.asarray(meta["item_cats"], dtype=np.int64), epoch=meta["best_epoch"])
    return report


def synthetic_run(backbone, variant, seed, spec, model_overrides=None, train_overrides=None):
    """One in-memory run on a synthetic dataset; returns the report dict (no files)."""
    model_kw = dict(emb_dim=16, attn_hidden=[32, 16], head_hidden=[32, 16], n_heads=2, n_blocks=1)
    model_kw.update(model_overrides or {})
    pe_kw = dict(variant=variant, d_pos=16, n_max=spec.context_length_range[1])
    pe_kw.update(model_kw.pop("pe", {}))
    train_kw = dict(learning_rate=3e-3, batch_size=128, max_epochs=20, early_stop_patience=3,
                    seed=seed, eval_negatives=0, ranking_ks=[])
    train_kw.update(train_overrides or {})
    spec = SyntheticSpec(**dict(spec.to_dict(), seed=seed))
    cfg = RunConfig(
        model=ModelConfig(backbone=backbone, pe=PEConfig(**pe_kw), **model_kw),
        train=TrainConfig(**train_kw),
        synthetic=spec,
    )
    _, _, report = run_training(cfg)
    return report

