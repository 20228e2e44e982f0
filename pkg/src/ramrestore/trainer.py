"""Masked pre-training, selective fine-tuning and ablation sweeps."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as modelmod
from .attribution import MacConfig, mac_analysis, n_selected, random_selection
from .degrade import LOW_COST_KINDS, apply, gen_clean, make_suite, sample_spec, stream
from .errors import BadConfig, BadGrid, DivergedLoss, EmptySelection, NonFiniteValue
from .evalkit import evaluate, fmt, psnr
from .masking import Mask, apply_mask, l1, make_mask, masked_l1
from .tensorcore import AdamState, Tensor, adam_step, backward, cosine_lr, no_grad

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "pretrain"
    steps: int = 2000
    batch_size: int = 4
    lr_max: float = 1e-4
    lr_min: float = 6e-5
    mask_ratio: float = 0.5
    mask_patch: int = 1
    seed: int = 0
    kinds: tuple = LOW_COST_KINDS
    weights: tuple = ()
    image_size: int = 32
    eval_every: int = 100
    val_images: int = 8

    @classmethod
    def finetune_defaults(cls, **kw):
        base = dict(stage="finetune", steps=400, lr_max=2e-4, lr_min=1e-7, mask_ratio=0.0)
        base.update(kw)
        return cls(**base)

    def validate(self):
        if self.stage not in STAGES:
            raise BadConfig(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps < 0 or (self.stage == "pretrain" and self.steps < 1):
            raise BadConfig(f"steps must be >= 1, got {self.steps}")
        if not self.lr_max >= self.lr_min > 0:
            raise BadConfig(f"need lr_max >= lr_min > 0, got {self.lr_max}, {self.lr_min}")
        if self.stage == "pretrain" and not 0 < self.mask_ratio < 1:
            raise BadConfig(f"pretrain mask ratio must be in (0, 1), got {self.mask_ratio}")
        if self.batch_size < 1 or self.eval_every < 1 or self.val_images < 1:
            raise BadConfig("batch_size, eval_every and val_images must be >= 1")
        if not self.kinds:
            raise BadConfig("degradation mix is empty")
        if self.weights and (len(self.weights) != len(self.kinds) or min(self.weights) < 0 or sum(self.weights) <= 0):
            raise BadConfig("weights must be non-negative, one per kind, with a positive sum")
        if self.image_size < 16 or self.image_size % self.mask_patch:
            raise BadConfig(f"image_size {self.image_size} must be >= 16 and divisible by the patch")
        return self


@dataclass
class LogRecord:
    step: int
    lr: float
    loss: float
    val_masked_l1: float
    val_psnr: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, rec):
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("log steps must strictly increase")
        self.records.append(rec)

    def losses(self):
        return [r.loss for r in self.records]

    def to_csv(self):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["step", "lr", "loss", "val_masked_l1", "val_psnr"])
        for r in self.records:
            wr.writerow([r.step, f"{r.lr:.6e}", fmt(r.loss), fmt(r.val_masked_l1), fmt(r.val_psnr)])
        return buf.getvalue()


# ---------------------------------------------------------------- data


def _kind_probs(cfg):
    w = np.asarray(cfg.weights if cfg.weights else [1.0] * len(cfg.kinds), dtype=np.float64)
    return w / w.sum()


def sample_pair(cfg, index, name="train"):
    """Clean/degraded pair number ``index`` of a run; RNG indexed by position."""
    rng = stream(cfg.seed, f"{cfg.stage}/{name}/data", index)
    clean = gen_clean(int(rng.integers(0, 2 ** 63)), cfg.image_size, cfg.image_size)
    krng = stream(cfg.seed, f"{cfg.stage}/{name}/degradation", index)
    kind = cfg.kinds[int(krng.choice(len(cfg.kinds), p=_kind_probs(cfg)))]
    spec = sample_spec(kind, krng)
    return clean, apply(spec, clean), spec


def sample_mask(cfg, index, name="train"):
    seed = int(stream(cfg.seed, f"{cfg.stage}/{name}/mask", index).integers(0, 2 ** 63))
    return make_mask(cfg.image_size, cfg.image_size, cfg.mask_ratio or 0.5, cfg.mask_patch, seed)


def make_batch(cfg, step):
    idx = [step * cfg.batch_size + b for b in range(cfg.batch_size)]
    pairs = [sample_pair(cfg, i) for i in idx]
    clean = np.stack([p[0] for p in pairs])
    deg = np.stack([p[1] for p in pairs])
    masks = Mask.stack(sample_mask(cfg, i) for i in idx)
    return clean, deg, masks


@dataclass
class ValSet:
    clean: np.ndarray
    degraded: np.ndarray
    masks: Mask


def make_valset(cfg):
    """Held-out pairs and masks; independent of the stage so that pre-training
    and fine-tuning report on the same images."""
    base = replace(cfg, stage="pretrain", mask_ratio=0.5)
    pairs = [sample_pair(base, i, name="val") for i in range(cfg.val_images)]
    masks = Mask.stack(sample_mask(base, i, name="val") for i in range(cfg.val_images))
    return ValSet(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]), masks)


def validate_model(model, val):
    with no_grad():
        masked_pred, _ = model.forward(Tensor(apply_mask(val.degraded, val.masks)))
        ml1 = masked_l1(masked_pred, val.clean, val.masks).item()
        whole = model.predict(val.degraded)
    p = math.fsum(psnr(a, b) for a, b in zip(whole, val.clean)) / len(whole)
    return ml1, p


# ---------------------------------------------------------------- loops


def _train(model, cfg, trainable, loss_fn, out_dir=None):
    """Shared Adam + cosine loop; ``loss_fn(model, step)`` returns a scalar Tensor."""
    model.set_trainable(trainable)
    params = model.parameters(trainable_only=True)
    state = AdamState()
    val = make_valset(cfg)
    trace = TrainLog()
    total = max(cfg.steps - 1, 1)
    ml1, vp = validate_model(model, val)
    trace.append(LogRecord(0, cosine_lr(0, total, cfg.lr_max, cfg.lr_min), math.nan, ml1, vp))
    window = []
    for step in range(cfg.steps):
        lr = cosine_lr(min(step, total), total, cfg.lr_max, cfg.lr_min)
        try:
            loss = loss_fn(model, step)
            grads = backward(loss)
        except NonFiniteValue as exc:
            raise DivergedLoss(f"{cfg.stage} step {step + 1}: {exc}") from exc
        value = loss.item()
        if not math.isfinite(value):
            raise DivergedLoss(f"{cfg.stage} step {step + 1}: loss {value}")
        adam_step(params, {n: grads[p] for n, p in params.items() if p in grads}, state, lr)
        window.append(value)
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.steps:
            try:
                ml1, vp = validate_model(model, val)
            except NonFiniteValue as exc:
                raise DivergedLoss(f"{cfg.stage} step {done}: validation {exc}") from exc
            trace.append(LogRecord(done, lr, math.fsum(window) / len(window), ml1, vp))
            log.info("%s step %d loss %.5f val_l1 %.5f val_psnr %.3f", cfg.stage, done, trace.records[-1].loss, ml1, vp)
            window = []
            if out_dir is not None:
                modelmod.save(model, Path(out_dir) / f"{cfg.stage}_latest.ramc", state, done)
    return trace


def pretrain(model, cfg, out_dir=None):
    """Masked image modelling on paired data: reconstruct the hidden pixels of
    the clean image from the visible pixels of the degraded one."""
    cfg = cfg.validate()
    if cfg.stage != "pretrain":
        raise BadConfig("pretrain needs a pretrain-stage config")

    def loss_fn(m, step):
        clean, deg, masks = make_batch(cfg, step)
        pred, _ = m.forward(Tensor(apply_mask(deg, masks)))
        return masked_l1(pred, clean, masks)

    trace = _train(model, cfg, model.names, loss_fn, out_dir)
    model.set_trainable(model.names)
    return model, trace


def finetune(model, selected, cfg, out_dir=None):
    """Whole-image L1 fine-tuning of ``selected`` layers; the rest stay frozen."""
    cfg = cfg.validate()
    if cfg.stage != "finetune":
        raise BadConfig("finetune needs a finetune-stage config")
    selected = list(selected)
    if not selected:
        raise EmptySelection("no layers selected for fine-tuning")

    def loss_fn(m, step):
        clean, deg, _ = make_batch(cfg, step)
        pred, _ = m.forward(Tensor(deg))
        return l1(pred, clean)

    trace = _train(model, cfg, selected, loss_fn, out_dir)
    return model, trace


def write_log(trace, path):
    Path(path).write_text(trace.to_csv())


# ---------------------------------------------------------------- pipeline and ablations


@dataclass(frozen=True)
class PipelineConfig:
    model: modelmod.ModelConfig = modelmod.ModelConfig()
    pretrain: TrainConfig = TrainConfig()
    mac: MacConfig = MacConfig()
    finetune: TrainConfig = TrainConfig.finetune_defaults()
    k_percent: float = 10.0
    eval_kinds: tuple = LOW_COST_KINDS
    eval_images: int = 8
    mac_kinds: tuple = LOW_COST_KINDS
    ood_kind: str = "saltpepper"
    seeds: tuple = (0,)

    def with_seed(self, seed):
        return replace(
            self,
            pretrain=replace(self.pretrain, seed=seed),
            finetune=replace(self.finetune, seed=seed),
            mac=replace(self.mac, seed=seed),
        )


def _config_key(*parts):
    text = repr(tuple(asdict(p) if hasattr(p, "__dataclass_fields__") else p for p in parts))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def pretrained_model(cfg, seed, cache_dir=None):
    """Build and pre-train, reusing a cached checkpoint for identical configs."""
    pcfg = replace(cfg.pretrain, seed=seed)
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"pretrain-{_config_key(cfg.model, pcfg)}.ramc"
        if path.exists():
            return modelmod.load(path)
    model = modelmod.build(cfg.model, seed)
    pretrain(model, pcfg)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(f".tmp{os.getpid()}")
        modelmod.save(model, tmp)
        os.replace(tmp, path)
    return model


def mac_suite(cfg, seed):
    return make_suite(cfg.mac_kinds, cfg.mac.samples, cfg.pretrain.image_size, seed, name="mac")


def eval_suite(cfg, seed, kinds=None):
    return make_suite(kinds or cfg.eval_kinds, cfg.eval_images, cfg.pretrain.image_size, seed + 10_000, name="eval")


def select_layers(model, cfg, seed, strategy="mac", k_percent=None):
    k = cfg.k_percent if k_percent is None else k_percent
    if strategy == "random":
        return random_selection(model.names, k, seed)
    if strategy not in ("mac", "ig"):
        raise BadGrid(f"unknown selection strategy {strategy!r}")
    report = mac_analysis(model, mac_suite(cfg, seed), replace(cfg.mac, seed=seed), k, method=strategy)
    return report.selected


def _row(kind, variant, seed, model, cfg, selected, ood=False):
    res = evaluate(model, eval_suite(cfg, seed))
    row = {
        "ablation": kind,
        "variant": str(variant),
        "seed": seed,
        "psnr": res.overall_psnr,
        "ssim": res.overall_ssim,
        "ood_psnr": math.nan,
        "layers": "|".join(selected),
    }
    if ood:
        row["ood_psnr"] = evaluate(model, eval_suite(cfg, seed, (cfg.ood_kind,))).overall_psnr
    return row


ABLATIONS = ("mask_ratio", "patch_size", "finetune_ratio", "selection_strategy")


def run_ablation(kind, grid, base, cache_dir=None):
    """One row per (grid point, seed), all variants trained under identical seeds."""
    if kind not in ABLATIONS:
        raise BadGrid(f"unknown ablation {kind!r}")
    grid = list(grid)
    if not grid:
        raise BadGrid("ablation grid is empty")
    rows = []
    for seed in base.seeds:
        if kind in ("mask_ratio", "patch_size"):
            for value in grid:
                field_name = "mask_ratio" if kind == "mask_ratio" else "mask_patch"
                cast = float if kind == "mask_ratio" else int
                cfg = replace(base, pretrain=replace(base.pretrain, **{field_name: cast(value)}))
                model = pretrained_model(cfg, seed, cache_dir)
                selected = select_layers(model, cfg, seed)
                finetune(model, selected, replace(cfg.finetune, seed=seed))
                rows.append(_row(kind, value, seed, model, cfg, selected))
            continue
        pre = pretrained_model(base, seed, cache_dir)
        report = None
        for value in grid:
            if kind == "finetune_ratio":
                if report is None:
                    report = mac_analysis(pre, mac_suite(base, seed), replace(base.mac, seed=seed), 100.0)
                k = float(value)
                selected = report.ranked[:n_selected(k, len(report.ranked))]
            else:
                selected = select_layers(pre, base, seed, strategy=str(value))
            model = pre.copy()
            finetune(model, selected, replace(base.finetune, seed=seed))
            rows.append(_row(kind, value, seed, model, base, selected, ood=kind == "finetune_ratio"))
    return rows


ABLATION_COLUMNS = ["ablation", "variant", "seed", "psnr", "ssim", "ood_psnr", "layers"]


def ablation_csv(rows):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(ABLATION_COLUMNS)
    for r in rows:
        wr.writerow([
            r["ablation"], r["variant"], r["seed"], fmt(r["psnr"]), fmt(r["ssim"]),
            "" if math.isnan(r["ood_psnr"]) else fmt(r["ood_psnr"]), r["layers"],
        ])
    return buf.getvalue()
