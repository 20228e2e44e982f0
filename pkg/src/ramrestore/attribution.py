"""Layer attribution: integrated gradients, conductance and Mask Attribute
Conductance (MAC) along a pixel-by-pixel un-masking path.

The mask attribute path reveals pixel ``i`` around its own transition point
``alpha_i`` through a steep sigmoid::

    X_i(alpha) = x'_i + (x_i - x'_i) * sigmoid(delta * (alpha - alpha_i))

with baseline ``x' = 0``. MAC of a hidden unit ``y`` is the conductance along
that path, discretised as ``sum_j dF/dy(a_j) * (y(a_{j+1}) - y(a_j))``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import expit

from .degrade import stream
from .errors import BadConfig, EmptySuite, NonFiniteAccumulation, NonScalarF, ShapeMismatch
from .tensorcore import Tensor, absolute, backward, grad, mean, no_grad, scale, sub
from .tensorcore import sum as tsum

READOUTS = ("mean", "l1")
METHODS = ("mac", "ig")


@dataclass(frozen=True)
class MacConfig:
    delta: float = 10000.0
    ratio: float = 0.5
    steps: int = 200
    samples: int = 10
    readout: str = "mean"
    signed: bool = False
    chunk: int = 16
    seed: int = 0

    def validate(self):
        if self.steps < 2:
            raise BadConfig(f"steps must be >= 2, got {self.steps}")
        if not 0.0 < self.ratio <= 1.0:
            raise BadConfig(f"ratio must be in (0, 1], got {self.ratio}")
        if self.samples < 1:
            raise BadConfig(f"samples must be >= 1, got {self.samples}")
        if not self.delta > 0:
            raise BadConfig(f"delta must be > 0, got {self.delta}")
        if self.readout not in READOUTS:
            raise BadConfig(f"readout must be one of {READOUTS}, got {self.readout!r}")
        if self.chunk < 1:
            raise BadConfig(f"chunk must be >= 1, got {self.chunk}")
        return self


@dataclass(frozen=True)
class PathSchedule:
    alphas: np.ndarray
    delta: float

    def __post_init__(self):
        if not self.delta > 0:
            raise BadConfig(f"delta must be > 0, got {self.delta}")


def make_schedule(h, w, delta=10000.0, seed=0):
    """Transition points: a seeded shuffle of {1/HW, 2/HW, ..., 1}."""
    n = h * w
    order = np.random.default_rng(seed).permutation(n) + 1
    return PathSchedule(order.reshape(h, w) / n, float(delta))


def path_point(x, schedule, alpha):
    """Point on the mask attribute path; channels of a pixel share ``alpha_i``.

    The endpoints are pinned: ``alpha <= 0`` gives the zero baseline and
    ``alpha >= 1`` gives ``x`` exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != schedule.alphas.shape:
        raise ShapeMismatch(f"schedule {schedule.alphas.shape} vs input {x.shape[-2:]}")
    if alpha <= 0.0:
        return np.zeros_like(x)
    if alpha >= 1.0:
        return x.copy()
    return x * expit(schedule.delta * (alpha - schedule.alphas))


def mask_path_grid(ratio, steps):
    """Evaluation points a_0..a_N over [1 - r, 1], offset by half a step.

    The half-step keeps grid points off the transition centres; the last
    point lands beyond 1 and therefore on ``x`` itself.
    """
    j = np.arange(steps + 1)
    return (1.0 - ratio) + (j + 0.5) * ratio / steps


def linear_path_grid(steps):
    return np.arange(steps + 1) / steps


IG_RULES = ("left", "midpoint")


def integrated_gradients(F, x, x_base=None, steps=50, rule="left"):
    """Riemann-sum integrated gradients of scalar ``F`` from ``x_base`` to ``x``.

    ``rule="left"`` samples alpha = k/steps; ``"midpoint"`` samples
    (k + 1/2)/steps, which skips the baseline itself.
    """
    x = np.asarray(x, dtype=np.float64)
    x_base = np.zeros_like(x) if x_base is None else np.asarray(x_base, dtype=np.float64)
    if x.shape != x_base.shape:
        raise ShapeMismatch(f"x {x.shape} vs baseline {x_base.shape}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if rule not in IG_RULES:
        raise ValueError(f"rule must be one of {IG_RULES}, got {rule!r}")
    offset = 0.5 if rule == "midpoint" else 0.0
    diff = x - x_base
    total = np.zeros_like(x)
    for k in range(steps):
        point = Tensor(x_base + ((k + offset) / steps) * diff, requires_grad=True)
        out = F(point)
        if out.size != 1:
            raise NonScalarF(f"F must return a scalar, got shape {out.shape}")
        if out.requires_grad:
            total += grad(out, point).data
    return diff * total / steps


# ---------------------------------------------------------------- readouts


def readout_mean(out, target=None):
    return mean(out, axis=(1, 2, 3))


def readout_l1(out, target):
    if target is None:
        raise BadConfig("the l1 readout needs a clean target")
    return scale(mean(absolute(sub(out, Tensor(target))), axis=(1, 2, 3)), -1.0)


def readout_fn(name):
    return {"mean": readout_mean, "l1": readout_l1}[name]


def _frozen_copy(model):
    # attribution needs activation gradients only; frozen weights skip dW work
    frozen = model.copy()
    frozen.set_trainable(())
    return frozen


def path_conductance(model, points, layers, readout, target=None, chunk=16):
    """sum_j dF/dy(p_j) * (y(p_{j+1}) - y(p_j)) for every tapped layer.

    ``points`` is a sequence of input images along a path. Per-sample readouts
    are independent, so grid points are pushed through the network in
    batches and the gradient of their sum gives each point's own gradient.
    """
    model = _frozen_copy(model)
    layers = list(layers)
    for name in layers:
        model.layer(name)
    n = len(points)
    acc = {name: None for name in layers}
    prev_y = prev_g = None
    for start in range(0, n, chunk):
        batch = np.stack(points[start:start + chunk])
        xt = Tensor(batch, requires_grad=True)
        out, acts = model.forward(xt, tap=layers)
        root = tsum(readout(out, target))
        grads = backward(root, taps=[acts[name] for name in layers])
        ys = {name: acts[name].data for name in layers}
        gs = {name: grads[acts[name]].data for name in layers}
        for name in layers:
            y, g = ys[name], gs[name]
            term = (g[:-1] * (y[1:] - y[:-1])).sum(axis=0)
            if prev_y is not None:
                term = term + prev_g[name] * (y[0] - prev_y[name])
            acc[name] = term if acc[name] is None else acc[name] + term
        prev_y = {name: ys[name][-1] for name in layers}
        prev_g = {name: gs[name][-1] for name in layers}
    for name, value in acc.items():
        if not np.isfinite(value).all():
            raise NonFiniteAccumulation(f"non-finite attribution for layer {name}")
    return acc


def _as_image(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ShapeMismatch("attribution runs on one image at a time")
        x = x[0]
    if x.ndim != 3:
        raise ShapeMismatch(f"expected a (C, H, W) image, got {x.shape}")
    return x


def model_mac(model, x_deg, target=None, cfg=None, schedule=None, layers=None, readout=None):
    """Per-unit MAC for several layers at once; returns {layer: array}."""
    cfg = (cfg or MacConfig()).validate()
    x = _as_image(x_deg)
    if schedule is None:
        schedule = make_schedule(x.shape[1], x.shape[2], cfg.delta, cfg.seed)
    grid = mask_path_grid(cfg.ratio, cfg.steps)
    points = [path_point(x, schedule, a) for a in grid]
    target = None if target is None else _as_image(target)[None]
    return path_conductance(
        model, points, layers or model.names, readout or readout_fn(cfg.readout), target, cfg.chunk
    )


def layer_mac(model, layer, x_deg, target=None, cfg=None, schedule=None, readout=None):
    return model_mac(model, x_deg, target, cfg, schedule, [layer], readout)[layer]


def model_conductance(model, x, target=None, cfg=None, layers=None, readout=None):
    """Layer conductance along the straight line from a black image to ``x``."""
    cfg = (cfg or MacConfig()).validate()
    x = _as_image(x)
    points = [a * x for a in linear_path_grid(cfg.steps)]
    target = None if target is None else _as_image(target)[None]
    return path_conductance(
        model, points, layers or model.names, readout or readout_fn(cfg.readout), target, cfg.chunk
    )


def layer_score(unit_scores, signed=False):
    values = unit_scores if signed else np.abs(unit_scores)
    return float(np.mean(values))


# ---------------------------------------------------------------- ranking and reports


def n_selected(k_percent, n_layers):
    """Layers kept for top-k%: k% of the registry rounded half up, at least one."""
    if not 0 < k_percent <= 100:
        raise BadConfig(f"k_percent must be in (0, 100], got {k_percent}")
    return max(1, min(n_layers, math.floor(k_percent * n_layers / 100.0 + 0.5)))


def rank_layers(scores, k_percent):
    """Descending by score; ties keep registry (insertion) order."""
    names = list(scores)
    ranked = sorted(names, key=lambda n: -scores[n])
    return ranked, ranked[:n_selected(k_percent, len(names))]


@dataclass
class MacReport:
    scores: dict
    ranked: list
    selected: list
    k_percent: float
    config: MacConfig
    method: str = "mac"
    per_sample: list = field(default_factory=list)
    sample_kinds: list = field(default_factory=list)

    def to_text(self):
        lines = ["# ramrestore layer attribution report", f"# method = {self.method}"]
        for f in fields(self.config):
            val = getattr(self.config, f.name)
            lines.append(f"# {f.name} = {str(val).lower() if isinstance(val, bool) else val}")
        lines.append(f"# k_percent = {self.k_percent!r}")
        lines.append(f"# n_samples = {len(self.per_sample)}")
        lines.append("rank,layer,score,selected")
        chosen = set(self.selected)
        for rank, name in enumerate(self.ranked, 1):
            lines.append(f"{rank},{name},{self.scores[name]!r},{int(name in chosen)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        header, rows = {}, []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, sep, val = line[1:].partition("=")
                if sep:
                    header[key.strip()] = val.strip()
                continue
            if line.startswith("rank,"):
                continue
            rank, name, score, sel = line.split(",")
            rows.append((int(rank), name, float(score), sel == "1"))
        if not rows:
            raise BadConfig("attribution report has no layer rows")
        kw = {}
        for f in fields(MacConfig):
            if f.name in header:
                raw = header[f.name]
                kw[f.name] = raw == "true" if f.type in ("bool", bool) else type(getattr(MacConfig(), f.name))(raw)
        rows.sort()
        return cls(
            scores={name: score for _, name, score, _ in rows},
            ranked=[name for _, name, _, _ in rows],
            selected=[name for _, name, _, sel in rows if sel],
            k_percent=float(header.get("k_percent", 10.0)),
            config=MacConfig(**kw),
            method=header.get("method", "mac"),
        )

    def config_dict(self):
        return asdict(self.config)


def mac_analysis(model, suite, cfg=None, k_percent=10.0, method="mac"):
    """Score every layer over a sample suite and pick the top-k%.

    A layer's score is the mean over samples of the mean |per-unit MAC|
    (signed mean when ``cfg.signed``). ``method="ig"`` swaps the mask path for
    the straight-line path of plain conductance.
    """
    cfg = (cfg or MacConfig()).validate()
    if method not in METHODS:
        raise BadConfig(f"method must be one of {METHODS}, got {method!r}")
    suite = list(suite)
    if not suite:
        raise EmptySuite("attribution needs at least one sample")
    per_sample = []
    for i, sample in enumerate(suite):
        if method == "mac":
            h, w = np.shape(sample.degraded)[-2:]
            sched_seed = int(stream(cfg.seed, "mac-schedule", i).integers(0, 2 ** 63))
            schedule = make_schedule(h, w, cfg.delta, sched_seed)
            unit = model_mac(model, sample.degraded, sample.clean, cfg, schedule)
        else:
            unit = model_conductance(model, sample.degraded, sample.clean, cfg)
        per_sample.append({name: layer_score(unit[name], cfg.signed) for name in model.names})
    scores = {
        name: math.fsum(s[name] for s in per_sample) / len(per_sample) for name in model.names
    }
    ranked, selected = rank_layers(scores, k_percent)
    return MacReport(
        scores, ranked, selected, float(k_percent), cfg, method, per_sample,
        [getattr(s, "spec", None) and s.spec.kind for s in suite],
    )


def random_selection(names, k_percent, seed):
    names = list(names)
    rng = stream(seed, "random-selection")
    pick = rng.choice(len(names), size=n_selected(k_percent, len(names)), replace=False)
    return [names[i] for i in sorted(pick)]


def evaluate_readout(model, x, target=None, readout="mean"):
    """F(x) for a single image, no graph."""
    x = _as_image(x)[None]
    t = None if target is None else _as_image(target)[None]
    with no_grad():
        out, _ = model.forward(Tensor(x))
        return readout_fn(readout)(out, t).item()
