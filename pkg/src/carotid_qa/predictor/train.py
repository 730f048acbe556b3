"""Mini-batch SGD with momentum, best-validation model selection, and a finite-difference gradient check."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from ..errors import ConfigError, EmptyDataset, GradientMismatch, NonFiniteLoss
from ..polar import GRID
from .cnn import CNNPredictor, PolarCNN, PredictorConfig, init_params, patches_to_input

log = logging.getLogger(__name__)


SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    val_fraction: float = 0.2
    clip_norm: float = 5.0
    schedule: str = "cosine"  # or "constant"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")

    def lr_at(self, epoch):
        """Step size for 1-based ``epoch``; cosine decays to lr/100 in the last epoch."""
        if self.schedule == "constant" or self.epochs == 1:
            return self.lr
        t = (epoch - 1) / (self.epochs - 1)
        return self.lr * (0.01 + 0.99 * 0.5 * (1.0 + math.cos(math.pi * t)))

    @classmethod
    def from_dict(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown train key: {unknown[0]}")
        return cls(**obj)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    params: list
    log: list  # (epoch, train_mse, val_mse)
    best_epoch: int
    train_index: np.ndarray
    val_index: np.ndarray

    def predictor(self, cfg: PredictorConfig):
        return CNNPredictor(cfg, self.params)


def split_indices(n, val_fraction, seed, groups=None):
    """Disjoint shuffled train/validation index sets (validation gets at least one sample).

    With ``groups`` whole groups go to one side, so correlated samples (for
    example patches from one participant) never straddle the split.
    """
    if n < 2:
        raise EmptyDataset(f"need at least 2 samples, got {n}")
    rng = np.random.default_rng(seed)
    if groups is None:
        order = rng.permutation(n)
        n_val = min(max(1, int(round(n * val_fraction))), n - 1)
        return np.sort(order[n_val:]), np.sort(order[:n_val])
    groups = np.asarray(groups)
    labels = np.unique(groups)
    if len(labels) < 2:
        raise EmptyDataset("need at least 2 groups for a grouped split")
    order = labels[rng.permutation(len(labels))]
    n_val = min(max(1, int(round(len(labels) * val_fraction))), len(labels) - 1)
    val = np.isin(groups, order[:n_val])
    return np.flatnonzero(~val), np.flatnonzero(val)


def mse_and_grad(out, target):
    diff = out - target
    return float(np.mean(diff.astype(np.float64) ** 2)), (2.0 / diff.size) * diff


def evaluate(net: PolarCNN, x, y, batch_size=64):
    total = 0.0
    for start in range(0, len(x), batch_size):
        out = net.forward(x[start:start + batch_size])
        total += float(np.sum((out.astype(np.float64) - y[start:start + batch_size]) ** 2))
    return total / y.size


def train(dataset, pcfg: PredictorConfig, tcfg: TrainConfig = TrainConfig(), init=None,
          progress=None, groups=None) -> TrainResult:
    """Fit the CNN on ``[(PolarPatch, target (31, 2)), ...]``.

    Returns the parameter snapshot with the lowest end-of-epoch validation MSE.
    """
    dataset = list(dataset)
    if len(dataset) < 2:
        raise EmptyDataset(f"need at least 2 samples, got {len(dataset)}")
    dt = np.dtype(pcfg.dtype)
    x = patches_to_input(np.stack([p.samples for p, _ in dataset]), pcfg)
    y = np.stack([np.asarray(t, dtype=np.float64).reshape(GRID.n_angles, 2) for _, t in dataset]).astype(dt)
    tr, va = split_indices(len(dataset), tcfg.val_fraction, tcfg.seed, groups)
    params = [p.copy() for p in (init if init is not None else init_params(pcfg))]
    net = PolarCNN(pcfg, params)
    velocity = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(np.random.SeedSequence([int(tcfg.seed), 1]))
    best = (math.inf, 0, [p.copy() for p in params])
    history = []
    for epoch in range(1, tcfg.epochs + 1):
        order = tr[rng.permutation(len(tr))]
        lr = tcfg.lr_at(epoch)
        seen, running = 0, 0.0
        for start in range(0, len(order), tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            out, cache = net.forward(x[idx], rng, keep_cache=True)
            loss, gout = mse_and_grad(out, y[idx])
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}, batch at {start}: loss is {loss}")
            grads = net.backward(cache, gout.astype(dt))
            norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
            if not math.isfinite(norm):
                raise NonFiniteLoss(f"epoch {epoch}: gradient norm is {norm}")
            scale = min(1.0, tcfg.clip_norm / norm) if tcfg.clip_norm > 0 and norm > 0 else 1.0
            for p, v, g in zip(params, velocity, grads):
                v *= tcfg.momentum
                v -= (lr * scale) * g
                p += v
            running += loss * len(idx)
            seen += len(idx)
        train_mse = running / seen
        val_mse = evaluate(net, x[va], y[va])
        if not math.isfinite(val_mse):
            raise NonFiniteLoss(f"epoch {epoch}: validation loss is {val_mse}")
        history.append((epoch, train_mse, val_mse))
        log.info("epoch %d train_mse %.5f val_mse %.5f", epoch, train_mse, val_mse)
        if progress is not None:
            progress(epoch, train_mse, val_mse)
        if val_mse < best[0]:
            best = (val_mse, epoch, [p.copy() for p in params])
    return TrainResult(best[2], history, best[1], tr, va)


def write_train_log(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["epoch", "train_mse", "val_mse"])
        for epoch, tr, va in history:
            w.writerow([epoch, format(tr, ".10g"), format(va, ".10g")])


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_params: int
    worst: tuple  # (tensor index, flat index)
    offending: list


def _kink_margin(net, x):
    """Smallest |pre-activation| relative to the largest activation feeding any layer."""
    _, cache = net.forward(x, keep_cache=True)
    z_min = min(float(np.min(np.abs(z))) for z in cache["z"])
    a_max = max(float(np.max(np.abs(xp))) for xp in cache["xp"])
    return z_min / max(a_max, 1.0)


def grad_check(cfg: PredictorConfig = None, tolerance=1e-4, h=1e-3, seed=0, n_samples=1,
               backward=None, max_tries=50) -> GradCheckReport:
    """Compare analytic gradients with central differences on every parameter.

    Runs in float64 with dropout disabled. With ReLU the parameter point is
    chosen so that no pre-activation lies within reach of a +-h perturbation,
    otherwise the finite difference straddles a kink and stops being a valid
    reference. ``backward`` may replace the network's backward pass (used to
    make sure corrupted gradients are caught).
    """
    if cfg is None:
        cfg = PredictorConfig(n_layers=2, channels=4, radial_fov=12)
    cfg = replace(cfg, dtype="float64", dropout=0.0)
    rng = np.random.default_rng(seed)
    samples = rng.uniform(0.0, 1.0, (n_samples,) + GRID.shape)
    x = patches_to_input(samples, cfg)
    target = rng.uniform(1.0, 6.0, (n_samples, GRID.n_angles, 2))
    for _ in range(max_tries):
        params = init_params(cfg, int(rng.integers(2 ** 31)))
        for i in range(0, 2 * cfg.n_layers, 2):
            params[i] *= 0.25
            signs = rng.choice([-1.0, 1.0], params[i + 1].shape)
            params[i + 1] = signs * rng.uniform(0.3, 0.6, params[i + 1].shape)
        net = PolarCNN(cfg, params)
        if cfg.nonlinearity != "relu" or _kink_margin(net, x) > 20 * h:
            break
    else:
        raise GradientMismatch(f"no kink-free parameter point found in {max_tries} tries")

    def loss():
        return mse_and_grad(net.forward(x), target)[0]

    out, cache = net.forward(x, keep_cache=True)
    _, gout = mse_and_grad(out, target)
    grads = (backward or net.backward)(cache, gout)
    worst, worst_at, offending = 0.0, (0, 0), []
    # components many orders below the largest gradient are zero up to roundoff (e.g. a bias that
    # shifts every logit of a softmax equally); compare them on the scale of the largest one
    floor = max(1e-8, 1e-6 * max(float(np.max(np.abs(g))) for g in grads))
    for t, p in enumerate(params):
        flat = p.reshape(-1)
        g = np.asarray(grads[t]).reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            lp = loss()
            flat[j] = old - h
            lm = loss()
            flat[j] = old
            num = (lp - lm) / (2 * h)
            denom = max(abs(num), abs(g[j]), floor)
            rel = abs(num - g[j]) / denom
            if rel > worst:
                worst, worst_at = rel, (t, j)
            if rel >= tolerance:
                offending.append((t, j, float(g[j]), float(num)))
    report = GradCheckReport(worst, sum(p.size for p in params), worst_at, offending)
    if offending:
        raise GradientMismatch(
            f"{len(offending)} parameter(s) exceed relative error {tolerance:g}; worst {worst:.3g} at {worst_at}",
            offending)
    return report
