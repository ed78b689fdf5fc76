"""Supervised fitting of the surrogate on generated scenarios."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .surrogate import RolloutInputs, Surrogate, SurrogateConfig, fit_normalization

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: dict, grads: dict, state: AdamState) -> dict:
    """One Adam step with decoupled weight decay, in place on ``params``.

    ``params`` maps names to float arrays; a missing or ``None`` gradient is
    treated as zero. Returns ``params``.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
    return params


def rollout_loss(pred, target: np.ndarray, weights, active: np.ndarray) -> ad.Tensor:
    """Channel-weighted MSE over active cells, averaged over time and batch.

    ``pred`` is a tensor [T, C, D, H, W] and ``target`` an array of the same
    shape; a constant offset ``d`` on channel ``c`` gives ``weights[c] * d**2``.
    """
    pred = ad.as_tensor(pred)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} are misaligned")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (pred.shape[1],):
        raise ValueError(f"need {pred.shape[1]} channel weights, got {weights.shape}")
    n = pred.shape[0] * int(active.sum())
    w = (weights[None, :, None, None, None] * active[None, None]) / n
    diff = ad.sub(pred, target)
    return ad.sum(ad.mul(ad.square(diff), w))


@dataclass
class TrainConfig:
    epochs: int = 200
    rollout_length: int = 16  # random windows; validation always rolls the full horizon
    lr: float = 1e-3
    weight_decay: float = 0.0
    channel_weights: tuple = (1.0, 1.0, 1.0)
    seed: int = 0
    val_fraction: float = 0.2
    bn_warmup_epochs: int = 10  # afterwards batch-norm statistics are frozen (eval-mode BN)
    log_every: int = 1

    def validate(self) -> None:
        if self.rollout_length < 1:
            raise ValueError("rollout_length must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.bn_warmup_epochs < 1:
            raise ValueError("bn_warmup_epochs must be >= 1 so running statistics exist")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_weights"] = list(self.channel_weights)
        return d


@dataclass
class FitResult:
    model: Surrogate
    history: list  # dicts: epoch, train_loss, val_loss
    best_epoch: int
    train_ids: list
    val_ids: list
    seconds: float


class _Sample:
    """Rollout inputs and normalised targets for one scenario over its full horizon."""

    def __init__(self, model: Surrogate, scenario):
        self.steps = scenario.states.shape[0] - 1
        self.inp = RolloutInputs(model, scenario.model, self.steps)
        act = scenario.model.grid.active
        m = np.array(model.cfg.state_mean).reshape(3, 1, 1, 1)
        s = np.array(model.cfg.state_std).reshape(3, 1, 1, 1)
        self.target = (scenario.states - m) / s * act
        self.s_norm = model.normalize_state(scenario.states, act)
        self.active = act

    def loss(self, model: Surrogate, weights, start: int = 0, length: int | None = None) -> ad.Tensor:
        """Rollout of ``length`` steps from the true state at report index ``start``."""
        length = self.steps - start if length is None else min(length, self.steps - start)
        static = ad.Tensor(self.inp.static[None])
        s0 = self.inp.s0 if start == 0 else self.s_norm[start]
        pred = model.rollout(s0, static, self.inp.control_cubes[start:start + length], length, self.active)
        return rollout_loss(pred, self.target[start:start + length + 1], weights, self.active)


def split_indices(n: int, val_fraction: float, seed: int):
    if n == 1:
        return [0], [0]
    order = np.random.Generator(np.random.Philox(seed)).permutation(n)
    n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def fit(scenarios, cfg: TrainConfig, model_cfg: SurrogateConfig | None = None, out_dir=None,
        progress=None) -> FitResult:
    """Train a fresh surrogate; the weights with the lowest validation loss are kept.

    ``scenarios`` is a sequence of :class:`~resproxy.datagen.ScenarioData`; it
    is not modified. With a single scenario it is used for both roles.
    """
    cfg.validate()
    if len(scenarios) == 0:
        raise ValueError("dataset is empty")
    t0 = time.perf_counter()
    train_ids, val_ids = split_indices(len(scenarios), cfg.val_fraction, cfg.seed)
    model_cfg = fit_normalization(model_cfg or SurrogateConfig(), [scenarios[i] for i in train_ids])
    model = Surrogate(model_cfg, seed=cfg.seed)
    train = [_Sample(model, scenarios[i]) for i in train_ids]
    val = [_Sample(model, scenarios[i]) for i in val_ids]
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = model.parameters()
    rng = np.random.Generator(np.random.Philox(cfg.seed + 1))
    history, best, best_epoch, best_snap = [], math.inf, -1, None
    for epoch in range(1, cfg.epochs + 1):
        # batch statistics of a single scenario (and of a single latent step in g)
        # differ from the population; after warm-up the deployed eval-mode
        # normalisation is what gets trained
        model.training = epoch <= cfg.bn_warmup_epochs
        losses = []
        for pos in rng.permutation(len(train)):
            sample = train[pos]
            model.zero_grad()
            # windows shorter than the record start at a random report index
            start = int(rng.integers(0, sample.steps - cfg.rollout_length + 1)) \
                if cfg.rollout_length < sample.steps else 0
            loss = sample.loss(model, cfg.channel_weights, start, cfg.rollout_length)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}, "
                                         f"scenario {train_ids[pos]}, window start {start}")
            ad.backward(loss)
            adam_update({k: p.data for k, p in params.items()},
                        {k: p.grad for k, p in params.items()}, opt)
            losses.append(value)
        model.eval()
        with ad.no_grad():
            val_loss = float(np.mean([s.loss(model, cfg.channel_weights).item() for s in val]))
        if not math.isfinite(val_loss):
            raise FloatingPointError(f"non-finite validation loss at epoch {epoch}")
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss}
        history.append(row)
        if val_loss < best:
            best, best_epoch, best_snap = val_loss, epoch, model.snapshot()
        if progress is not None:
            progress(row)
        elif epoch % cfg.log_every == 0:
            log.info("epoch %d train %.5g val %.5g", epoch, row["train_loss"], val_loss)
    model.restore(best_snap)
    model.eval()
    result = FitResult(model, history, best_epoch, train_ids, val_ids, time.perf_counter() - t0)
    if out_dir is not None:
        save_fit(result, out_dir)
    return result


def save_fit(result: FitResult, out_dir) -> Path:
    out_dir = Path(out_dir)
    result.model.save(out_dir)
    write_history(out_dir / "training_history.csv", result.history)
    return out_dir


def write_history(path, history) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for row in history:
            w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"])])


def read_history(path) -> list:
    with Path(path).open(newline="") as f:
        return [{"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
                 "val_loss": float(r["val_loss"])} for r in csv.DictReader(f)]
