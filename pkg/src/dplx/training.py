"""Oracle-action datasets, the tolerance-weighted loss and the training loop."""
from __future__ import annotations

import copy
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .actor import Actor, ActorConfig, ActorInput, build_actor, make_inputs
from .dataset import Dataset
from .device import Device, apply_action, randomize, sweep

log = logging.getLogger(__name__)


class TrainingDiverged(ArithmeticError):
    """Loss became non-finite; ``actor`` holds the last finite parameters."""

    def __init__(self, message: str, actor: Actor, history: list[dict]):
        super().__init__(message)
        self.actor = actor
        self.history = history


class FingerprintMismatch(ValueError):
    pass


def tolerance_loss(predicted, target, delta, weight):
    """mean(ReLU(|predicted - target| - delta) * weight) over screws (and batch).

    Works on numpy arrays or torch tensors; the last axis is the screw axis.
    """
    if predicted.shape[-1] != target.shape[-1] or predicted.shape[-1] != delta.shape[-1]:
        raise ValueError(
            f"length mismatch: predicted {predicted.shape[-1]}, target {target.shape[-1]}, "
            f"delta {delta.shape[-1]}"
        )
    if isinstance(predicted, torch.Tensor):
        return (torch.relu((predicted - target).abs() - delta) * weight).mean()
    diff = np.abs(np.asarray(predicted, float) - np.asarray(target, float))
    return float(np.mean(np.maximum(diff - delta, 0.0) * weight))


def zero_predictor_loss(targets: np.ndarray, delta: np.ndarray, weight: np.ndarray) -> float:
    return tolerance_loss(np.zeros_like(targets, dtype=float), targets, delta, weight)


# --- data collection ---------------------------------------------------------

class OraclePolicy:
    """Returns the exact true action; fixed point of the roll-in."""

    def batch(self, curves, positions):
        return -np.asarray(positions, dtype=float)


class RandomPolicy:
    """Uniform small rotations, scale in turns."""

    def __init__(self, scale: float):
        self.scale = scale

    def batch(self, curves, positions, rngs=None):
        return np.stack([r.uniform(-self.scale, self.scale, positions.shape[1]) for r in rngs])


def worker_count() -> int:
    env = os.environ.get("DPLX_THREADS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


def sweep_many(device: Device, positions: np.ndarray) -> np.ndarray:
    """(B, 3, n) dB curves for a stack of screw vectors."""
    def one(p):
        return sweep(device, p).curves()

    workers = min(worker_count(), len(positions)) or 1
    if workers == 1:
        return np.stack([one(p) for p in positions]) if len(positions) else np.empty((0, 3, device.spec.n_points))
    with ThreadPoolExecutor(workers) as pool:
        return np.stack(list(pool.map(one, positions)))


def collect_dataset(
    device: Device,
    policy=None,
    n_samples: int = 100,
    roll_in_steps: int = 0,
    seed: int = 0,
    magnitude: float | None = None,
    scale_range: tuple[float, float] | None = None,
    random_scale: float | None = None,
) -> Dataset:
    """Randomize screws, roll in ``roll_in_steps`` policy actions, then store
    (sweep, true action) pairs. Each sample owns a child RNG stream, so the
    result does not depend on worker count.

    ``scale_range`` draws a log-uniform per-sample factor on the untuned
    magnitude, which spreads records from nearly tuned to fully untuned.
    """
    if roll_in_steps < 0:
        raise ValueError("roll_in_steps must be >= 0")
    magnitude = device.untuned_magnitude if magnitude is None else magnitude
    children = np.random.SeedSequence(seed).spawn(n_samples)
    rngs = [np.random.default_rng(c) for c in children]
    if scale_range is not None and not 0 < scale_range[0] <= scale_range[1]:
        raise ValueError("scale_range must satisfy 0 < low <= high")
    log_lo, log_hi = np.log(scale_range) if scale_range else (0.0, 0.0)
    scales = [np.exp(r.uniform(log_lo, log_hi)) for r in rngs]
    positions = np.array([randomize(device, r, magnitude * f) for r, f in zip(rngs, scales)])
    positions = positions.reshape(n_samples, device.n_screws)
    if policy is None and roll_in_steps > 0:
        policy = RandomPolicy(random_scale or 0.25 * device.untuned_magnitude)
    for _ in range(roll_in_steps):
        curves = sweep_many(device, positions)
        if isinstance(policy, RandomPolicy):
            acts = policy.batch(curves, positions, rngs)
        else:
            acts = np.asarray(policy.batch(curves, positions), dtype=float)
        positions = np.array([apply_action(device, p, a)[0] for p, a in zip(positions, acts)])
        positions = positions.reshape(n_samples, device.n_screws)
    # records are captured at the stored (f32) positions so they re-derive exactly
    pos32 = np.clip(positions.astype("<f4"), -device.travel, device.travel).astype("<f4")
    stored = pos32.astype(float)
    curves = sweep_many(device, stored)
    actions = device.golden - stored
    return Dataset(curves, actions, pos32, device.fingerprint())


# --- training ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 64
    lr: float = 3e-4
    epochs: int = 100
    optimizer: str = "adam"
    cosine: bool = True
    weight_decay: float = 0.0
    patience: int | None = None
    stop_below: float | None = None
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.optimizer not in ("adam", "adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)


@dataclass
class Prepared:
    """Dataset converted to network inputs and target tensors."""

    inputs: ActorInput
    targets: torch.Tensor

    def __len__(self) -> int:
        return len(self.targets)


def prepare(ds: Dataset, device: Device, config: ActorConfig, dtype=torch.float32) -> Prepared:
    check_fingerprint(ds, device)
    inp = make_inputs(ds.curves.astype(float), device.passbands, config, dtype)
    return Prepared(inp, torch.from_numpy(ds.actions.astype(float)).to(dtype))


def check_fingerprint(ds: Dataset, device: Device) -> None:
    if ds.fingerprint != device.fingerprint():
        raise FingerprintMismatch("dataset was generated from a different device")
    if len(ds) and (ds.n_points != device.spec.n_points or ds.n_screws != device.n_screws):
        raise FingerprintMismatch("dataset shape does not match the device")


def tolerance_tensors(device: Device, dtype=torch.float32):
    return (
        torch.as_tensor(device.tolerance, dtype=dtype),
        torch.as_tensor(device.weight, dtype=dtype),
    )


@torch.no_grad()
def evaluate(actor: Actor, data: Prepared, delta, weight, chunk: int = 256) -> float:
    """Eq.-style tolerance loss over a whole prepared set, inference mode."""
    actor.eval()
    if len(data) == 0:
        return float("nan")
    total = 0.0
    for start in range(0, len(data), chunk):
        idx = slice(start, start + chunk)
        pred = actor(data.inputs.index(idx))
        err = torch.relu((pred - data.targets[idx]).abs() - delta) * weight
        total += float(err.sum())
    return total / (len(data) * data.targets.shape[1])


def _optimizer(params, cfg: TrainingConfig):
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=0.9, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def train(
    train_set: Dataset | Prepared,
    held_out: Dataset | Prepared | None,
    device: Device,
    actor_config: ActorConfig,
    config: TrainingConfig = TrainingConfig(),
    actor: Actor | None = None,
    progress=None,
) -> tuple[Actor, list[dict]]:
    """Mini-batch minimization of the tolerance loss.

    Returns the parameters with the lowest held-out loss (training loss when
    no held-out set is given) and per-epoch history rows.
    """
    dtype = config.torch_dtype
    if isinstance(train_set, Dataset):
        train_set = prepare(train_set, device, actor_config, dtype)
    if isinstance(held_out, Dataset):
        held_out = prepare(held_out, device, actor_config, dtype) if len(held_out) else None
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if actor is None:
        actor = build_actor(actor_config, config.seed, dtype)
    delta, weight = tolerance_tensors(device, dtype)
    opt = _optimizer(actor.parameters(), config)
    steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
    sched = None
    if config.cosine:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs * steps_per_epoch)
    gen = torch.Generator().manual_seed(config.seed)

    history: list[dict] = []
    best_state, best_loss, since_best = copy.deepcopy(actor.state_dict()), math.inf, 0
    last_finite = copy.deepcopy(actor.state_dict())
    for epoch in range(config.epochs):
        actor.train()
        perm = torch.randperm(len(train_set), generator=gen)
        batch_losses = []
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            pred = actor(train_set.inputs.index(idx))
            loss = tolerance_loss(pred, train_set.targets[idx], delta, weight)
            if not torch.isfinite(loss):
                actor.load_state_dict(last_finite)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", actor, history)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
            batch_losses.append(loss.item())
        last_finite = copy.deepcopy(actor.state_dict())
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(batch_losses)),
            "train_eval_loss": evaluate(actor, train_set, delta, weight),
        }
        if held_out is not None:
            row["held_out_loss"] = evaluate(actor, held_out, delta, weight)
        score = row.get("held_out_loss", row["train_eval_loss"])
        if not math.isfinite(score):
            actor.load_state_dict(last_finite)
            raise TrainingDiverged(f"non-finite evaluation loss at epoch {epoch}", actor, history)
        if score < best_loss:
            best_loss, best_state, since_best = score, copy.deepcopy(actor.state_dict()), 0
        else:
            since_best += 1
        history.append(row)
        if progress is not None:
            progress(row)
        if config.patience is not None and since_best > config.patience:
            break
        if config.stop_below is not None and score < config.stop_below:
            break
    actor.load_state_dict(best_state)
    actor.eval()
    return actor, history


def eval_generalization(
    actor: Actor,
    device: Device,
    datasets: list[Dataset],
    dtype=torch.float32,
) -> list[dict]:
    """Loss and zero-predictor baseline for each evaluation set."""
    delta, weight = tolerance_tensors(device, dtype)
    rows = []
    for k, ds in enumerate(datasets, start=1):
        data = prepare(ds, device, actor.config, dtype)
        rows.append({
            "set": f"gen {k}",
            "records": len(ds),
            "loss": evaluate(actor, data, delta, weight),
            "baseline": zero_predictor_loss(ds.actions.astype(float), device.tolerance, device.weight),
        })
    return rows


def config_dict(cfg) -> dict:
    return asdict(cfg)
