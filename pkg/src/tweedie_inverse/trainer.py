"""Multi-task fine-tuning of a denoiser through the unrolled solver.

A training step splits the batch across tasks.  Iterative tasks degrade each
image with a freshly drawn operator, run the solver for its fixed iteration
count while keeping the whole graph, and score the output; the one-shot
denoising task scores a single forward pass on AWGN-corrupted images.  The
weighted task losses are summed and back-propagated through every unrolled
step into the denoiser.
"""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .denoiser import add_noise, denoise
from .operators import OperatorDescriptor, OperatorStack, make_operator
from .solver import NumericDivergenceError, SolverConfig, config_preset, run

log = logging.getLogger(__name__)

TASK_MODES = ("iterative", "oneshot_denoise")
LOSS_KINDS = ("mse", "l1")


class TrainingDivergenceError(RuntimeError):
    pass


class WeightSchemeError(KeyError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    name: str
    mode: str = "iterative"
    kind: str | None = None
    operator_params: dict = field(default_factory=dict)
    solver_config: SolverConfig | None = None
    sigma_range: tuple[float, float] = (0.0, 100.0)

    def __post_init__(self):
        if self.mode not in TASK_MODES:
            raise ValueError(f"task mode must be one of {TASK_MODES}")
        if self.mode == "iterative" and (self.kind is None or self.solver_config is None):
            raise ValueError(f"iterative task {self.name!r} needs an operator kind and solver config")
        lo, hi = self.sigma_range
        if not 0 <= lo <= hi <= 255:
            raise ValueError(f"sigma range must lie within [0, 255], got {self.sigma_range}")

    @property
    def iterative(self) -> bool:
        return self.mode == "iterative"

    def descriptor(self, image_dims, seed: int) -> OperatorDescriptor:
        return OperatorDescriptor(self.kind, tuple(image_dims), dict(self.operator_params), int(seed))


# operator kind, solver preset
_BUILTIN = {
    "inpaint": ("inpaint_block", "medium"),
    "sr2": ("sr2", "short"),
    "sensing": ("random_mask", "medium"),
    "demosaic": ("bayer", "medium"),
    "freq_sr": ("freq_lowpass", "short"),
    "random_basis": ("random_basis", "medium"),
}
BUILTIN_TASKS = tuple(_BUILTIN) + ("denoise",)


def builtin_task(name: str, preset: str | None = None, solver_config: SolverConfig | None = None,
                 **operator_params) -> TaskSpec:
    """Standard task by name; ``preset``/``solver_config`` replace the default iteration setting."""
    if name == "denoise":
        return TaskSpec("denoise", mode="oneshot_denoise")
    try:
        kind, default_preset = _BUILTIN[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; choose from {BUILTIN_TASKS}") from None
    cfg = solver_config or config_preset(preset or default_preset)
    return TaskSpec(name, "iterative", kind, operator_params, cfg)


# prior-run losses for the normalised scheme; weights are their reciprocals
TABLE_PRIOR_LOSSES = {"inpaint": 0.014, "sr2": 0.035, "sensing": 0.048}
TABLE_DENOISE_LOSSES = {5.0: 0.011, 10.0: 0.017, 20.0: 0.026, 30.0: 0.033, 40.0: 0.040, 50.0: 0.046}


@dataclass
class WeightScheme:
    kind: str = "uniform"
    fixed: dict[str, float] = field(default_factory=lambda: {"denoise": 5.0})
    prior_losses: dict[str, float] = field(default_factory=lambda: dict(TABLE_PRIOR_LOSSES))
    denoise_losses: dict[float, float] = field(default_factory=lambda: dict(TABLE_DENOISE_LOSSES))

    def __post_init__(self):
        if self.kind not in ("uniform", "fixed", "normalised"):
            raise ValueError(f"unknown weight scheme {self.kind!r}")
        values = list(self.prior_losses.values()) + list(self.denoise_losses.values())
        if any(v <= 0 for v in values):
            raise ValueError("normalised tables need positive entries")
        if any(v < 0 for v in self.fixed.values()):
            raise ValueError("fixed weights must be non-negative")


def task_weight(scheme: WeightScheme, task: TaskSpec, sigma=None):
    """Weight of one task; under the normalised scheme denoising weights depend on sigma (0-255)."""
    if scheme.kind == "uniform":
        return 1.0
    if scheme.kind == "fixed":
        return float(scheme.fixed.get(task.name, 1.0))
    if task.iterative:
        try:
            return 1.0 / scheme.prior_losses[task.name]
        except KeyError:
            raise WeightSchemeError(f"no normalised weight for task {task.name!r}") from None
    if sigma is None:
        raise WeightSchemeError("normalised denoising weight needs the sampled sigma")
    if not scheme.denoise_losses:
        raise WeightSchemeError("empty denoising weight table")
    grid = sorted(scheme.denoise_losses)
    table = [scheme.denoise_losses[s] for s in grid]
    # np.interp holds the endpoint values outside the tabled range
    prior = np.interp(np.asarray(sigma, dtype=np.float64), grid, table)
    w = 1.0 / prior
    return float(w) if np.ndim(w) == 0 else w


@torch.no_grad()
def calibrate_weight_tables(denoiser, patches: torch.Tensor, tasks: Sequence[TaskSpec], seed: int = 0,
                            loss_kind: str = "mse", sigmas: Sequence[float] = tuple(TABLE_DENOISE_LOSSES)):
    """Measure the per-task losses of ``denoiser`` to build a normalised scheme's tables.

    Iterative tasks are scored on all ``patches`` with fresh operators; the
    denoising table is measured at each sigma in ``sigmas``.
    """
    rng = np.random.default_rng(seed)
    prior, denoise_table = {}, {}
    for task in tasks:
        if task.iterative:
            prior[task.name] = float(unrolled_task_loss(denoiser, task, patches, rng, loss_kind))
        else:
            for s in sigmas:
                per_image, _ = oneshot_denoise_loss(denoiser, patches, (s, s), rng, loss_kind)
                denoise_table[float(s)] = float(per_image.mean())
    return prior, denoise_table


def total_loss(task_losses: Sequence, weights: Sequence):
    if len(task_losses) != len(weights):
        raise ValueError(f"{len(task_losses)} losses but {len(weights)} weights")
    total = 0.0
    for loss, w in zip(task_losses, weights):
        total = total + w * loss
    return total


def split_batch(batch: torch.Tensor, n_tasks: int, step: int = 0) -> list[torch.Tensor]:
    """Contiguous per-task slices; the B mod N extra images rotate over tasks with ``step``."""
    b = batch.shape[0]
    if n_tasks < 1:
        raise ValueError("need at least one task")
    if b < n_tasks:
        raise ValueError(f"batch of {b} cannot cover {n_tasks} tasks")
    sizes = [b // n_tasks] * n_tasks
    for j in range(b % n_tasks):
        sizes[(step + j) % n_tasks] += 1
    return list(torch.split(batch, sizes))


def image_loss(output: torch.Tensor, target: torch.Tensor, kind: str = "mse") -> torch.Tensor:
    """Per-image loss, reduced over (C, H, W)."""
    diff = output - target
    if kind == "mse":
        return (diff * diff).flatten(-3).mean(-1)
    if kind == "l1":
        return diff.abs().flatten(-3).mean(-1)
    raise ValueError(f"loss kind must be one of {LOSS_KINDS}")


def unrolled_task_loss(denoiser, task: TaskSpec, minibatch: torch.Tensor, rng: np.random.Generator,
                       loss_kind: str = "mse", return_descriptors: bool = False):
    """Mean reconstruction loss of the solver output with gradients through all iterations."""
    if not task.iterative:
        raise ValueError(f"task {task.name!r} is not iterative")
    dims = tuple(minibatch.shape[-3:])
    descs = [task.descriptor(dims, rng.integers(2**63)) for _ in range(minibatch.shape[0])]
    op = OperatorStack([make_operator(d) for d in descs])
    gen = torch.Generator().manual_seed(int(rng.integers(2**63)))
    xc = op.measure(minibatch)
    out, _ = run(denoiser, op, xc, task.solver_config, generator=gen, trace=False)
    loss = image_loss(out, minibatch, loss_kind).mean()
    return (loss, descs) if return_descriptors else loss


def oneshot_denoise_loss(denoiser, minibatch: torch.Tensor, sigma_range, rng: np.random.Generator,
                         loss_kind: str = "mse"):
    """Per-image single-pass denoising losses and the sigmas (0-255 scale) drawn for them."""
    lo, hi = sigma_range
    sigmas = rng.uniform(lo, hi, size=minibatch.shape[0])
    gen = torch.Generator().manual_seed(int(rng.integers(2**63)))
    noisy = add_noise(minibatch, torch.as_tensor(sigmas, dtype=minibatch.dtype), gen)
    est = denoise(denoiser, noisy, torch.as_tensor(sigmas / 255.0, dtype=minibatch.dtype))
    return image_loss(est, minibatch, loss_kind), sigmas


def lr_at(epoch: float, lr0: float = 1e-3, first_cycle: int = 100, cycle: int = 50) -> float:
    """Cosine annealing to zero with warm restarts: one first_cycle, then every cycle epochs."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch < first_cycle:
        frac = epoch / first_cycle
    else:
        frac = ((epoch - first_cycle) % cycle) / cycle
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * frac))


def cycle_ends(epochs: int, first_cycle: int, cycle: int) -> list[int]:
    """Epoch indices (0-based) that close a learning-rate cycle."""
    ends, e = [], first_cycle
    while e <= epochs:
        ends.append(e - 1)
        e += cycle
    return ends


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 16
    crop_size: int = 96
    flips: bool = True
    rotations: bool = True
    lr: float = 1e-3
    weight_decay: float = 1e-4
    first_cycle: int = 100
    cycle: int = 50
    loss_kind: str = "mse"
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.crop_size % 2:
            raise ValueError("crop_size must be even")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")

    @property
    def dtype(self):
        return torch.float64 if self.precision == "float64" else torch.float32


@dataclass
class StepRecord:
    epoch: int
    step: int
    lr: float
    losses: dict[str, float]
    weights: dict[str, float]
    total: float


@dataclass
class TrainingHistory:
    tasks: list[str]
    records: list[StepRecord] = field(default_factory=list)

    def task_curve(self, name: str) -> list[float]:
        return [r.losses[name] for r in self.records]

    def to_tsv(self) -> str:
        buf = io.StringIO()
        cols = ["epoch", "step", "lr", "total"]
        cols += [f"loss_{t}" for t in self.tasks] + [f"weight_{t}" for t in self.tasks]
        buf.write("\t".join(cols) + "\n")
        for r in self.records:
            row = [str(r.epoch), str(r.step), f"{r.lr:.9g}", f"{r.total:.9g}"]
            row += [f"{r.losses.get(t, float('nan')):.9g}" for t in self.tasks]
            row += [f"{r.weights.get(t, float('nan')):.9g}" for t in self.tasks]
            buf.write("\t".join(row) + "\n")
        return buf.getvalue()


def train_step(denoiser, optimizer, batch: torch.Tensor, tasks: Sequence[TaskSpec], scheme: WeightScheme,
               rng: np.random.Generator, step: int, loss_kind: str = "mse", active: Sequence[bool] | None = None):
    """One optimisation step; returns (per-task losses, per-task mean weights, total).

    Every task consumes its slice of the batch and its random draws even when
    ``active`` switches it off, so the random stream layout is the same with or
    without a task.  A step whose weights are all zero is skipped entirely.
    """
    active = list(active) if active is not None else [True] * len(tasks)
    parts = split_batch(batch, len(tasks), step)
    losses, weights, contrib = {}, {}, []
    for task, part, on in zip(tasks, parts, active):
        if task.iterative:
            loss = unrolled_task_loss(denoiser, task, part, rng, loss_kind)
            w = task_weight(scheme, task)
            weighted = w * loss
            weights[task.name] = w
        else:
            per_image, sigmas = oneshot_denoise_loss(denoiser, part, task.sigma_range, rng, loss_kind)
            w = task_weight(scheme, task, sigmas) if scheme.kind == "normalised" else task_weight(scheme, task)
            w_t = torch.as_tensor(w, dtype=per_image.dtype)
            loss = per_image.mean()
            weighted = (w_t * per_image).mean()
            weights[task.name] = float(np.mean(w))
        if not torch.isfinite(loss):
            raise TrainingDivergenceError(f"non-finite loss for task {task.name!r} at step {step}")
        losses[task.name] = loss.item()
        if on:
            contrib.append(weighted)
    total = total_loss(contrib, [1.0] * len(contrib))
    live = [weights[t.name] for t, on in zip(tasks, active) if on]
    if not contrib or all(w == 0 for w in live):
        return losses, weights, 0.0
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return losses, weights, float(total.item())


def fine_tune(denoiser, dataset, tasks: Sequence[TaskSpec], scheme: WeightScheme, config: TrainConfig,
              start_epoch: int = 0, checkpoint_fn: Callable[[int], None] | None = None):
    """Fine-tune ``denoiser`` in place; returns (denoiser, TrainingHistory).

    ``dataset`` is a :class:`~tweedie_inverse.data.PatchDataset`.  The random
    stream of each step is keyed on (seed, epoch, step) so a run resumed at
    ``start_epoch`` continues exactly as an uninterrupted one would, apart
    from the optimizer moments.  ``checkpoint_fn(epoch)`` runs after every
    epoch that closes a learning-rate cycle and after the final epoch.
    """
    if not tasks:
        raise ValueError("no tasks")
    denoiser.to(config.dtype)
    denoiser.train()
    opt = torch.optim.AdamW(denoiser.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    history = TrainingHistory([t.name for t in tasks])
    ends = set(cycle_ends(config.epochs, config.first_cycle, config.cycle))
    per_epoch = math.ceil(len(dataset) / config.batch_size)
    for epoch in range(start_epoch, config.epochs):
        lr = lr_at(epoch, config.lr, config.first_cycle, config.cycle)
        for group in opt.param_groups:
            group["lr"] = lr
        for i, batch in enumerate(dataset.batches(epoch, config.batch_size)):
            if batch.shape[0] < len(tasks):
                continue
            step = epoch * per_epoch + i
            rng = np.random.default_rng((config.seed, epoch, i))
            try:
                losses, weights, total = train_step(denoiser, opt, batch.to(config.dtype), tasks, scheme, rng,
                                                    step, config.loss_kind)
            except NumericDivergenceError as exc:
                raise TrainingDivergenceError(f"solver diverged in epoch {epoch}: {exc}") from exc
            history.records.append(StepRecord(epoch, step, lr, losses, weights, total))
        log.info("epoch %d lr %.3g losses %s", epoch, lr,
                 {k: round(v, 6) for k, v in history.records[-1].losses.items()} if history.records else {})
        if checkpoint_fn is not None and (epoch in ends or epoch == config.epochs - 1):
            checkpoint_fn(epoch)
    denoiser.eval()
    return denoiser, history


def save_history(history: TrainingHistory, path) -> None:
    Path(path).write_text(history.to_tsv())
