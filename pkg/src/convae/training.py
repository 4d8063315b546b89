"""Reconstruction cost, Adam with stepped decay, and staged training.

The cost of a reconstruction ``x_rec`` of ``x`` is

    J = mean(D**2) + mean(D) + std(D),    D = |x - x_rec|

over every unpadded element of the evaluation group, with the population
standard deviation.  ``sigma="rows"`` switches the last term to the sum
over time steps of the per-row standard deviation, averaged over samples.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import CYCLES_PER_BATCH, WIDTH, WINDOW, WINDOWS_PER_CYCLE, DriveCycle, assemble_batch, cycle_groups
from .errors import ConfigurationError, ContractError, DimensionError
from .model import STAGE_DEPTHS, ArchitectureSpec, AutoencoderParams, build, forward, transfer_weights
from .tensor import GradTape, Tensor

logger = logging.getLogger(__name__)

SIGMA_MODES = ("matrix", "rows")


@dataclass(frozen=True)
class LossBreakdown:
    mse: float
    mae: float
    std_abs: float
    total: float


def cost_terms(
    x: Tensor, x_rec: Tensor, n_features: Optional[int] = None, sigma: str = "matrix", per_sample: bool = False
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Differentiable ``(mse, mae, std_abs, J)`` tensors.

    ``x`` and ``x_rec`` are ``(B, W, width, 1)``; only the first
    ``n_features`` feature columns enter the cost.  With ``per_sample`` each
    term has shape ``(B,)``, otherwise it is a scalar over the whole batch.
    """
    if x.shape != x_rec.shape:
        raise DimensionError(f"cost inputs differ in shape: {x.shape} vs {x_rec.shape}")
    if sigma not in SIGMA_MODES:
        raise ConfigurationError(f"sigma must be one of {SIGMA_MODES}, got {sigma!r}")
    if n_features is not None and x.numpy().ndim == 4 and n_features < x.shape[2]:
        x = T.pad_crop(x, x.shape[1], n_features, "crop")
        x_rec = T.pad_crop(x_rec, x_rec.shape[1], n_features, "crop")
    d = T.absolute(T.sub(x, x_rec))
    nd = d.numpy().ndim
    axes = tuple(range(1, nd)) if per_sample and nd > 1 else None
    mse = T.reduce_mean(T.square(d), axis=axes)
    mae = T.reduce_mean(d, axis=axes)
    if sigma == "matrix":
        sd = T.std(d, axis=axes)
    elif nd == 4:
        # (B, W, F, 1): std across each time row, summed over rows, per sample.
        per = T.reduce_sum(T.std(d, axis=(2, 3)), axis=1)
        sd = per if per_sample else T.reduce_mean(per)
    elif nd == 2:
        sd = T.reduce_sum(T.std(d, axis=1))
    else:
        raise DimensionError(f"row-wise sigma needs (W, F) or (B, W, F, 1) inputs, got {x.shape}")
    total = T.add(T.add(mse, mae), sd)
    return mse, mae, sd, total


def loss_J(x, x_rec, n_features: Optional[int] = None, sigma: str = "matrix") -> LossBreakdown:
    """Scalar cost breakdown of one evaluation group."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    x_rec = x_rec if isinstance(x_rec, Tensor) else Tensor(x_rec)
    mse, mae, sd, total = cost_terms(x, x_rec, n_features, sigma)
    return LossBreakdown(mse.item(), mae.item(), sd.item(), total.item())


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    base_lr: float = 8e-4
    decay: float = 0.5
    decay_interval: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def fresh(self) -> "OptimizerState":
        """Same hyperparameters, zeroed moments and step counter."""
        return replace(self, step=0, m={}, v={})


def lr_schedule(epoch: int, state: OptimizerState) -> float:
    """``base_lr * decay ** floor(epoch / decay_interval)``."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return state.base_lr * state.decay ** (epoch // state.decay_interval)


def adam_step(params, grads: Mapping, state: OptimizerState, lr: Optional[float] = None,
              frozen: frozenset = frozenset()):
    """One bias-corrected Adam update.

    ``params`` is an :class:`AutoencoderParams` (its trainable mask decides
    what is frozen) or a ``{name: Tensor}`` mapping plus ``frozen`` names.
    Returns the updated params of the same kind and a new state; frozen
    tensors and their moments are left untouched.
    """
    if isinstance(params, AutoencoderParams):
        tensors, frozen = params.tensors(), params.frozen()
    else:
        tensors = dict(params)
    lr = state.base_lr if lr is None else lr
    step = state.step + 1
    m, v = dict(state.m), dict(state.v)
    c1 = 1.0 - state.beta1 ** step
    c2 = 1.0 - state.beta2 ** step
    updated = {}
    for name, p in tensors.items():
        if name in frozen:
            continue
        if name not in grads:
            raise ContractError(f"no gradient for trainable parameter {name}")
        g = grads[name].numpy() if isinstance(grads[name], Tensor) else np.asarray(grads[name])
        mi = state.beta1 * m[name] + (1 - state.beta1) * g if name in m else (1 - state.beta1) * g
        vi = state.beta2 * v[name] + (1 - state.beta2) * g * g if name in v else (1 - state.beta2) * g * g
        m[name], v[name] = mi, vi
        upd = lr * (mi / c1) / (np.sqrt(vi / c2) + state.eps)
        updated[name] = Tensor._wrap((p.numpy() - upd).astype(p.dtype, copy=False))
    new_state = replace(state, step=step, m=m, v=v)
    if isinstance(params, AutoencoderParams):
        return params.with_tensors(updated), new_state
    tensors.update(updated)
    return tensors, new_state


# ---------------------------------------------------------------------------
# staged training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StagePlan:
    stage: int
    epochs_frozen: int
    epochs_finetune: int = 0


@dataclass(frozen=True)
class TrainPlan:
    """Stage schedule and batch geometry for :func:`train`.

    For the first stage every layer is new, so its frozen and fine-tune
    phases both train the whole network.
    """

    stages: tuple = (StagePlan(1, 1),)
    seed: int = 0
    windows_per_cycle: int = WINDOWS_PER_CYCLE
    cycles_per_batch: int = CYCLES_PER_BATCH
    window: int = WINDOW
    width: int = WIDTH
    base_lr: float = 8e-4
    decay: float = 0.5
    decay_interval: int = 50
    sigma: str = "matrix"
    dtype: str = "float64"
    arch: ArchitectureSpec = field(default_factory=ArchitectureSpec.desk)

    def __post_init__(self):
        stages = tuple(s if isinstance(s, StagePlan) else StagePlan(*s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        self.validate()

    def validate(self) -> None:
        if not self.stages:
            raise ConfigurationError("stages: at least one stage is required")
        prev = 0
        for s in self.stages:
            if s.stage not in STAGE_DEPTHS:
                raise ConfigurationError(f"stages: stage {s.stage} not in {sorted(STAGE_DEPTHS)}")
            if s.stage <= prev:
                raise ConfigurationError("stages: stage numbers must be strictly increasing")
            if s.epochs_frozen < 0 or s.epochs_finetune < 0 or s.epochs_frozen + s.epochs_finetune < 1:
                raise ConfigurationError(f"stages: stage {s.stage} needs a positive epoch count")
            prev = s.stage
        for name in ("windows_per_cycle", "cycles_per_batch", "window", "width", "decay_interval"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.base_lr <= 0 or self.decay <= 0:
            raise ConfigurationError("base_lr and decay must be positive")
        if self.sigma not in SIGMA_MODES:
            raise ConfigurationError(f"sigma must be one of {SIGMA_MODES}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigurationError("dtype must be 'float64' or 'float32'")
        if tuple(self.arch.input_shape[:2]) != (self.window, self.width):
            raise ConfigurationError(
                f"architecture input {self.arch.input_shape} does not match window x width {(self.window, self.width)}"
            )

    @property
    def total_epochs(self) -> int:
        return sum(s.epochs_frozen + s.epochs_finetune for s in self.stages)

    def epoch_schedule(self) -> list[tuple[int, str]]:
        """``(stage, phase)`` for every global epoch, phase in {"frozen", "finetune"}."""
        out = []
        for s in self.stages:
            out += [(s.stage, "frozen")] * s.epochs_frozen + [(s.stage, "finetune")] * s.epochs_finetune
        return out


@dataclass(frozen=True)
class LogRow:
    epoch: int
    stage: int
    batch: int
    mse: float
    mae: float
    std_abs: float
    J: float
    lr: float


LOG_COLUMNS = ("epoch", "stage", "batch", "mse", "mae", "std_abs", "J", "lr")


@dataclass
class TrainResult:
    params: AutoencoderParams
    log: list
    epochs_done: int

    def epoch_means(self) -> dict:
        by = {}
        for row in self.log:
            by.setdefault(row.epoch, []).append(row.J)
        return {e: float(np.mean(v)) for e, v in sorted(by.items())}


def write_log(rows: Sequence[LogRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r.epoch, r.stage, r.batch, repr(r.mse), repr(r.mae), repr(r.std_abs), repr(r.J), repr(r.lr)])


def _stage_seed(seed: int, stage: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0, stage]))


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # Keyed by the global epoch so a resumed run draws the same windows.
    return np.random.default_rng(np.random.SeedSequence([seed, 1, epoch]))


def loss_and_gradients(params: AutoencoderParams, batch: Tensor, n_features: int, sigma: str = "matrix"):
    """Cost terms and a gradient for every parameter tensor.

    Only trainable tensors are watched, so masked-frozen entries are exact
    zeros.  Returns ``((mse, mae, std_abs, J), {key: ndarray})``.
    """
    tensors = params.tensors()
    frozen = params.frozen()
    live = {k: t for k, t in tensors.items() if k not in frozen}
    with GradTape() as tape:
        tape.watch(*live.values())
        rec, _ = forward(params, batch)
        mse, mae, sd, total = cost_terms(batch, rec, n_features, sigma)
    g = T.backward(tape, total)
    grads = {k: g[t.id].numpy() if k in live else np.zeros(t.shape, dtype=t.dtype) for k, t in tensors.items()}
    return (mse.item(), mae.item(), sd.item(), total.item()), grads


def train_step(params: AutoencoderParams, batch: Tensor, n_features: int, state: OptimizerState,
               lr: float, sigma: str = "matrix"):
    """Forward, cost, backward and one Adam update; returns (params, state, terms)."""
    terms, grads = loss_and_gradients(params, batch, n_features, sigma)
    params, state = adam_step(params, grads, state, lr)
    return params, state, terms


def train(
    plan: TrainPlan,
    cycles: Sequence[DriveCycle],
    resume: Optional[tuple[AutoencoderParams, int]] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Run the staged schedule on normalized healthy ``cycles``.

    Each stage starts from a fresh build; from the second stage on, the
    previous stage's weights are transferred in, the added layers train for
    ``epochs_frozen`` epochs, then everything trains for ``epochs_finetune``.
    Every epoch shuffles the cycles into groups of ``cycles_per_batch`` and
    draws fresh windows for each batch.  Adam moments restart at each phase.

    ``resume=(params, epochs_done)`` skips the first ``epochs_done`` epochs
    of the schedule and continues from ``params``.
    """
    if not cycles:
        raise ContractError("training needs at least one healthy cycle")
    n_features = {c.n_features for c in cycles}
    if len(n_features) != 1:
        raise ContractError(f"cycles disagree on feature count: {sorted(n_features)}")
    n_features = n_features.pop()
    dtype = np.dtype(plan.dtype)
    base_state = OptimizerState(plan.base_lr, plan.decay, plan.decay_interval)
    schedule = plan.epoch_schedule()
    start = 0
    params = None
    if resume is not None:
        params, start = resume
        if start > len(schedule):
            raise ConfigurationError(f"checkpoint epoch {start} beyond the {len(schedule)}-epoch plan")
    log: list[LogRow] = []
    state = base_state.fresh()
    prev_key = schedule[start - 1] if start else None
    for epoch in range(start, len(schedule)):
        stage, phase = schedule[epoch]
        if (stage, phase) != prev_key:
            if params is None or params.stage != stage:
                fresh = build(stage, _stage_seed(plan.seed, stage), plan.arch, dtype)
                params = fresh if params is None else transfer_weights(params, fresh)
            if phase == "finetune":
                params = params.unfreeze_all()
            state = base_state.fresh()
            prev_key = (stage, phase)
        lr = lr_schedule(epoch, base_state)
        rng = _epoch_rng(plan.seed, epoch)
        groups = cycle_groups(len(cycles), plan.cycles_per_batch, rng)
        for b, idx in enumerate(groups):
            batch = assemble_batch([cycles[i] for i in idx], rng, plan.windows_per_cycle, plan.window, plan.width)
            x = batch.tensor(dtype)
            params, state, (mse, mae, sd, total) = train_step(params, x, n_features, state, lr, plan.sigma)
            log.append(LogRow(epoch, stage, b, mse, mae, sd, total, lr))
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean([r.J for r in log if r.epoch == epoch])))
        logger.debug("epoch %d stage %d J=%.5f", epoch, stage, log[-1].J)
    if params is None:
        raise ConfigurationError("nothing to train: the plan is already complete")
    return TrainResult(params, log, len(schedule))
