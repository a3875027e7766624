"""Training loop: warmup estimation phase, guided steps, optimizer updates.

A run has two phases.  Warmup draws batches from the source task (or the
target task when no source exists) and only estimates: each batch's base
gradient feeds the direction prior's EMA and a norm sample for resolving
tau="auto" to the median warmup norm.  Parameters do not move.  The main
phase then iterates a seeded batch schedule; every step builds the guided
objective, obtains the full parameter gradient (double backprop in exact
mode, closed-form adjoint plus one finite-difference HVP in fd-hvp mode)
and applies the optimizer.

Three independent seed streams (warmup batches, main-phase schedule, source
batches) keep the target trajectory unchanged when unrelated knobs toggle,
which the paired-seed mechanism comparisons rely on.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import guidance as gd
from . import model as md
from .guidance import DirectionPrior, GuidanceConfig, LossBreakdown
from .tasks import TaskDataset

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")

# Independent substreams derived from the run seed.
_WARMUP_STREAM = 17
_SCHEDULE_STREAM = 23
_SOURCE_STREAM = 29


class TrainerError(ValueError):
    """Invalid training configuration or run preconditions."""


class DivergenceError(RuntimeError):
    """Non-finite loss/gradient/parameters; carries the failing step."""

    def __init__(self, step: int, breakdown: LossBreakdown | None, detail: str):
        super().__init__(f"diverged at step {step}: {detail}")
        self.step = step
        self.breakdown = breakdown


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd"
    learning_rate: float = 0.05
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 1
    batch_size: int | str = "full"
    seed: int = 0
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    warmup_steps: int = 10
    gradient_clip: float = 0.0
    eval_interval: int = 10
    # reserved: the contrast mechanism could modulate strength dynamically,
    # but no concrete rule exists, so the flag is rejected when set
    dynamic_strength: bool = False

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise TrainerError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not (isinstance(self.learning_rate, (int, float))
                and math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise TrainerError(f"learning_rate must be positive, got {self.learning_rate!r}")
        betas = tuple(self.adam_betas)
        object.__setattr__(self, "adam_betas", betas)
        if len(betas) != 2 or not all(0.0 <= b < 1.0 for b in betas):
            raise TrainerError(f"adam_betas must be two values in [0, 1), got {betas!r}")
        if not self.adam_eps > 0:
            raise TrainerError(f"adam_eps must be positive, got {self.adam_eps!r}")
        # epochs = 0 is allowed as an explicit no-op run (empty history)
        if not (isinstance(self.epochs, int) and self.epochs >= 0):
            raise TrainerError(f"epochs must be an integer >= 0, got {self.epochs!r}")
        if self.batch_size != "full" and not (isinstance(self.batch_size, int)
                                              and self.batch_size >= 1):
            raise TrainerError(f'batch_size must be "full" or an integer >= 1, '
                               f"got {self.batch_size!r}")
        if not (isinstance(self.warmup_steps, int) and self.warmup_steps >= 0):
            raise TrainerError(f"warmup_steps must be an integer >= 0, got {self.warmup_steps!r}")
        if self.gradient_clip < 0:
            raise TrainerError(f"gradient_clip must be >= 0, got {self.gradient_clip!r}")
        if not (isinstance(self.eval_interval, int) and self.eval_interval >= 1):
            raise TrainerError(f"eval_interval must be an integer >= 1, got {self.eval_interval!r}")
        if self.dynamic_strength:
            raise TrainerError("dynamic_strength is reserved and not implemented; "
                               "no adjustment rule is defined")

    def to_dict(self) -> dict:
        return {
            "optimizer": self.optimizer,
            "learning_rate": self.learning_rate,
            "adam_betas": list(self.adam_betas),
            "adam_eps": self.adam_eps,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "guidance": self.guidance.to_dict(),
            "warmup_steps": self.warmup_steps,
            "gradient_clip": self.gradient_clip,
            "eval_interval": self.eval_interval,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        allowed = {"optimizer", "learning_rate", "adam_betas", "adam_eps", "epochs",
                   "batch_size", "seed", "guidance", "warmup_steps", "gradient_clip",
                   "eval_interval", "dynamic_strength"}
        unknown = set(d) - allowed
        if unknown:
            raise TrainerError(f"unknown train fields: {sorted(unknown)}")
        kw = {k: d[k] for k in allowed & set(d)}
        if "guidance" in kw:
            kw["guidance"] = GuidanceConfig.from_dict(kw["guidance"])
        if "adam_betas" in kw:
            kw["adam_betas"] = tuple(kw["adam_betas"])
        return cls(**kw)


@dataclass(frozen=True)
class StepRecord:
    """One applied update; field order mirrors the per-step CSV columns."""

    step: int
    loss_total: float
    loss_base: float
    r_dir: float
    r_mag: float
    r_grad: float
    grad_norm: float
    cos_prior: float | None
    cos_source: float | None
    update_norm: float
    eval_accuracy: float | None = None
    wall_time: float = 0.0  # excluded from CSV/JSON records


CSV_COLUMNS = ("step", "loss_total", "loss_base", "r_dir", "r_mag", "r_grad",
               "grad_norm", "cos_prior", "cos_source", "update_norm", "eval_accuracy")


@dataclass
class OptState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class TrainState:
    model_spec: md.ModelSpec
    params: dict[str, np.ndarray]
    prior: DirectionPrior
    source_grad: np.ndarray | None
    step: int
    opt: OptState
    history: list[StepRecord]


@dataclass
class RunReport:
    model_spec: md.ModelSpec
    config: TrainConfig
    records: list[StepRecord]
    final_accuracy: float
    final_loss: float | None
    final_params: dict[str, np.ndarray]
    tau: float | None
    prior_count: int
    wall_time_s: float


def batch_schedule(n: int, batch_size, epochs: int, seed) -> list[np.ndarray]:
    """Seeded epoch-shuffled index batches; public so reference loops can
    reproduce the trainer's data order exactly."""
    if n < 1:
        raise TrainerError("batch_schedule: empty dataset")
    bs = n if batch_size == "full" else min(int(batch_size), n)
    rng = np.random.default_rng(seed)
    batches = []
    for _ in range(epochs):
        order = rng.permutation(n)
        batches.extend(order[i:i + bs] for i in range(0, n, bs))
    return batches


def _base_gradient(spec: md.ModelSpec, params: Mapping[str, np.ndarray], batch) -> np.ndarray:
    with ad.new_tape():
        leaves = {k: ad.leaf(v) for k, v in params.items()}
        loss = gd.base_loss(leaves, spec, batch)
        return ad.backward(loss, leaves).values


def _fd_hvp(spec: md.ModelSpec, layout: ad.ParamLayout, flat: np.ndarray, batch,
            w: np.ndarray, g0: np.ndarray) -> np.ndarray:
    # forward difference of base gradients along w; eps scales with the
    # parameter magnitude so the probe stays in the linear regime
    wn = float(np.linalg.norm(w))
    eps = 1e-6 * (1.0 + float(np.linalg.norm(flat))) / wn
    g1 = _base_gradient(spec, layout.unflatten(flat + eps * w), batch)
    return (g1 - g0) / eps


def _apply_optimizer(config: TrainConfig, opt: OptState, flat: np.ndarray,
                     grad: np.ndarray) -> tuple[np.ndarray, OptState]:
    if config.optimizer == "sgd":
        return flat - config.learning_rate * grad, opt
    b1, b2 = config.adam_betas
    t = opt.t + 1
    m = b1 * opt.m + (1.0 - b1) * grad
    v = b2 * opt.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new = flat - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return new, OptState(m, v, t)


def train_step(state: TrainState, batch, config: TrainConfig) -> tuple[TrainState, StepRecord]:
    """One optimizer update; returns the new state (history appended) and
    the record for this step."""
    t0 = time.perf_counter()
    gcfg = config.guidance
    layout = md.param_layout(state.model_spec)
    step_index = state.step + 1

    try:
        with ad.new_tape():
            leaves = {k: ad.leaf(v) for k, v in state.params.items()}
            obj = gd.build_objective(leaves, state.model_spec, batch, gcfg,
                                     state.prior, state.source_grad)
            if obj.grad is not None and gcfg.mode == "fd-hvp":
                upd = obj.grad.values.copy()
            else:
                upd = ad.backward(obj.total, leaves).values
    except ad.NonFiniteError as e:
        raise DivergenceError(step_index, None, str(e)) from e

    bd = obj.breakdown
    if obj.reg_grad_wrt_g is not None and float(np.linalg.norm(obj.reg_grad_wrt_g)) > 0.0:
        flat0 = layout.flatten(state.params)
        try:
            upd = upd + _fd_hvp(state.model_spec, layout, flat0, batch,
                                obj.reg_grad_wrt_g, obj.grad.values)
        except ad.NonFiniteError as e:
            raise DivergenceError(step_index, bd, str(e)) from e

    if bd.grad_norm is None:
        # vanilla path: the update gradient is the base gradient
        gn = float(np.linalg.norm(upd))
        cos_p = None
        if state.prior.initialized and gn > gcfg.epsilon_norm_guard:
            cos_p = gd.clip_cosine(float(upd @ state.prior.direction) / gn)
        cos_s = None
        if state.source_grad is not None and gn > gcfg.epsilon_norm_guard:
            sn = float(np.linalg.norm(state.source_grad))
            if sn > gcfg.epsilon_norm_guard:
                cos_s = gd.clip_cosine(float(upd @ state.source_grad) / (gn * sn))
        bd = replace(bd, grad_norm=gn, cos_prior=cos_p, cos_source=cos_s)

    if not np.all(np.isfinite(upd)):
        raise DivergenceError(step_index, bd, "non-finite update gradient")
    if config.gradient_clip > 0.0:
        un = float(np.linalg.norm(upd))
        if un > config.gradient_clip:
            upd = upd * (config.gradient_clip / un)

    flat0 = layout.flatten(state.params)
    flat1, opt1 = _apply_optimizer(config, state.opt, flat0, upd)
    if not np.all(np.isfinite(flat1)):
        raise DivergenceError(step_index, bd, "non-finite parameters after update")

    record = StepRecord(
        step=step_index,
        loss_total=bd.total,
        loss_base=bd.base,
        r_dir=bd.dir,
        r_mag=bd.mag,
        r_grad=bd.contrast,
        grad_norm=bd.grad_norm,
        cos_prior=bd.cos_prior,
        cos_source=bd.cos_source,
        update_norm=float(np.linalg.norm(flat1 - flat0)),
        eval_accuracy=None,
        wall_time=time.perf_counter() - t0,
    )
    new_state = TrainState(
        model_spec=state.model_spec,
        params=layout.unflatten(flat1),
        prior=state.prior,
        source_grad=state.source_grad,
        step=step_index,
        opt=opt1,
        history=state.history + [record],
    )
    return new_state, record


def evaluate(params: Mapping[str, np.ndarray], spec: md.ModelSpec,
             dataset: TaskDataset) -> float:
    """Fraction of argmax predictions matching labels; ties go to the lowest
    class index."""
    if len(dataset) == 0:
        raise TrainerError("evaluate: empty dataset")
    return md.accuracy(spec, params, dataset.inputs, dataset.labels)


def _resolve_batch(task: TaskDataset, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return task.inputs[idx], task.labels[idx]


def _warmup(spec: md.ModelSpec, params, task: TaskDataset, config: TrainConfig
            ) -> tuple[DirectionPrior, list[float]]:
    gcfg = config.guidance
    rng = np.random.default_rng([config.seed, _WARMUP_STREAM])
    n = len(task)
    bs = n if config.batch_size == "full" else min(int(config.batch_size), n)
    prior = DirectionPrior()
    norms = []
    for _ in range(config.warmup_steps):
        idx = rng.permutation(n)[:bs]
        g = _base_gradient(spec, params, _resolve_batch(task, idx))
        prior = gd.update_prior(prior, g, gcfg)
        norms.append(float(np.linalg.norm(g)))
    return prior, norms


def train(model_spec: md.ModelSpec, task: TaskDataset, config: TrainConfig,
          source_task: TaskDataset | None = None,
          eval_task: TaskDataset | None = None) -> RunReport:
    """Full run: warmup estimation, guided main loop, final evaluation.

    ``task`` is the training split; evaluation (periodic and final) uses
    ``eval_task`` when given, otherwise the training split itself.
    """
    t0 = time.perf_counter()
    gcfg = config.guidance
    if len(task) == 0:
        raise TrainerError("train: empty training task")
    if task.input_dim != model_spec.input_dim:
        raise TrainerError(f"task dim {task.input_dim} != model input_dim "
                           f"{model_spec.input_dim}")
    if task.num_classes > model_spec.num_classes:
        raise TrainerError(f"task has {task.num_classes} classes, model only "
                           f"{model_spec.num_classes}")
    if gcfg.lambda3 > 0.0 and source_task is None:
        raise TrainerError("lambda3 > 0 requires a source task")
    if source_task is not None and source_task.input_dim != model_spec.input_dim:
        raise TrainerError("source task dimension does not match the model")

    params = md.init_params(model_spec)
    warmup_task = source_task if source_task is not None else task
    prior, warmup_norms = _warmup(model_spec, params, warmup_task, config)

    tau: float | None = None
    if gcfg.tau == "auto":
        if warmup_norms:
            tau = float(np.median(warmup_norms))
            if tau <= 0.0:
                if gcfg.lambda2 > 0.0:
                    raise TrainerError("warmup produced zero gradient norms; "
                                       "tau=auto cannot be resolved")
                tau = None
            else:
                gcfg = gcfg.with_tau(tau)
        elif gcfg.lambda2 > 0.0:
            raise TrainerError('tau="auto" with lambda2 > 0 needs warmup_steps >= 1')
    else:
        tau = float(gcfg.tau)
    if gcfg.lambda1 > 0.0 and not prior.initialized:
        raise TrainerError("lambda1 > 0 needs a direction prior; set warmup_steps >= 1")

    config = replace(config, guidance=gcfg)
    layout = md.param_layout(model_spec)
    state = TrainState(
        model_spec=model_spec,
        params=params,
        prior=prior,
        source_grad=None,
        step=0,
        opt=OptState(np.zeros(layout.total), np.zeros(layout.total)),
        history=[],
    )

    src_rng = np.random.default_rng([config.seed, _SOURCE_STREAM])
    schedule = batch_schedule(len(task), config.batch_size, config.epochs,
                              [config.seed, _SCHEDULE_STREAM])
    eval_ds = eval_task if eval_task is not None else task

    for idx in schedule:
        if source_task is not None:
            ns = len(source_task)
            bs = ns if config.batch_size == "full" else min(int(config.batch_size), ns)
            sidx = src_rng.permutation(ns)[:bs]
            state.source_grad = _base_gradient(model_spec, state.params,
                                               _resolve_batch(source_task, sidx))
        state, record = train_step(state, _resolve_batch(task, idx), config)
        if state.step % config.eval_interval == 0:
            acc = evaluate(state.params, model_spec, eval_ds)
            state.history[-1] = replace(record, eval_accuracy=acc)

    return RunReport(
        model_spec=model_spec,
        config=config,
        records=state.history,
        final_accuracy=evaluate(state.params, model_spec, eval_ds),
        final_loss=state.history[-1].loss_total if state.history else None,
        final_params=state.params,
        tau=tau,
        prior_count=prior.count,
        wall_time_s=time.perf_counter() - t0,
    )


# -- report serialization --------------------------------------------------------

def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def write_step_csv(report: RunReport, path) -> None:
    """Per-step CSV with the documented column order; floats use repr so
    reruns are byte-identical."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for r in report.records:
            writer.writerow([_csv_cell(getattr(r, col)) for col in CSV_COLUMNS])


def report_to_dict(report: RunReport) -> dict:
    """JSON form: config, CSV-aligned records, final metrics.  Wall time
    appears only under "final" and is excluded from determinism guarantees."""
    return {
        "config": {
            "model": report.model_spec.to_dict(),
            "train": report.config.to_dict(),
        },
        "records": [{col: getattr(r, col) for col in CSV_COLUMNS} for r in report.records],
        "final": {
            "final_accuracy": report.final_accuracy,
            "final_loss": report.final_loss,
            "steps": len(report.records),
            "tau": report.tau,
            "prior_count": report.prior_count,
            "wall_time_s": report.wall_time_s,
        },
    }


def write_report_json(report: RunReport, path) -> None:
    with open(path, "w") as f:
        json.dump(report_to_dict(report), f, indent=2)
        f.write("\n")
