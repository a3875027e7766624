"""Gradient-guided loss construction.

The training objective augments a base cross-entropy with penalties on the
base gradient g = dL/dtheta itself: a direction term pulling g/|g| toward a
maintained prior direction, a magnitude term pulling |g| toward a target tau,
and a contrast term penalizing misalignment with a source-task gradient.

Two evaluation modes.  In ``exact`` mode the penalties are built on the tape
from a create_graph gradient, so differentiating the total runs double
backprop and is exact to machine precision.  In ``fd-hvp`` mode the penalties
are evaluated numerically and their theta-gradient is assembled later from
the closed-form dR/dg plus one finite-difference Hessian-vector product
(see trainer); this module supplies the closed forms.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import model as md
from .autodiff import GradientVector, Tensor

logger = logging.getLogger(__name__)

MODES = ("exact", "fd-hvp")


class GuidanceError(ValueError):
    """Invalid guidance configuration or term preconditions."""


@dataclass(frozen=True)
class GuidanceConfig:
    """Weights and knobs for the gradient penalties.

    ``tau`` may be the string "auto", in which case the trainer resolves it
    to the median warmup gradient norm before any step runs.
    """

    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda3: float = 0.1
    tau: float | str = "auto"
    beta: float = 0.9
    mode: str = "exact"
    epsilon_norm_guard: float = 1e-12

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0.0):
                raise GuidanceError(f"{name} must be a finite nonnegative number, got {v!r}")
        if self.tau != "auto":
            if not (isinstance(self.tau, (int, float)) and math.isfinite(self.tau)
                    and self.tau > 0.0):
                raise GuidanceError(f'tau must be "auto" or a positive number, got {self.tau!r}')
        if not (0.0 <= self.beta < 1.0):
            raise GuidanceError(f"beta must be in [0, 1), got {self.beta!r}")
        if self.mode not in MODES:
            raise GuidanceError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.epsilon_norm_guard > 0.0:
            raise GuidanceError(f"epsilon_norm_guard must be positive, got {self.epsilon_norm_guard!r}")

    def any_active(self) -> bool:
        return self.lambda1 > 0.0 or self.lambda2 > 0.0 or self.lambda3 > 0.0

    def with_tau(self, tau: float) -> "GuidanceConfig":
        return replace(self, tau=float(tau))

    def to_dict(self) -> dict:
        return {
            "lambda1": self.lambda1, "lambda2": self.lambda2, "lambda3": self.lambda3,
            "tau": self.tau, "beta": self.beta, "mode": self.mode,
            "epsilon_norm_guard": self.epsilon_norm_guard,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GuidanceConfig":
        allowed = {"lambda1", "lambda2", "lambda3", "tau", "beta", "mode", "epsilon_norm_guard"}
        unknown = set(d) - allowed
        if unknown:
            raise GuidanceError(f"unknown guidance fields: {sorted(unknown)}")
        return cls(**{k: d[k] for k in allowed & set(d)})


@dataclass(frozen=True)
class DirectionPrior:
    """Unit reference direction in flat parameter space, plus how many
    gradients have been folded in.  ``direction`` is None until the first
    observation."""

    direction: np.ndarray | None = None
    count: int = 0

    @property
    def initialized(self) -> bool:
        return self.count > 0 and self.direction is not None


def update_prior(prior: DirectionPrior, g, config: GuidanceConfig) -> DirectionPrior:
    """Fold one gradient into the prior: d' = normalize(beta*d + (1-beta)*g/|g|)."""
    gv = _vec(g)
    n = float(np.linalg.norm(gv))
    if n <= config.epsilon_norm_guard:
        logger.warning("update_prior: zero-norm gradient ignored (count=%d)", prior.count)
        return prior
    unit = gv / n
    if not prior.initialized:
        return DirectionPrior(unit, 1)
    mix = config.beta * prior.direction + (1.0 - config.beta) * unit
    mn = float(np.linalg.norm(mix))
    if mn <= config.epsilon_norm_guard:
        # beta*d and (1-beta)*unit cancelled exactly; keep the old direction
        logger.warning("update_prior: degenerate EMA mix, prior kept")
        return DirectionPrior(prior.direction, prior.count + 1)
    return DirectionPrior(mix / mn, prior.count + 1)


@dataclass(frozen=True)
class LossBreakdown:
    """Per-step scalar components.  grad_norm/cosines are None when the step
    never had to compute the base gradient (all penalties off); the trainer
    fills them from the update gradient it computes anyway."""

    base: float
    dir: float
    mag: float
    contrast: float
    total: float
    grad_norm: float | None
    cos_prior: float | None
    cos_source: float | None = None
    flags: tuple[str, ...] = ()


def _vec(g) -> np.ndarray:
    if isinstance(g, GradientVector):
        return g.values
    if isinstance(g, Tensor):
        return g.values
    return np.asarray(g, dtype=np.float64).reshape(-1)


def clip_cosine(c: float) -> float:
    # rounding can push |cos| a few ulp past 1
    return min(1.0, max(-1.0, float(c)))


# -- scalar closed forms (fd mode, logging, and oracle targets) ---------------

def direction_regularizer(g, prior: DirectionPrior, lambda1: float,
                          guard: float = 1e-12) -> float:
    """lambda1 * ||g/|g| - d_prior||^2; guarded constant when |g| ~ 0."""
    if not prior.initialized:
        raise GuidanceError("direction_regularizer: prior has no observations")
    gv = _vec(g)
    d = prior.direction
    if gv.shape != d.shape:
        raise GuidanceError(f"direction_regularizer: length {gv.size} vs prior {d.size}")
    n = float(np.linalg.norm(gv))
    if n <= guard:
        logger.warning("direction_regularizer: zero-norm gradient, guarded value used")
        return lambda1 * float(d @ d)
    u = gv / n
    diff = u - d
    return lambda1 * float(diff @ diff)


def magnitude_regularizer(g, tau: float, lambda2: float) -> float:
    """lambda2 * (|g| - tau)^2."""
    n = float(np.linalg.norm(_vec(g)))
    return lambda2 * (n - float(tau)) ** 2


def contrast_loss(g_target, g_source, lambda3: float, guard: float = 1e-12) -> float:
    """lambda3 * (1 - cos<g_target, g_source>); source side carries no gradient."""
    gt, gs = _vec(g_target), _vec(g_source)
    if gt.shape != gs.shape:
        raise GuidanceError(f"contrast_loss: length {gt.size} vs {gs.size}")
    nt, ns = float(np.linalg.norm(gt)), float(np.linalg.norm(gs))
    if nt <= guard or ns <= guard:
        raise GuidanceError("contrast_loss: zero-norm gradient")
    return lambda3 * (1.0 - float(gt @ gs) / (nt * ns))


def regularizer_gradient_wrt_g(g, config: GuidanceConfig, prior: DirectionPrior | None,
                               g_source=None) -> np.ndarray:
    """Closed-form d(R_dir + R_mag + R_grad)/dg at the given g.

    This is the adjoint the fd-hvp mode pushes through one Hessian-vector
    product; terms with lambda = 0 contribute nothing.
    """
    gv = _vec(g)
    n = float(np.linalg.norm(gv))
    w = np.zeros_like(gv)
    guard = config.epsilon_norm_guard
    if n <= guard:
        return w  # guarded values are locally constant
    u = gv / n
    if config.lambda1 > 0.0:
        if prior is None or not prior.initialized:
            raise GuidanceError("regularizer_gradient_wrt_g: lambda1 > 0 needs a prior")
        d = prior.direction
        w += (2.0 * config.lambda1 / n) * ((u - d) - u * (1.0 - float(u @ d)))
    if config.lambda2 > 0.0:
        tau = float(config.tau)
        w += 2.0 * config.lambda2 * (n - tau) * u
    if config.lambda3 > 0.0 and g_source is not None:
        gs = _vec(g_source)
        ns = float(np.linalg.norm(gs))
        if ns <= guard:
            raise GuidanceError("regularizer_gradient_wrt_g: zero-norm source gradient")
        s_hat = gs / ns
        cos = float(u @ s_hat)
        w += -config.lambda3 * (s_hat - cos * u) / n
    return w


# -- tape builders (exact mode) -----------------------------------------------

def _dir_term(g: Tensor, d: np.ndarray, lambda1: float) -> Tensor:
    u = ad.div(g, ad.l2_norm(g))
    diff = ad.sub(u, ad.constant(d))
    return ad.scalar_mul(ad.dot(diff, diff), lambda1)


def _mag_term(g: Tensor, tau: float, lambda2: float) -> Tensor:
    dev = ad.sub(ad.l2_norm(g), ad.constant([float(tau)]))
    return ad.scalar_mul(ad.mul(dev, dev), lambda2)


def _contrast_term(g: Tensor, g_source: np.ndarray, lambda3: float) -> Tensor:
    s_hat = g_source / np.linalg.norm(g_source)
    cos = ad.div(ad.dot(g, ad.constant(s_hat)), ad.l2_norm(g))
    return ad.scalar_mul(ad.sub(ad.constant([1.0]), cos), lambda3)


# -- objective assembly ---------------------------------------------------------

def base_loss(params: Mapping[str, Tensor], spec: md.ModelSpec, batch) -> Tensor:
    """Mean softmax cross-entropy of the model on (x, labels)."""
    x, y = batch
    return md.loss(spec, params, ad.constant(x), np.asarray(y))


def compute_gradient(loss: Tensor, params: Mapping[str, Tensor],
                     create_graph: bool = False) -> GradientVector:
    return ad.backward(loss, params, create_graph=create_graph)


@dataclass
class GuidedObjective:
    """Everything the trainer needs from one objective evaluation."""

    total: Tensor                      # tape scalar; == base tensor in fd mode
    breakdown: LossBreakdown
    grad: GradientVector | None        # base gradient, None when no term needed it
    reg_grad_wrt_g: np.ndarray | None  # fd mode only: closed-form dR/dg


def build_objective(params: Mapping[str, Tensor], spec: md.ModelSpec, batch,
                    config: GuidanceConfig, prior: DirectionPrior,
                    g_source: np.ndarray | None = None) -> GuidedObjective:
    """Assemble L_total = L_base + R_dir + R_mag (+ R_grad with a source).

    Terms with lambda exactly 0 are skipped outright, never computed: with
    every term off this is bit-for-bit the plain base loss path.
    """
    base_t = base_loss(params, spec, batch)
    base_v = base_t.item()
    guard = config.epsilon_norm_guard

    use_contrast = config.lambda3 > 0.0 and g_source is not None
    needs_g = config.lambda1 > 0.0 or config.lambda2 > 0.0 or use_contrast
    if not needs_g:
        bd = LossBreakdown(base=base_v, dir=0.0, mag=0.0, contrast=0.0, total=base_v,
                           grad_norm=None, cos_prior=None)
        return GuidedObjective(base_t, bd, None, None)

    if config.lambda1 > 0.0 and not prior.initialized:
        raise GuidanceError("lambda1 > 0 requires an initialized direction prior")
    if config.lambda2 > 0.0 and config.tau == "auto":
        raise GuidanceError('tau is still "auto"; resolve it before building the objective')

    exact = config.mode == "exact"
    g = compute_gradient(base_t, params, create_graph=exact)
    gn = float(np.linalg.norm(g.values))
    flags: list[str] = []
    total_t = base_t
    dir_v = mag_v = con_v = 0.0

    if config.lambda1 > 0.0:
        if gn <= guard:
            flags.append("dir_zero_grad_guard")
            dir_v = direction_regularizer(g.values, prior, config.lambda1, guard)
            if exact:
                total_t = ad.add(total_t, ad.constant([dir_v]))
        else:
            if exact:
                term = _dir_term(g.tensor, prior.direction, config.lambda1)
                dir_v = term.item()
                total_t = ad.add(total_t, term)
            else:
                dir_v = direction_regularizer(g.values, prior, config.lambda1, guard)

    if config.lambda2 > 0.0:
        if gn <= guard and exact:
            # |g| has no tape-safe derivative at 0; freeze the term this step
            flags.append("mag_zero_grad_guard")
            mag_v = magnitude_regularizer(g.values, float(config.tau), config.lambda2)
            total_t = ad.add(total_t, ad.constant([mag_v]))
        elif exact:
            term = _mag_term(g.tensor, float(config.tau), config.lambda2)
            mag_v = term.item()
            total_t = ad.add(total_t, term)
        else:
            mag_v = magnitude_regularizer(g.values, float(config.tau), config.lambda2)

    cos_source = None
    if use_contrast:
        gs = _vec(g_source)
        ns = float(np.linalg.norm(gs))
        if gn <= guard or ns <= guard:
            raise GuidanceError("contrast term: zero-norm gradient")
        cos_source = clip_cosine(float(g.values @ gs) / (gn * ns))
        if exact:
            term = _contrast_term(g.tensor, gs, config.lambda3)
            con_v = term.item()
            total_t = ad.add(total_t, term)
        else:
            con_v = contrast_loss(g.values, gs, config.lambda3, guard)
    elif g_source is not None:
        gs = _vec(g_source)
        ns = float(np.linalg.norm(gs))
        if gn > guard and ns > guard:
            cos_source = clip_cosine(float(g.values @ gs) / (gn * ns))

    cos_prior = None
    if prior.initialized and gn > guard:
        cos_prior = clip_cosine(float(g.values @ prior.direction) / gn)

    w = None
    if not exact:
        w = regularizer_gradient_wrt_g(
            g.values, config, prior if config.lambda1 > 0.0 else None,
            g_source if use_contrast else None)

    bd = LossBreakdown(base=base_v, dir=dir_v, mag=mag_v, contrast=con_v,
                       total=base_v + dir_v + mag_v + con_v,
                       grad_norm=gn, cos_prior=cos_prior, cos_source=cos_source,
                       flags=tuple(flags))
    return GuidedObjective(total_t, bd, g, w)


def total_loss(params: Mapping[str, Tensor], spec: md.ModelSpec, batch,
               config: GuidanceConfig, prior: DirectionPrior,
               g_source: np.ndarray | None = None) -> tuple[Tensor, LossBreakdown]:
    obj = build_objective(params, spec, batch, config, prior, g_source)
    return obj.total, obj.breakdown
