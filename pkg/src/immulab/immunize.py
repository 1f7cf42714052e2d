"""Bi-level immunization training and its baselines.

One epoch of the merged method:

  1. per concept n, one lower-level gradient step on the diffusion loss:
     theta'_n = theta - alpha * mask_l * grad L(x^l_n, c_n; theta)
  2. combine the per-concept weights through the differentiable merge
     (constrained solve on kv projections, averaging elsewhere)
  3. upper-level gradient ASCENT on the post-merge loss summed over concepts:
     theta <- theta + beta * mask_u * grad_theta sum_n L(x^u_n, c_n; theta')

In full_unrolled mode the upper gradient backpropagates through both the
merge layer and the one-step inner updates (the Hessian-vector term of
d theta'_n / d theta = I - alpha * H); first_order treats theta'_n as
independent of theta. The two modes coincide exactly at alpha = 0.

Baselines: run_joint pools all concepts into a single lower-level task with
no merge; run_compose restricts both levels to the kv projections and keeps
every other weight frozen at the pre-trained values; run_sequential applies
the single-concept loop to each concept in turn.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
import torch

from .adapt import draw_batch, sample_draws
from .diffusion import Denoiser, NoiseSchedule, loss_at
from .errors import NonFiniteGradient
from .linalg import Rng
from .merge import ParamSet, merge_params

FULL_UNROLLED = "full_unrolled"
FIRST_ORDER = "first_order"
SUBSETS = ("all", "kv_only", "rest_only", "custom")


@dataclass(frozen=True)
class ImmunizeConfig:
    lower_lr: float                 # alpha
    upper_lr: float                 # beta
    epochs: int                     # K
    lower_subset: str = "all"
    upper_subset: str = "all"
    grad_mode: str = FULL_UNROLLED
    ridge_lambda: float | None = None
    lower_batch: int = 8
    upper_batch: int = 8
    sum_over_concepts: bool = True  # False: single sampled concept per upper update
    lower_mask: ParamSet | None = None  # custom subsets
    upper_mask: ParamSet | None = None

    def __post_init__(self):
        if self.lower_lr < 0 or self.upper_lr < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.grad_mode not in (FULL_UNROLLED, FIRST_ORDER):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")
        for s in (self.lower_subset, self.upper_subset):
            if s not in SUBSETS:
                raise ValueError(f"unknown parameter subset {s!r}")


def subset_mask(params: ParamSet, kind: str, custom: ParamSet | None = None) -> ParamSet:
    """0/1 float masks over (kv, rest) selecting the updated coordinates."""
    if kind == "custom":
        if custom is None:
            raise ValueError("custom subset requires an explicit mask")
        return custom
    kv_on = kind in ("all", "kv_only")
    rest_on = kind in ("all", "rest_only")
    return ParamSet(
        [torch.full_like(w, 1.0 if kv_on else 0.0) for w in params.kv_weights],
        torch.full_like(params.rest, 1.0 if rest_on else 0.0),
    )


@dataclass
class StepDraws:
    """Frozen randomness of one bi-level step: per-concept (t, eps) pairs."""

    lower: list
    upper: list
    sampled_concept: int = 0

    @classmethod
    def sample(cls, rng: Rng, schedule: NoiseSchedule, lower_shapes, upper_shapes) -> "StepDraws":
        lower = [sample_draws(rng.child("lower", i), schedule, s) for i, s in enumerate(lower_shapes)]
        upper = [sample_draws(rng.child("upper", i), schedule, s) for i, s in enumerate(upper_shapes)]
        return cls(lower=lower, upper=upper,
                   sampled_concept=rng.child("pick").integers(0, len(upper_shapes)))


@dataclass
class StepRecord:
    upper_losses: np.ndarray       # (N,) post-merge loss per concept
    lower_post_losses: np.ndarray  # (N,) lower loss after the one-step update
    grad_norm: float


@dataclass
class ImmunizeTrace:
    upper_losses: np.ndarray       # (K, N)
    lower_post_losses: np.ndarray  # (K, N)
    grad_norms: np.ndarray         # (K,)
    wall_clock: np.ndarray         # (K,), informational only (not deterministic)

    def deterministic_fields(self) -> tuple:
        return (self.upper_losses, self.lower_post_losses, self.grad_norms)


def _masked_update(params: ParamSet, mask: ParamSet, grads, lr: float, sign: float) -> ParamSet:
    kv = [
        w + sign * lr * (m * g)
        for w, m, g in zip(params.kv_weights, mask.kv_weights, grads[:-1])
    ]
    rest = params.rest + sign * lr * (mask.rest * grads[-1])
    return ParamSet(kv, rest)


def _grads_or_zeros(value, tensors, create_graph=False):
    raw = torch.autograd.grad(value, tensors, create_graph=create_graph, allow_unused=True)
    return [g if g is not None else torch.zeros_like(p) for g, p in zip(raw, tensors)]


def immunize_step(model: Denoiser, pretrained: ParamSet, concepts, x_lower, x_upper,
                  reg_rows, cfg: ImmunizeConfig, schedule: NoiseSchedule,
                  draws: StepDraws, merge_rest: str = "mean"):
    """One bi-level epoch of the merged method. Returns (theta_next, record)."""
    leaves = model.params.leaves()
    live = Denoiser(model.arch, leaves)
    mask_l = subset_mask(leaves, cfg.lower_subset, cfg.lower_mask)
    mask_u = subset_mask(leaves, cfg.upper_subset, cfg.upper_mask)
    unrolled = cfg.grad_mode == FULL_UNROLLED

    adapted, lower_post = [], []
    for i, concept in enumerate(concepts):
        t, eps = draws.lower[i]
        inner = loss_at(live, x_lower[i], concept.embedding, schedule, t, eps)
        grads = _grads_or_zeros(inner, leaves.tensors(), create_graph=unrolled)
        if not unrolled:
            grads = [g.detach() for g in grads]
        theta_n = _masked_update(leaves, mask_l, grads, cfg.lower_lr, sign=-1.0)
        if not theta_n.all_finite():
            raise NonFiniteGradient(f"lower-level update diverged for concept {concept.token_id}")
        adapted.append(theta_n)
        with torch.no_grad():
            post = loss_at(Denoiser(model.arch, ParamSet(
                [w.detach() for w in theta_n.kv_weights], theta_n.rest.detach())),
                x_lower[i], concept.embedding, schedule, t, eps)
        lower_post.append(float(post))

    merged, _ = merge_params(
        adapted, [c.embedding for c in concepts], reg_rows, pretrained,
        ridge_lambda=cfg.ridge_lambda, rest_mode=merge_rest,
    )
    merged_model = Denoiser(model.arch, merged)

    upper_losses = []
    for i, concept in enumerate(concepts):
        t, eps = draws.upper[i]
        upper_losses.append(loss_at(merged_model, x_upper[i], concept.embedding, schedule, t, eps))
    objective = sum(upper_losses) if cfg.sum_over_concepts else upper_losses[draws.sampled_concept]

    grads_u = _grads_or_zeros(objective, leaves.tensors())
    masked = [m * g for m, g in zip(mask_u.tensors(), grads_u)]
    if not all(bool(torch.isfinite(g).all()) for g in masked):
        raise NonFiniteGradient("upper-level gradient has non-finite entries")
    grad_norm = float(torch.sqrt(sum(torch.sum(g * g) for g in masked)))

    with torch.no_grad():
        theta_next = _masked_update(leaves, mask_u, grads_u, cfg.upper_lr, sign=+1.0)
    theta_next = ParamSet([w.detach() for w in theta_next.kv_weights], theta_next.rest.detach())

    record = StepRecord(
        upper_losses=np.array([float(u.detach()) for u in upper_losses]),
        lower_post_losses=np.array(lower_post),
        grad_norm=grad_norm,
    )
    return theta_next, record


def _epoch_batches(dataset, concepts, size, rng: Rng, label: str):
    return [
        draw_batch(dataset[c.token_id], size, rng.child(label, c.token_id))
        for c in concepts
    ]


def _run_loop(model: Denoiser, concepts, dataset, cfg, schedule, rng, step_fn):
    theta = model.params.clone()
    n = len(concepts)
    upper = np.zeros((cfg.epochs, n))
    lower = np.zeros((cfg.epochs, n))
    norms = np.zeros(cfg.epochs)
    wall = np.zeros(cfg.epochs)
    for k in range(cfg.epochs):
        tic = time.perf_counter()
        epoch_rng = rng.child("epoch", k)
        x_l = _epoch_batches(dataset, concepts, cfg.lower_batch, epoch_rng, "xl")
        x_u = _epoch_batches(dataset, concepts, cfg.upper_batch, epoch_rng, "xu")
        draws = StepDraws.sample(
            epoch_rng.child("draws"), schedule,
            [tuple(x.shape) for x in x_l], [tuple(x.shape) for x in x_u],
        )
        theta, rec = step_fn(Denoiser(model.arch, theta), x_l, x_u, draws)
        upper[k] = rec.upper_losses
        lower[k] = rec.lower_post_losses
        norms[k] = rec.grad_norm
        wall[k] = time.perf_counter() - tic
    trace = ImmunizeTrace(upper, lower, norms, wall)
    return Denoiser(model.arch, theta), trace


def run_merged(model_pre: Denoiser, concepts, dataset, cfg: ImmunizeConfig,
               schedule: NoiseSchedule, rng: Rng, reg_rows, merge_rest: str = "mean"):
    """Multi-concept immunization through the differentiable merge layer."""
    pretrained = model_pre.params.clone()

    def step(model, x_l, x_u, draws):
        return immunize_step(model, pretrained, concepts, x_l, x_u, reg_rows, cfg,
                             schedule, draws, merge_rest=merge_rest)

    return _run_loop(model_pre, concepts, dataset, cfg, schedule, rng, step)


def joint_step(model: Denoiser, concepts, x_lower, x_upper, cfg: ImmunizeConfig,
               schedule: NoiseSchedule, draws: StepDraws):
    """One epoch of the pooled baseline: a single lower-level task over the
    combined dataset, no merge layer."""
    leaves = model.params.leaves()
    live = Denoiser(model.arch, leaves)
    mask_l = subset_mask(leaves, cfg.lower_subset, cfg.lower_mask)
    mask_u = subset_mask(leaves, cfg.upper_subset, cfg.upper_mask)
    unrolled = cfg.grad_mode == FULL_UNROLLED
    n = len(concepts)

    inner = sum(
        loss_at(live, x_lower[i], concepts[i].embedding, schedule, *draws.lower[i])
        for i in range(n)
    ) / n
    grads = _grads_or_zeros(inner, leaves.tensors(), create_graph=unrolled)
    if not unrolled:
        grads = [g.detach() for g in grads]
    theta_prime = _masked_update(leaves, mask_l, grads, cfg.lower_lr, sign=-1.0)
    if not theta_prime.all_finite():
        raise NonFiniteGradient("lower-level update diverged")
    adapted_model = Denoiser(model.arch, theta_prime)

    with torch.no_grad():
        post = [
            float(loss_at(Denoiser(model.arch, ParamSet(
                [w.detach() for w in theta_prime.kv_weights], theta_prime.rest.detach())),
                x_lower[i], concepts[i].embedding, schedule, *draws.lower[i]))
            for i in range(n)
        ]

    upper_losses = [
        loss_at(adapted_model, x_upper[i], concepts[i].embedding, schedule, *draws.upper[i])
        for i in range(n)
    ]
    objective = sum(upper_losses) if cfg.sum_over_concepts else upper_losses[draws.sampled_concept]
    grads_u = _grads_or_zeros(objective, leaves.tensors())
    masked = [m * g for m, g in zip(mask_u.tensors(), grads_u)]
    if not all(bool(torch.isfinite(g).all()) for g in masked):
        raise NonFiniteGradient("upper-level gradient has non-finite entries")
    grad_norm = float(torch.sqrt(sum(torch.sum(g * g) for g in masked)))

    with torch.no_grad():
        theta_next = _masked_update(leaves, mask_u, grads_u, cfg.upper_lr, sign=+1.0)
    theta_next = ParamSet([w.detach() for w in theta_next.kv_weights], theta_next.rest.detach())
    record = StepRecord(np.array([float(u.detach()) for u in upper_losses]), np.array(post), grad_norm)
    return theta_next, record


def run_joint(model_pre: Denoiser, concepts, dataset, cfg: ImmunizeConfig,
              schedule: NoiseSchedule, rng: Rng, reg_rows=None):
    """Joint-training baseline: pool the concepts into one lower-level task."""

    def step(model, x_l, x_u, draws):
        return joint_step(model, concepts, x_l, x_u, cfg, schedule, draws)

    return _run_loop(model_pre, concepts, dataset, cfg, schedule, rng, step)


def run_compose(model_pre: Denoiser, concepts, dataset, cfg: ImmunizeConfig,
                schedule: NoiseSchedule, rng: Rng, reg_rows):
    """Compose baseline: merge only the kv projections, freeze everything else."""
    forced = replace(cfg, lower_subset="kv_only", upper_subset="kv_only",
                     lower_mask=None, upper_mask=None)
    return run_merged(model_pre, concepts, dataset, forced, schedule, rng, reg_rows,
                      merge_rest="copy")


def run_sequential(model_pre: Denoiser, concepts, dataset, cfg: ImmunizeConfig,
                   schedule: NoiseSchedule, rng: Rng, reg_rows=None):
    """Single-concept immunization applied to each concept in order.

    The returned trace concatenates the per-concept runs, so its length is
    len(concepts) * cfg.epochs.
    """
    model = model_pre
    traces = []
    for i, concept in enumerate(concepts):
        model, trace = run_joint(model, [concept], dataset, cfg, schedule,
                                 rng.child("sequential", i))
        traces.append(trace)
    combined = ImmunizeTrace(
        upper_losses=np.vstack([t.upper_losses for t in traces]),
        lower_post_losses=np.vstack([t.lower_post_losses for t in traces]),
        grad_norms=np.concatenate([t.grad_norms for t in traces]),
        wall_clock=np.concatenate([t.wall_clock for t in traces]),
    )
    return model, combined
