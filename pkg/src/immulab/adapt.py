"""Adaptation attacks: the fine-tuning loops an immunized model must resist.

Four parameter subsets, all trained by plain gradient descent on the
diffusion loss (plain GD keeps the one-step lower-level update of the
bi-level trainer analytically identical to an attack step):

  full            update every parameter
  lowrank         freeze the base model, learn additive A @ B factors on the
                  kv projections (optionally also the MLP matrices)
  kv_only         update only the key/value projection matrices
  embedding_only  freeze the model, learn a free concept embedding

AdaptSession supports running in segments so evaluation can pause at
checkpoints; adapt() is the one-shot wrapper.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import Denoiser, NoiseSchedule, loss_at, unpack_rest
from .errors import IncompatibleSignature, NonFiniteLoss, ShapeMismatch
from .linalg import Rng
from .merge import ParamSet

FULL = "full"
LOWRANK = "lowrank"
KV_ONLY = "kv_only"
EMBEDDING_ONLY = "embedding_only"
KINDS = (FULL, LOWRANK, KV_ONLY, EMBEDDING_ONLY)

EMBEDDING_INIT_STD = 0.1  # noise added to the true embedding for embedding_only


@dataclass(frozen=True)
class AdaptMethod:
    kind: str
    lr: float
    steps: int
    batch_size: int
    rank: int = 2
    lowrank_mlp: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown adaptation kind {self.kind!r}")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.kind == LOWRANK and self.rank < 1:
            raise ValueError("rank must be >= 1")


@dataclass
class AdaptResult:
    adapted_params: ParamSet
    learned_embedding: torch.Tensor | None
    loss_trajectory: list
    final_loss: float


def effective_params(base: ParamSet, kv_factors, mlp_factors=None, arch=None) -> ParamSet:
    """Apply additive low-rank factors: each kv weight becomes W + A @ B.

    mlp_factors, when given, maps {"w1","w2"} to (A, B) pairs applied to the
    corresponding MLP matrices inside the flat rest vector (needs arch).
    """
    if len(kv_factors) != len(base.kv_weights):
        raise ShapeMismatch("one (A, B) factor pair per kv weight required")
    kv = []
    for w, (a, b) in zip(base.kv_weights, kv_factors):
        if a.shape[0] != w.shape[0] or b.shape[1] != w.shape[1] or a.shape[1] != b.shape[0]:
            raise ShapeMismatch(
                f"factor shapes {tuple(a.shape)}x{tuple(b.shape)} do not fit weight {tuple(w.shape)}"
            )
        kv.append(w + a @ b)
    rest = base.rest
    if mlp_factors:
        if arch is None:
            raise ShapeMismatch("arch required to place MLP factors")
        named = unpack_rest(arch, rest)
        patched = {name: named[name] + a @ b for name, (a, b) in mlp_factors.items()}
        parts = []
        for name, _ in arch.rest_layout():
            parts.append((patched.get(name, named[name])).reshape(-1))
        rest = torch.cat(parts)
    return ParamSet(kv, rest)


def _mixture_loss(model, batches, schedule, draws):
    """Mean diffusion loss over (x0, embedding) pairs at fixed draws."""
    total = 0.0
    for (x0, emb), (t, eps) in zip(batches, draws):
        total = total + loss_at(model, x0, emb, schedule, t, eps)
    return total / len(batches)


def draw_batch(data: torch.Tensor, size: int, rng: Rng) -> torch.Tensor:
    idx = rng.choice(len(data), size, replace=True)
    return data[torch.from_numpy(np.asarray(idx))]


def sample_draws(rng: Rng, schedule: NoiseSchedule, shape) -> tuple:
    t = rng.integers(1, schedule.num_steps + 1)
    return t, torch.from_numpy(rng.normal(shape))


class AdaptSession:
    """One adaptation run that can be advanced in segments.

    Randomness is keyed by the absolute step index, so running 100 steps in
    one call or in four segments of 25 produces identical states.
    """

    def __init__(self, model: Denoiser, method: AdaptMethod, concept, data, schedule, rng: Rng):
        if len(model.params.kv_weights) != 2 * model.arch.attention_sites:
            raise IncompatibleSignature("model parameter set does not match its architecture")
        if len(data) == 0:
            raise ValueError("adaptation data must be nonempty")
        self.arch = model.arch
        self.method = method
        self.concept = concept
        self.data = torch.as_tensor(data, dtype=torch.float64)
        self.schedule = schedule
        self.rng = rng
        self.step_count = 0
        self.trajectory: list = []

        base = model.params.clone()
        if method.kind == FULL:
            self.params = base.leaves()
            self._train = self.params.tensors()
        elif method.kind == KV_ONLY:
            self.params = ParamSet(
                [w.requires_grad_(True) for w in base.kv_weights], base.rest
            )
            self._train = list(self.params.kv_weights)
        elif method.kind == EMBEDDING_ONLY:
            self.params = base
            init = concept.embedding.detach().clone()
            init += torch.from_numpy(rng.child("embed_init").normal(tuple(init.shape), EMBEDDING_INIT_STD))
            self.embedding = init.requires_grad_(True)
            self._train = [self.embedding]
        elif method.kind == LOWRANK:
            self.params = base
            r = method.rank
            if any(r > min(w.shape) for w in base.kv_weights):
                raise ValueError(f"rank {r} exceeds a kv weight dimension")
            frng = rng.child("factors")
            self.kv_factors = []
            for w in base.kv_weights:
                a = torch.from_numpy(frng.normal((w.shape[0], r), scale=1.0 / r)).requires_grad_(True)
                b = torch.zeros((r, w.shape[1]), dtype=torch.float64, requires_grad=True)
                self.kv_factors.append((a, b))
            self.mlp_factors = None
            if method.lowrank_mlp:
                named_shapes = dict((n, s) for n, s in self.arch.rest_layout())
                self.mlp_factors = {}
                for name in ("w1", "w2"):
                    rows, cols = named_shapes[name]
                    rr = min(r, rows, cols)
                    a = torch.from_numpy(frng.normal((rows, rr), scale=1.0 / rr)).requires_grad_(True)
                    b = torch.zeros((rr, cols), dtype=torch.float64, requires_grad=True)
                    self.mlp_factors[name] = (a, b)
            self._train = [t for ab in self.kv_factors for t in ab]
            if self.mlp_factors:
                self._train += [t for ab in self.mlp_factors.values() for t in ab]

        if method.kind != EMBEDDING_ONLY:
            self.embedding = concept.embedding.detach().clone()

    def _effective(self) -> ParamSet:
        if self.method.kind == LOWRANK:
            return effective_params(self.params, self.kv_factors, self.mlp_factors, self.arch)
        return self.params

    def model(self) -> Denoiser:
        eff = self._effective()
        return Denoiser(self.arch, ParamSet([w.detach() for w in eff.kv_weights], eff.rest.detach()))

    def generation_embedding(self) -> torch.Tensor:
        return self.embedding.detach()

    def run(self, n_steps: int) -> "AdaptSession":
        for _ in range(n_steps):
            step_rng = self.rng.child("step", self.step_count)
            x0 = draw_batch(self.data, self.method.batch_size, step_rng.child("batch"))
            t, eps = sample_draws(step_rng.child("draw"), self.schedule, tuple(x0.shape))
            live = Denoiser(self.arch, self._effective())
            value = loss_at(live, x0, self.embedding, self.schedule, t, eps)
            if not torch.isfinite(value):
                raise NonFiniteLoss(
                    f"{self.method.kind} diverged at step {self.step_count}", self.trajectory
                )
            grads = torch.autograd.grad(value, self._train, allow_unused=True)
            with torch.no_grad():
                for p, g in zip(self._train, grads):
                    if g is not None:
                        p -= self.method.lr * g
            self.trajectory.append(float(value.detach()))
            self.step_count += 1
        return self

    def result(self) -> AdaptResult:
        eff = self._effective()
        learned = self.embedding.detach().clone() if self.method.kind == EMBEDDING_ONLY else None
        return AdaptResult(
            adapted_params=ParamSet([w.detach().clone() for w in eff.kv_weights], eff.rest.detach().clone()),
            learned_embedding=learned,
            loss_trajectory=list(self.trajectory),
            final_loss=self.trajectory[-1] if self.trajectory else math.nan,
        )


def adapt(model: Denoiser, method: AdaptMethod, concept, data, schedule, rng: Rng) -> AdaptResult:
    """Run one attack to completion and return the adapted parameters."""
    return AdaptSession(model, method, concept, data, schedule, rng).run(method.steps).result()


def train_denoiser(model: Denoiser, concept_data, schedule, steps: int, lr: float,
                   batch_size: int, rng: Rng) -> tuple:
    """Generic 'train for S steps' runner over pooled concept data.

    concept_data is a list of (data, embedding) pairs; every step draws one
    batch per concept and descends the mean loss, so each batch touches every
    concept. Used for pre-training and shared by the joint baseline's shape.
    """
    params = model.params.leaves()
    trajectory = []
    for step in range(steps):
        step_rng = rng.child("pretrain", step)
        batches, draws = [], []
        for ci, (data, emb) in enumerate(concept_data):
            x0 = draw_batch(data, batch_size, step_rng.child("batch", ci))
            batches.append((x0, emb))
            draws.append(sample_draws(step_rng.child("draw", ci), schedule, tuple(x0.shape)))
        live = Denoiser(model.arch, params)
        value = _mixture_loss(live, batches, schedule, draws)
        if not torch.isfinite(value):
            raise NonFiniteLoss(f"pre-training diverged at step {step}", trajectory)
        grads = torch.autograd.grad(value, params.tensors())
        with torch.no_grad():
            for p, g in zip(params.tensors(), grads):
                p -= lr * g
        trajectory.append(float(value.detach()))
    return Denoiser(model.arch, params.clone()), trajectory
