"""Toy conditional denoising-diffusion model on low-dimensional data.

The denoiser is deliberately small: a feature vector [x_t, t/T] drives one or
more cross-attention reads over the concept embedding (keys and values come
from per-site projection matrices, which form the merged parameter subset),
followed by a two-layer MLP head. All tensors are float64 and every gradient
path (kv projections, remaining weights, the embedding, and x_t itself) is
exact under torch autograd.

Noise model: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with the training
loss w_t * E ||eps_hat(x_t, c, t) - eps||^2 estimated at a single uniformly
drawn timestep per call.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeMismatch
from .linalg import Rng
from .merge import DTYPE, ParamSet

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray
    loss_weights: np.ndarray

    def __post_init__(self):
        b, ab, w = self.betas, self.alpha_bars, self.loss_weights
        if not (len(b) == len(ab) == len(w)) or len(b) == 0:
            raise ShapeMismatch("schedule arrays must be nonempty and equal length")
        if np.any(b <= 0) or np.any(b >= 1) or np.any(np.diff(b) < 0):
            raise ValueError("betas must lie in (0,1) and be nondecreasing")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bars must be strictly decreasing")
        if np.any(w <= 0):
            raise ValueError("loss weights must be positive")

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    @classmethod
    def linear(cls, num_steps: int = 50, beta_start: float = 1e-4, beta_end: float = 0.2,
               loss_weights=None) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, num_steps)
        alpha_bars = np.cumprod(1.0 - betas)
        if loss_weights is None:
            loss_weights = np.ones(num_steps)
        return cls(betas=betas, alpha_bars=np.asarray(alpha_bars),
                   loss_weights=np.asarray(loss_weights, dtype=np.float64))


@dataclass(frozen=True)
class DenoiserArch:
    data_dim: int = 2
    token_count: int = 2
    embed_dim: int = 8
    key_dim: int = 8
    value_dim: int = 8
    hidden_dim: int = 16
    attention_sites: int = 2
    num_steps: int = 50  # nominal max timestep, used to scale the time feature

    @property
    def feature_dim(self) -> int:
        return self.data_dim + 1

    @property
    def mlp_in_dim(self) -> int:
        return self.feature_dim + self.attention_sites * self.value_dim

    def kv_shapes(self) -> list:
        shapes = []
        for _ in range(self.attention_sites):
            shapes.append((self.embed_dim, self.key_dim))
            shapes.append((self.embed_dim, self.value_dim))
        return shapes

    def rest_layout(self) -> list:
        layout = []
        for i in range(self.attention_sites):
            layout.append((f"wq{i}", (self.feature_dim, self.key_dim)))
            layout.append((f"bq{i}", (self.key_dim,)))
        layout.append(("w1", (self.mlp_in_dim, self.hidden_dim)))
        layout.append(("b1", (self.hidden_dim,)))
        layout.append(("w2", (self.hidden_dim, self.data_dim)))
        layout.append(("b2", (self.data_dim,)))
        return layout

    @property
    def rest_size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.rest_layout())

    def to_dict(self) -> dict:
        return {
            "data_dim": self.data_dim, "token_count": self.token_count,
            "embed_dim": self.embed_dim, "key_dim": self.key_dim,
            "value_dim": self.value_dim, "hidden_dim": self.hidden_dim,
            "attention_sites": self.attention_sites, "num_steps": self.num_steps,
        }


def unpack_rest(arch: DenoiserArch, rest: torch.Tensor) -> dict:
    """Views of the flat rest vector as named weight tensors (differentiable)."""
    layout = arch.rest_layout()
    sizes = [int(np.prod(s)) for _, s in layout]
    if rest.numel() != sum(sizes):
        raise ShapeMismatch(f"rest vector has {rest.numel()} entries, layout needs {sum(sizes)}")
    parts = torch.split(rest, sizes)
    return {name: part.reshape(shape) for (name, shape), part in zip(layout, parts)}


def init_params(arch: DenoiserArch, rng: Rng) -> ParamSet:
    """Seeded Gaussian init, 1/sqrt(fan_in) scaling, zero biases."""
    kv = [
        torch.from_numpy(rng.normal(s, scale=1.0 / math.sqrt(s[0])))
        for s in arch.kv_shapes()
    ]
    rest_parts = []
    for name, shape in arch.rest_layout():
        if name.startswith("b"):
            rest_parts.append(np.zeros(int(np.prod(shape))))
        else:
            rest_parts.append(rng.normal((int(np.prod(shape)),), scale=1.0 / math.sqrt(shape[0])))
    return ParamSet(kv, torch.from_numpy(np.concatenate(rest_parts)))


@dataclass
class Denoiser:
    arch: DenoiserArch
    params: ParamSet

    def forward(self, x_t: torch.Tensor, embedding: torch.Tensor, t: int) -> torch.Tensor:
        return denoise(self.arch, self.params, x_t, embedding, t)

    def with_params(self, params: ParamSet) -> "Denoiser":
        return Denoiser(self.arch, params)


def denoise(arch: DenoiserArch, params: ParamSet, x_t, embedding, t: int) -> torch.Tensor:
    """Predict the noise component of x_t conditioned on a concept embedding.

    Keys are embedding @ W_k and values embedding @ W_v at every attention
    site; rows of the batch never interact.
    """
    x_t = torch.as_tensor(x_t, dtype=DTYPE)
    embedding = torch.as_tensor(embedding, dtype=DTYPE)
    if x_t.ndim != 2 or x_t.shape[1] != arch.data_dim:
        raise ShapeMismatch(f"x_t must be (n, {arch.data_dim}), got {tuple(x_t.shape)}")
    if embedding.shape != (arch.token_count, arch.embed_dim):
        raise ShapeMismatch(
            f"embedding must be ({arch.token_count}, {arch.embed_dim}), got {tuple(embedding.shape)}"
        )
    if not 1 <= t <= arch.num_steps:
        raise ShapeMismatch(f"timestep {t} outside [1, {arch.num_steps}]")
    if len(params.kv_weights) != 2 * arch.attention_sites:
        raise ShapeMismatch("parameter set does not match architecture kv count")

    named = unpack_rest(arch, params.rest)
    t_col = torch.full((x_t.shape[0], 1), t / arch.num_steps, dtype=DTYPE)
    u = torch.cat([x_t, t_col], dim=1)
    feats = [u]
    inv_sqrt_d = 1.0 / math.sqrt(arch.key_dim)
    for i in range(arch.attention_sites):
        q = torch.tanh(u @ named[f"wq{i}"] + named[f"bq{i}"])
        keys = embedding @ params.kv_weights[2 * i]
        values = embedding @ params.kv_weights[2 * i + 1]
        attn = torch.softmax(q @ keys.T * inv_sqrt_d, dim=1)
        feats.append(attn @ values)
    h = torch.tanh(torch.cat(feats, dim=1) @ named["w1"] + named["b1"])
    return h @ named["w2"] + named["b2"]


def noisy_sample(x0: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule, t: int):
    ab = float(schedule.alpha_bars[t - 1])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def loss_at(model, x0, embedding, schedule: NoiseSchedule, t: int, eps) -> torch.Tensor:
    """Diffusion loss at a fixed draw (t, eps): w_t * mean_i |eps_hat - eps|^2."""
    x0 = torch.as_tensor(x0, dtype=DTYPE)
    eps = torch.as_tensor(eps, dtype=DTYPE)
    if eps.shape != x0.shape:
        raise ShapeMismatch(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    if not 1 <= t <= schedule.num_steps:
        raise ShapeMismatch(f"timestep {t} outside [1, {schedule.num_steps}]")
    x_t = noisy_sample(x0, eps, schedule, t)
    pred = model.forward(x_t, embedding, t)
    w = float(schedule.loss_weights[t - 1])
    return w * torch.mean(torch.sum((pred - eps) ** 2, dim=1))


@dataclass
class LossResult:
    value: float
    grads: ParamSet
    t: int
    eps: torch.Tensor


def loss(model, x0, embedding, schedule: NoiseSchedule, rng: Rng) -> LossResult:
    """Monte-Carlo estimate of the diffusion loss with its exact gradient.

    The timestep is uniform over [1, T] and eps is standard normal, both from
    the provided rng, so the result is bit-reproducible under a fixed seed.
    Gradients cover the full parameter set; callers mask to subsets.
    """
    x0 = torch.as_tensor(x0, dtype=DTYPE)
    t = rng.integers(1, schedule.num_steps + 1)
    eps = torch.from_numpy(rng.normal(tuple(x0.shape)))
    leaves = model.params.leaves()
    live = model.with_params(leaves) if isinstance(model, Denoiser) else model
    value = loss_at(live, x0, embedding, schedule, t, eps)
    tensors = leaves.tensors()
    if tensors and isinstance(model, Denoiser):
        raw = torch.autograd.grad(value, tensors, allow_unused=True)
        raw = [g if g is not None else torch.zeros_like(p) for g, p in zip(raw, tensors)]
        grads = ParamSet(list(raw[:-1]), raw[-1])
    else:
        grads = ParamSet([torch.zeros_like(w) for w in leaves.kv_weights], torch.zeros_like(leaves.rest))
    return LossResult(value=float(value.detach()), grads=grads, t=t, eps=eps)


def sample(model, embedding, schedule: NoiseSchedule, n: int, rng: Rng) -> torch.Tensor:
    """Ancestral reverse-process sampling from pure noise, deterministic per rng."""
    if n < 1:
        raise ShapeMismatch(f"need n >= 1 samples, got {n}")
    arch_dim = model.arch.data_dim
    with torch.no_grad():
        x = torch.from_numpy(rng.normal((n, arch_dim)))
        for t in range(schedule.num_steps, 0, -1):
            beta = float(schedule.betas[t - 1])
            ab = float(schedule.alpha_bars[t - 1])
            eps_hat = model.forward(x, embedding, t)
            x = (x - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(1.0 - beta)
            if t > 1:
                x = x + math.sqrt(beta) * torch.from_numpy(rng.normal((n, arch_dim)))
    return x


# ---------------------------------------------------------------------------
# Concepts and toy data.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianMixture:
    """Isotropic Gaussian mixture in R^D; the stand-in for a concept's images."""

    means: np.ndarray    # (k, D)
    stds: np.ndarray     # (k,)
    weights: np.ndarray  # (k,), sums to 1

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        comp = rng.generator.choice(len(self.weights), size=n, p=self.weights)
        noise = rng.normal((n, self.means.shape[1]))
        return self.means[comp] + self.stds[comp][:, None] * noise

    @classmethod
    def single(cls, mean, std: float) -> "GaussianMixture":
        mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
        return cls(means=mean, stds=np.array([std]), weights=np.array([1.0]))


@dataclass(frozen=True)
class ConceptSpec:
    token_id: int
    embedding: torch.Tensor   # (l, c) float64
    sampler: GaussianMixture

    def __post_init__(self):
        if not bool(torch.isfinite(self.embedding).all()):
            raise ShapeMismatch(f"concept {self.token_id}: embedding has non-finite entries")

    def embedding_np(self) -> np.ndarray:
        return self.embedding.detach().numpy()


def make_toy_dataset(concepts, per_concept: int, rng: Rng) -> dict:
    """Draw per-concept batches, keyed by token id; reproducible under seed."""
    if per_concept < 1:
        raise ValueError(f"per_concept must be >= 1, got {per_concept}")
    ids = [c.token_id for c in concepts]
    if len(set(ids)) != len(ids):
        raise ValueError("concepts must have distinct token ids")
    return {
        c.token_id: torch.from_numpy(c.sampler.sample(per_concept, rng.child("data", c.token_id)))
        for c in concepts
    }


# ---------------------------------------------------------------------------
# Checkpoints: versioned npz dump, bit-exact round trip.
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: Denoiser) -> None:
    meta = {"format_version": CHECKPOINT_FORMAT_VERSION, "arch": model.arch.to_dict()}
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for i, w in enumerate(model.params.kv_weights):
        arrays[f"kv_{i}"] = w.detach().numpy()
    arrays["rest"] = model.params.rest.detach().numpy()
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Denoiser:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format: {meta.get('format_version')}")
        arch = DenoiserArch(**meta["arch"])
        kv = [torch.from_numpy(data[f"kv_{i}"].copy()) for i in range(2 * arch.attention_sites)]
        rest = torch.from_numpy(data["rest"].copy())
    return Denoiser(arch, ParamSet(kv, rest))
