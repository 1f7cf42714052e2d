"""Similarity metrics and the gap-ratio evaluation quantities.

Three batch-level similarity kinds stand in for pretrained perceptual
metrics at desk scale:

  frozen_encoder_cosine  cosine of mean features under a frozen, seeded
                         2-layer nonlinear encoder R^D -> R^16
  neg_mse                negative mean squared distance between batch means
  mmd_gaussian           1 - (biased Gaussian-kernel MMD^2) / 2

The gap ratios compare generations across immunization arms:

  msgr   mean over target concepts of
         (sim(ref, attacked) - sim(ref, attacked_immunized)) / sim(ref, attacked)
  mrsgr  (mean_other cross_sim - mean_target cross_sim) / mean_other cross_sim
         where cross_sim compares the two arms' generations directly

Both are pure ratio forms, so rescaling the metric by any positive constant
leaves them unchanged. Metric kind is recorded wherever values are reported;
numbers are never comparable across kinds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import sample
from .errors import DegenerateDenominator, DimensionMismatch, EmptyBatch
from .linalg import Rng

FROZEN_ENCODER_COSINE = "frozen_encoder_cosine"
NEG_MSE = "neg_mse"
MMD_GAUSSIAN = "mmd_gaussian"
METRIC_KINDS = (FROZEN_ENCODER_COSINE, NEG_MSE, MMD_GAUSSIAN)

DENOMINATOR_FLOOR = 1e-9


@dataclass(frozen=True)
class FrozenEncoder:
    """Fixed random feature map; weights are set once at experiment start."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def features(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.w1 + self.b1) @ self.w2 + self.b2

    @classmethod
    def seeded(cls, data_dim: int, seed: int, feature_dim: int = 16, hidden: int = 32) -> "FrozenEncoder":
        rng = Rng(seed).child("frozen_encoder")
        return cls(
            w1=rng.normal((data_dim, hidden), scale=1.0 / np.sqrt(data_dim)),
            b1=rng.normal((hidden,), scale=0.1),
            w2=rng.normal((hidden, feature_dim), scale=1.0 / np.sqrt(hidden)),
            b2=rng.normal((feature_dim,), scale=0.1),
        )


@dataclass(frozen=True)
class SimilarityMetric:
    kind: str
    encoder_seed: int = 0
    bandwidth: float = 1.0
    aggregation: str = "mean_feature"  # or "pairwise_mean" for the cosine kind
    features_fn: object = field(default=None, compare=False)  # test hook

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")


def _checked(batch, name) -> np.ndarray:
    arr = np.asarray(batch, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise EmptyBatch(f"{name}: need a nonempty (n, d) batch, got shape {arr.shape}")
    return arr


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-300 or nv < 1e-300:
        raise DegenerateDenominator("zero-norm feature vector in cosine similarity")
    return float(u @ v / (nu * nv))


def similarity(metric: SimilarityMetric, batch_a, batch_b) -> float:
    """Symmetric batch-level similarity; deterministic given the encoder seed."""
    a = _checked(batch_a, "batch_a")
    b = _checked(batch_b, "batch_b")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"batches have dims {a.shape[1]} vs {b.shape[1]}")

    if metric.kind == FROZEN_ENCODER_COSINE:
        feats = metric.features_fn or FrozenEncoder.seeded(a.shape[1], metric.encoder_seed).features
        fa, fb = feats(a), feats(b)
        if metric.aggregation == "pairwise_mean":
            na = fa / np.linalg.norm(fa, axis=1, keepdims=True)
            nb = fb / np.linalg.norm(fb, axis=1, keepdims=True)
            return float(np.mean(na @ nb.T))
        return _cosine(fa.mean(axis=0), fb.mean(axis=0))

    if metric.kind == NEG_MSE:
        diff = a.mean(axis=0) - b.mean(axis=0)
        return float(-np.mean(diff * diff))

    # mmd_gaussian
    h2 = 2.0 * metric.bandwidth**2

    def kmean(x, y):
        d2 = np.sum(x * x, axis=1)[:, None] + np.sum(y * y, axis=1)[None, :] - 2.0 * x @ y.T
        return float(np.mean(np.exp(-np.maximum(d2, 0.0) / h2)))

    mmd2 = kmean(a, a) + kmean(b, b) - 2.0 * kmean(a, b)
    return 1.0 - mmd2 / 2.0


def msgr_detail(sim_no_immu, sim_immu):
    """Per-concept gap ratios plus flags for negative denominators."""
    no = [float(v) for v in sim_no_immu]
    im = [float(v) for v in sim_immu]
    if len(no) != len(im) or not no:
        raise DimensionMismatch("need matching nonempty per-concept similarity lists")
    ratios, negative = [], []
    for n, (s_no, s_im) in enumerate(zip(no, im)):
        if abs(s_no) < DENOMINATOR_FLOOR:
            raise DegenerateDenominator(
                f"concept {n}: |similarity without immunization| = {abs(s_no):.2e} < {DENOMINATOR_FLOOR}"
            )
        ratios.append((s_no - s_im) / s_no)
        negative.append(s_no < 0)
    return float(np.mean(ratios)), ratios, negative


def msgr(sim_no_immu, sim_immu) -> float:
    """Mean similarity gap ratio over target concepts (fraction, not percent).

    Positive iff immunization lowered the (denominator-normalized) similarity
    of post-attack generations to the references.
    """
    value, _, _ = msgr_detail(sim_no_immu, sim_immu)
    return value


def mrsgr_from_sims(target_sims, other_sims) -> float:
    """Relative gap between other-concept and target-concept cross-arm similarity."""
    if not len(target_sims) or not len(other_sims):
        raise DimensionMismatch("need nonempty target and other similarity lists")
    m_target = float(np.mean([float(v) for v in target_sims]))
    m_other = float(np.mean([float(v) for v in other_sims]))
    if abs(m_other) < DENOMINATOR_FLOOR:
        raise DegenerateDenominator(f"|other-concept mean similarity| = {abs(m_other):.2e}")
    return (m_other - m_target) / m_other


def mrsgr(pairs_target, pairs_other, metric: SimilarityMetric) -> float:
    """mrsgr from raw generation batches: each pair is (immunized, attacked)."""
    t_sims = [similarity(metric, im, at) for im, at in pairs_target]
    o_sims = [similarity(metric, im, at) for im, at in pairs_other]
    return mrsgr_from_sims(t_sims, o_sims)


@dataclass
class MetricReport:
    """Aggregated gap ratios for one (method, attack) cell under one metric.

    The metric kind is recorded on the report itself so values are never
    compared across kinds; per-checkpoint similarity trajectories stay in
    the emitted result rows, of which this is the aggregate view.
    """

    metric: str
    msgr_by_group: dict = field(default_factory=dict)
    mrsgr_by_group: dict = field(default_factory=dict)
    negative_denominator: dict = field(default_factory=dict)

    @property
    def msgr_mean(self):
        vals = list(self.msgr_by_group.values())
        return float(np.mean(vals)) if vals else None

    @property
    def mrsgr_mean(self):
        vals = list(self.mrsgr_by_group.values())
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        out = {"metric": self.metric, "msgr": self.msgr_by_group,
               "mrsgr": self.mrsgr_by_group,
               "negative_denominator": self.negative_denominator}
        if self.msgr_by_group:
            out["msgr_mean"] = self.msgr_mean
        if self.mrsgr_by_group:
            out["mrsgr_mean"] = self.mrsgr_mean
        return out


def trajectory(model_factory, attack, concept, data, schedule, checkpoints,
               metric: SimilarityMetric, reference, rng: Rng, gen_samples: int = 64):
    """Similarity-to-reference series along an adaptation run.

    Pauses the attack at each checkpoint, samples generations with the
    (possibly learned) concept embedding, and scores them against the
    reference batch. Checkpoint indices and rng labels fix the alignment, so
    two arms evaluated with equal seeds share identical draw sequences.
    """
    from .adapt import AdaptSession  # deferred: metrics stays import-light

    cks = list(checkpoints)
    if any(b <= a for a, b in zip(cks, cks[1:])) or not cks or cks[0] < 0:
        raise ValueError("checkpoints must be nonnegative and strictly increasing")
    session = AdaptSession(model_factory(), attack, concept, data, schedule, rng.child("attack"))
    reference = _checked(reference, "reference")
    sims, done = [], 0
    for ck in cks:
        session.run(ck - done)
        done = ck
        gen = sample(session.model(), session.generation_embedding(), schedule,
                     gen_samples, rng.child("gen", ck))
        sims.append(similarity(metric, gen.numpy(), reference))
    return sims
