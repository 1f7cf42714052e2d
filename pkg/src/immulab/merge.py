"""Differentiable constrained model merging.

The forward problem combines N per-concept adapted weight matrices into one:

    minimize_phi  ||R (phi - W_pre)||_F^2  (+ ridge)   s.t.  C phi = O

where C stacks the N target-concept embeddings (N*l x c), R stacks the
regularization embeddings (N'*l x c), W_pre is the pre-trained weight
(c x d), and O stacks the desired outputs c_n @ W_n of the adapted weights.

Eliminating phi from the KKT conditions gives, with Q = R^T R (+ lam I) and
Schur complement S = C Q^-1 C^T:

    multipliers M = 2 S^-1 (O - C W_pre)
    merged phi*   = W_pre + 1/2 Q^-1 C^T M

phi* is affine in O, so the exact vector-Jacobian product of a loss through
the layer is S^-1 C Q^-1 (applied to the upstream gradient), and the
per-concept weight gradient follows from O's block structure as
c_n^T @ (block n of the O gradient). Both passes reuse the cached Cholesky
factors of Q and S; the backward costs two triangular solves.

The averaging branch (ParamSet.rest) and the torch bridge used by the
bi-level trainer live here as well; the solver itself is pure numpy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import (
    DimensionMismatch,
    NotSPD,
    SignatureMismatch,
    SingularQ,
    SingularSchur,
    StaleFactorization,
)
from .linalg import SpdFactor, as_matrix, check_finite, spd_factor

DTYPE = torch.float64

# Constraint residual allowed on a successful solve, relative to max(1, |O|_F).
CONSTRAINT_RTOL = 1e-8


@dataclass(frozen=True)
class MergeProblem:
    """One constrained merge instance over a single weight matrix.

    concept_rows:  stacked target-concept embeddings, (N*l, c)
    reg_rows:      stacked regularization embeddings, (N'*l, c)
    pretrained:    pre-trained weight the objective anchors to, (c, d)
    targets:       stacked desired outputs concat(c_n @ W_n), (N*l, d)
    n_concepts:    N; concept_rows and targets split into N equal row blocks
    """

    concept_rows: np.ndarray
    reg_rows: np.ndarray
    pretrained: np.ndarray
    targets: np.ndarray
    n_concepts: int = 1

    def __post_init__(self):
        object.__setattr__(self, "concept_rows", as_matrix(self.concept_rows, "concept_rows"))
        object.__setattr__(self, "reg_rows", as_matrix(self.reg_rows, "reg_rows"))
        object.__setattr__(self, "pretrained", as_matrix(self.pretrained, "pretrained"))
        object.__setattr__(self, "targets", as_matrix(self.targets, "targets"))
        c = self.pretrained.shape[0]
        if self.concept_rows.shape[1] != c or self.reg_rows.shape[1] != c:
            raise DimensionMismatch(
                f"embedding width mismatch: concepts {self.concept_rows.shape}, "
                f"reg {self.reg_rows.shape}, pretrained {self.pretrained.shape}"
            )
        if self.targets.shape != (self.concept_rows.shape[0], self.pretrained.shape[1]):
            raise DimensionMismatch(
                f"targets {self.targets.shape} incompatible with constraints "
                f"{self.concept_rows.shape} and weight {self.pretrained.shape}"
            )
        if self.n_concepts < 1 or self.concept_rows.shape[0] % self.n_concepts != 0:
            raise DimensionMismatch(
                f"{self.concept_rows.shape[0]} constraint rows do not split into "
                f"{self.n_concepts} equal blocks"
            )

    @property
    def tokens_per_concept(self) -> int:
        return self.concept_rows.shape[0] // self.n_concepts

    @classmethod
    def from_concepts(cls, embeddings, reg_rows, pretrained, adapted_weights) -> "MergeProblem":
        """Build C and O from per-concept embeddings and adapted weights."""
        if len(embeddings) != len(adapted_weights) or not embeddings:
            raise DimensionMismatch("need one adapted weight per concept embedding")
        embeddings = [as_matrix(e, "embedding") for e in embeddings]
        adapted = [as_matrix(w, "adapted weight") for w in adapted_weights]
        return cls(
            concept_rows=np.vstack(embeddings),
            reg_rows=reg_rows,
            pretrained=pretrained,
            targets=np.vstack([e @ w for e, w in zip(embeddings, adapted)]),
            n_concepts=len(embeddings),
        )


@dataclass(frozen=True)
class MergeSolution:
    """Solved merge with the factorizations the backward pass reuses."""

    merged: np.ndarray          # phi*, (c, d)
    multipliers: np.ndarray     # M, (N*l, d)
    gram_factor: SpdFactor      # Q = reg^T reg + lam I
    schur_factor: SpdFactor     # S = C Q^-1 C^T
    gram_inv_ct: np.ndarray     # Q^-1 C^T, (c, N*l)
    ridge: float
    problem: MergeProblem = field(repr=False)


def default_ridge(reg_rows) -> float:
    """lam = 1e-8 * trace(R^T R) / c; zero when the regularizer is empty."""
    r = as_matrix(reg_rows, "reg_rows")
    return 1e-8 * float(np.sum(r * r)) / r.shape[1]


def solve(problem: MergeProblem, ridge_lambda: float | None = None) -> MergeSolution:
    """Solve the constrained merge; factorizations are cached on the result.

    ridge_lambda=None applies the default trace-scaled ridge; pass 0.0 to
    require a genuinely positive-definite regularizer gram matrix.
    """
    lam = default_ridge(problem.reg_rows) if ridge_lambda is None else float(ridge_lambda)
    if lam < 0:
        raise ValueError(f"ridge_lambda must be nonnegative, got {lam}")
    c = problem.pretrained.shape[0]
    gram = problem.reg_rows.T @ problem.reg_rows + lam * np.eye(c)
    try:
        gram_factor = spd_factor(gram, "regularizer gram matrix")
    except NotSPD as exc:
        raise SingularQ(
            f"regularizer gram matrix not SPD with ridge {lam:.3e}: {exc}"
        ) from exc

    gram_inv_ct = gram_factor.solve(problem.concept_rows.T)      # Q^-1 C^T
    schur = problem.concept_rows @ gram_inv_ct                   # C Q^-1 C^T
    schur = 0.5 * (schur + schur.T)
    try:
        schur_factor = spd_factor(schur, "constraint Schur complement")
    except NotSPD as exc:
        raise SingularSchur(
            f"constraint rows rank deficient (Schur complement not SPD): {exc}"
        ) from exc

    residual = problem.targets - problem.concept_rows @ problem.pretrained
    multipliers = 2.0 * schur_factor.solve(residual)
    merged = problem.pretrained + 0.5 * gram_inv_ct @ multipliers
    check_finite(merged, "merged weight")

    gap = np.linalg.norm(problem.concept_rows @ merged - problem.targets)
    if gap > CONSTRAINT_RTOL * max(1.0, np.linalg.norm(problem.targets)):
        raise SingularSchur(
            f"constraint residual {gap:.3e} after solve; system too ill-conditioned"
        )
    return MergeSolution(
        merged=merged,
        multipliers=multipliers,
        gram_factor=gram_factor,
        schur_factor=schur_factor,
        gram_inv_ct=gram_inv_ct,
        ridge=lam,
        problem=problem,
    )


def backward(solution: MergeSolution, problem: MergeProblem, upstream):
    """Exact vector-Jacobian products of the merge solution.

    upstream is the loss gradient w.r.t. phi*, (c, d). Returns
    (grad_targets, per_concept_weight_grads): the gradient w.r.t. the stacked
    targets O, and w.r.t. each adapted weight W_n via O's block structure.
    """
    if solution.problem is not problem:
        raise StaleFactorization("solution was produced for a different problem")
    upstream = as_matrix(upstream, "upstream")
    if upstream.shape != solution.merged.shape:
        raise DimensionMismatch(
            f"upstream {upstream.shape} does not match merged weight {solution.merged.shape}"
        )
    grad_targets = solution.schur_factor.solve(solution.gram_inv_ct.T @ upstream)
    tokens = problem.tokens_per_concept
    grads_w = []
    for n in range(problem.n_concepts):
        block = grad_targets[n * tokens : (n + 1) * tokens]
        emb = problem.concept_rows[n * tokens : (n + 1) * tokens]
        grads_w.append(emb.T @ block)
    return grad_targets, grads_w


# ---------------------------------------------------------------------------
# Partitioned parameter sets and the full Merge operator.
# ---------------------------------------------------------------------------

@dataclass
class ParamSet:
    """Denoiser parameters split into cross-attention key/value projection
    matrices (merged through the constrained solve) and a flat vector of
    everything else (merged by simple averaging)."""

    kv_weights: list          # list of (c, d)-ish torch tensors
    rest: torch.Tensor        # 1-D torch tensor

    def signature(self) -> tuple:
        return (tuple(tuple(w.shape) for w in self.kv_weights), int(self.rest.numel()))

    def tensors(self) -> list:
        return list(self.kv_weights) + [self.rest]

    def clone(self) -> "ParamSet":
        return ParamSet([w.detach().clone() for w in self.kv_weights], self.rest.detach().clone())

    def leaves(self) -> "ParamSet":
        """Detached copies marked as autograd leaves."""
        return ParamSet(
            [w.detach().clone().requires_grad_(True) for w in self.kv_weights],
            self.rest.detach().clone().requires_grad_(True),
        )

    def flat(self) -> np.ndarray:
        parts = [w.detach().numpy().reshape(-1) for w in self.kv_weights]
        parts.append(self.rest.detach().numpy().reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)

    def with_flat(self, vec: np.ndarray) -> "ParamSet":
        vec = np.asarray(vec, dtype=np.float64)
        out_kv, off = [], 0
        for w in self.kv_weights:
            n = w.numel()
            out_kv.append(torch.from_numpy(vec[off : off + n].reshape(tuple(w.shape)).copy()))
            off += n
        rest = torch.from_numpy(vec[off : off + self.rest.numel()].copy())
        return ParamSet(out_kv, rest)

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self.tensors())


def check_signatures(sets, reference: ParamSet):
    sig = reference.signature()
    for i, ps in enumerate(sets):
        if ps.signature() != sig:
            raise SignatureMismatch(f"parameter set {i} has signature {ps.signature()}, expected {sig}")


class _ConstrainedMergeFn(torch.autograd.Function):
    """Torch bridge around a pre-computed solve; backward is the analytic VJP.

    The solution is computed outside from targets.detach(), so the only
    autograd edge is targets -> merged, which is exactly the derivative the
    layer defines (embeddings and the pre-trained weight are constants).
    """

    @staticmethod
    def forward(ctx, targets, solution, problem):
        ctx.solution = solution
        ctx.problem = problem
        return torch.from_numpy(solution.merged.copy())

    @staticmethod
    def backward(ctx, upstream):
        up = upstream.detach().numpy()
        if not np.all(np.isfinite(up)):
            # Propagate the poison like a native op; trainers detect and report.
            return torch.from_numpy(np.full(ctx.problem.targets.shape, np.nan)), None, None
        grad_targets, _ = backward(ctx.solution, ctx.problem, up)
        return torch.from_numpy(grad_targets), None, None


@dataclass
class MergeContext:
    """Backward context of merge_params: exact vector-Jacobian products
    without relying on a live autograd graph."""

    solutions: list                 # per kv-site MergeSolution
    problems: list                  # per kv-site MergeProblem
    n_concepts: int

    def vjp(self, upstream: ParamSet) -> list:
        """Per-concept ParamSet gradients of <upstream, merged>."""
        per_concept = [
            ParamSet(
                [torch.zeros_like(upstream.kv_weights[j]) for j in range(len(upstream.kv_weights))],
                upstream.rest.detach().clone() / self.n_concepts,
            )
            for _ in range(self.n_concepts)
        ]
        for j, (sol, prob) in enumerate(zip(self.solutions, self.problems)):
            _, grads_w = backward(sol, prob, upstream.kv_weights[j].detach().numpy())
            for n in range(self.n_concepts):
                per_concept[n].kv_weights[j] = torch.from_numpy(grads_w[n])
        return per_concept


def merge_params(
    adapted: list,
    concept_embeddings: list,
    reg_rows,
    pretrained: ParamSet,
    ridge_lambda: float | None = None,
    rest_mode: str = "mean",
):
    """Merge N adapted ParamSets into one.

    Key/value projections go through the constrained solve anchored at the
    pre-trained weights; all remaining parameters are averaged (their
    Jacobian w.r.t. each input is the scaled identity 1/N). The kv branch is
    differentiable through torch autograd, and the returned MergeContext
    provides the same vector-Jacobian products analytically.

    rest_mode="copy" freezes the rest branch at the first adapted set's rest
    (used by the compose baseline, where non-kv weights never change).
    """
    if not adapted:
        raise SignatureMismatch("need at least one adapted parameter set")
    if len(adapted) != len(concept_embeddings):
        raise DimensionMismatch("one concept embedding per adapted parameter set required")
    check_signatures(adapted, pretrained)
    n = len(adapted)

    emb_np = [as_matrix(e.detach().numpy() if torch.is_tensor(e) else e, "embedding") for e in concept_embeddings]
    emb_t = [torch.as_tensor(e, dtype=DTYPE) for e in emb_np]
    concept_rows = np.vstack(emb_np) if emb_np else np.zeros((0, 0))
    reg_rows = as_matrix(reg_rows, "reg_rows")

    merged_kv, solutions, problems = [], [], []
    for j, w_pre in enumerate(pretrained.kv_weights):
        # Solve from numpy-side targets (same BLAS as the solver, so the
        # adapted==pretrained case collapses to the pre-trained weight
        # bit-exactly); the torch-side cat only carries the autograd edge.
        targets_np = np.vstack(
            [emb_np[i] @ adapted[i].kv_weights[j].detach().numpy() for i in range(n)]
        )
        targets = torch.cat([emb_t[i] @ adapted[i].kv_weights[j] for i in range(n)], dim=0)
        prob = MergeProblem(concept_rows, reg_rows, w_pre.detach().numpy(), targets_np, n)
        sol = solve(prob, ridge_lambda)
        merged_kv.append(_ConstrainedMergeFn.apply(targets, sol, prob))
        solutions.append(sol)
        problems.append(prob)

    if rest_mode == "copy":
        rest = adapted[0].rest
    elif rest_mode == "mean":
        rest = sum(ps.rest for ps in adapted) / n
    else:
        raise ValueError(f"unknown rest_mode {rest_mode!r}")

    merged = ParamSet(merged_kv, rest)
    return merged, MergeContext(solutions=solutions, problems=problems, n_concepts=n)
