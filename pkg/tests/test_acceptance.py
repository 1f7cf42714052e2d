"""Acceptance suite: one test per release criterion, each printing a
[PASS]/[FAIL] line (run with -s or -rA to see them).

The grid-based criteria share two session fixtures that execute the bundled
2-concept and 3-concept presets over five master seeds; expect roughly
10-20 minutes of wall clock for the whole module on a laptop-class CPU.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from immulab.diffusion import (
    ConceptSpec,
    Denoiser,
    DenoiserArch,
    GaussianMixture,
    NoiseSchedule,
    init_params,
    loss_at,
    make_toy_dataset,
)
from immulab.experiment import preset_config, run_experiment
from immulab.immunize import (
    FIRST_ORDER,
    FULL_UNROLLED,
    ImmunizeConfig,
    StepDraws,
    immunize_step,
    subset_mask,
)
from immulab.linalg import Rng, finite_diff_grad, rel_err
from immulab.merge import MergeProblem, ParamSet, backward, merge_params, solve
from immulab.metrics import msgr, mrsgr_from_sims


def report(name, passed, detail=""):
    print(f"[{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))
    assert passed, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# Criterion 1: merge correctness against the explicit KKT oracle.
# ---------------------------------------------------------------------------

def kkt_oracle(problem, lam):
    c = problem.pretrained.shape[0]
    m = problem.concept_rows.shape[0]
    q = problem.reg_rows.T @ problem.reg_rows + lam * np.eye(c)
    lhs = np.vstack([
        np.hstack([2.0 * q, -problem.concept_rows.T]),
        np.hstack([problem.concept_rows, np.zeros((m, m))]),
    ])
    rhs = np.vstack([2.0 * q @ problem.pretrained, problem.targets])
    return np.linalg.solve(lhs, rhs)[:c]


def random_merge_problem(rng):
    n = int(rng.integers(1, 4))
    l = int(rng.integers(1, 3))
    c = int(rng.integers(max(3, n * l + 1), 17))
    d = int(rng.integers(1, 9))
    embeddings = [rng.standard_normal((l, c)) for _ in range(n)]
    adapted = [rng.standard_normal((c, d)) for _ in range(n)]
    return MergeProblem.from_concepts(
        embeddings, rng.standard_normal((c + int(rng.integers(2, 8)), c)),
        rng.standard_normal((c, d)), adapted,
    )


def test_merge_correctness():
    tic = time.time()
    rng = np.random.default_rng(2024)
    worst_gap, worst_oracle = 0.0, 0.0
    for _ in range(100):
        problem = random_merge_problem(rng)
        sol = solve(problem, 0.0)
        gap = np.linalg.norm(problem.concept_rows @ sol.merged - problem.targets)
        worst_gap = max(worst_gap, gap / max(1.0, np.linalg.norm(problem.targets)))
        worst_oracle = max(worst_oracle, rel_err(sol.merged, kkt_oracle(problem, 0.0)))
    elapsed = time.time() - tic
    report(
        "merge correctness (100 instances)",
        worst_gap <= 1e-8 and worst_oracle <= 1e-7 and elapsed < 10,
        f"constraint {worst_gap:.2e}, oracle {worst_oracle:.2e}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# Criterion 2: merge backward exactness against finite differences.
# ---------------------------------------------------------------------------

def test_merge_backward_exactness():
    tic = time.time()
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(50):
        n = trial % 3 + 1
        l = 1 + trial % 2
        c = n * l + 2 + trial % 3
        d = 1 + trial % 3
        embeddings = [rng.standard_normal((l, c)) for _ in range(n)]
        weights = [rng.standard_normal((c, d)) for _ in range(n)]
        reg = rng.standard_normal((c + 4, c))
        w_pre = rng.standard_normal((c, d))
        upstream = rng.standard_normal((c, d))
        problem = MergeProblem.from_concepts(embeddings, reg, w_pre, weights)
        _, grads_w = backward(solve(problem, 0.0), problem, upstream)
        for idx in range(n):
            def scalar(w, idx=idx):
                ws = [w if i == idx else weights[i] for i in range(n)]
                p = MergeProblem.from_concepts(embeddings, reg, w_pre, ws)
                return float(np.sum(upstream * solve(p, 0.0).merged))

            fd = finite_diff_grad(scalar, weights[idx].copy(), h=1e-6)
            worst = max(worst, rel_err(grads_w[idx], fd))
    elapsed = time.time() - tic
    report("merge backward exactness (50 instances)", worst <= 1e-5 and elapsed < 30,
           f"rel err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# Criterion 3: denoiser gradient suite.
# ---------------------------------------------------------------------------

def test_denoiser_gradient_suite():
    tic = time.time()
    worst = 0.0
    for seed in range(5):
        arch = DenoiserArch(data_dim=2, token_count=2, embed_dim=4, key_dim=4,
                            value_dim=3, hidden_dim=6, attention_sites=1 + seed % 2,
                            num_steps=10)
        sched = NoiseSchedule.linear(num_steps=10)
        rng = Rng(seed)
        params = init_params(arch, rng.child("p"))
        emb = torch.from_numpy(rng.child("e").normal((2, 4)))
        x0 = torch.from_numpy(rng.child("x").normal((3, 2)))
        t = 1 + seed % 10
        eps = torch.from_numpy(rng.child("eps").normal((3, 2)))

        leaves = params.leaves()
        emb_leaf = emb.clone().requires_grad_(True)
        val = loss_at(Denoiser(arch, leaves), x0, emb_leaf, sched, t, eps)
        grads = torch.autograd.grad(val, leaves.tensors() + [emb_leaf])
        analytic = np.concatenate([g.numpy().reshape(-1) for g in grads[:-1]])
        fd = finite_diff_grad(
            lambda v: float(loss_at(Denoiser(arch, params.with_flat(v)), x0, emb, sched, t, eps)),
            params.flat(), h=1e-6)
        worst = max(worst, rel_err(analytic, fd))
        fd_emb = finite_diff_grad(
            lambda e: float(loss_at(Denoiser(arch, params), x0, torch.from_numpy(e), sched, t, eps)),
            emb.numpy().copy(), h=1e-6)
        worst = max(worst, rel_err(grads[-1].numpy(), fd_emb))
    elapsed = time.time() - tic
    report("denoiser gradient suite (5 configs, params + embeddings)",
           worst <= 1e-5 and elapsed < 30, f"rel err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# Criterion 4: full bi-level gradient check.
# ---------------------------------------------------------------------------

def _bilevel_setup():
    arch = DenoiserArch(data_dim=1, token_count=1, embed_dim=3, key_dim=2,
                        value_dim=1, hidden_dim=2, attention_sites=1, num_steps=5)
    sched = NoiseSchedule.linear(num_steps=5)
    rng = Rng(11)
    model = Denoiser(arch, init_params(arch, rng.child("init")))
    concepts = [
        ConceptSpec(i, torch.from_numpy(rng.child("emb", i).normal((1, 3))),
                    GaussianMixture.single([float(2 * i - 1)], 0.3))
        for i in range(2)
    ]
    data = make_toy_dataset(concepts, 16, rng.child("data"))
    reg = rng.child("reg").normal((5, 3))
    x_l = [data[c.token_id][:4] for c in concepts]
    x_u = [data[c.token_id][4:8] for c in concepts]
    return arch, sched, model, concepts, reg, x_l, x_u, rng


def _bilevel_objective(arch, flat, template, concepts, x_l, x_u, reg, cfg, sched, draws):
    params = template.with_flat(flat).leaves()
    live = Denoiser(arch, params)
    mask = subset_mask(params, cfg.lower_subset)
    adapted = []
    for i, c in enumerate(concepts):
        inner = loss_at(live, x_l[i], c.embedding, sched, *draws.lower[i])
        g = torch.autograd.grad(inner, params.tensors(), allow_unused=True)
        g = [gi if gi is not None else torch.zeros_like(p) for gi, p in zip(g, params.tensors())]
        kv = [w - cfg.lower_lr * m * gi
              for w, m, gi in zip(params.kv_weights, mask.kv_weights, g[:-1])]
        adapted.append(ParamSet(kv, params.rest - cfg.lower_lr * mask.rest * g[-1]))
    merged, _ = merge_params(adapted, [c.embedding for c in concepts], reg, template,
                             ridge_lambda=cfg.ridge_lambda)
    mm = Denoiser(arch, merged)
    total = sum(loss_at(mm, x_u[i], concepts[i].embedding, sched, *draws.upper[i])
                for i in range(len(concepts)))
    return float(total.detach())


def test_full_bilevel_gradient_check():
    tic = time.time()
    arch, sched, model, concepts, reg, x_l, x_u, rng = _bilevel_setup()
    n_params = model.params.flat().size
    cfg = ImmunizeConfig(lower_lr=0.1, upper_lr=1.0, epochs=1, ridge_lambda=0.0,
                         lower_batch=4, upper_batch=4, grad_mode=FULL_UNROLLED)
    draws = StepDraws.sample(rng.child("draws"), sched,
                             [tuple(x.shape) for x in x_l], [tuple(x.shape) for x in x_u])
    theta_next, _ = immunize_step(model, model.params, concepts, x_l, x_u, reg, cfg, sched, draws)
    analytic = theta_next.flat() - model.params.flat()
    fd = finite_diff_grad(
        lambda v: _bilevel_objective(arch, v, model.params, concepts, x_l, x_u, reg,
                                     cfg, sched, draws),
        model.params.flat(), h=1e-5)
    err = rel_err(analytic, fd)

    grads = {}
    for mode in (FULL_UNROLLED, FIRST_ORDER):
        cfg0 = replace(cfg, lower_lr=0.0, grad_mode=mode)
        nxt, _ = immunize_step(model, model.params, concepts, x_l, x_u, reg, cfg0, sched, draws)
        grads[mode] = nxt.flat() - model.params.flat()
    modes_equal = np.array_equal(grads[FULL_UNROLLED], grads[FIRST_ORDER])
    elapsed = time.time() - tic
    report(
        "full bi-level gradient check",
        n_params <= 30 and err <= 1e-4 and modes_equal and elapsed < 60,
        f"{n_params} params, rel err {err:.2e}, modes agree at alpha=0: {modes_equal}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# Criterion 5: metric algebra.
# ---------------------------------------------------------------------------

def test_metric_algebra():
    tic = time.time()
    ok = True
    details = []
    # Direct arithmetic of the ratio definitions.
    ok &= msgr([0.8], [0.8]) == 0.0
    ok &= abs(msgr([0.8], [0.6]) - 0.25) < 1e-15
    ok &= abs(msgr([0.8, 0.5], [0.6, 0.5]) - 0.125) < 1e-15
    ok &= abs(mrsgr_from_sims([0.45], [0.9]) - 0.5) < 1e-15
    ok &= mrsgr_from_sims([1.0, 1.0], [1.0, 1.0]) == 0.0
    # Bitwise scale invariance on exactly-scalable values.
    no, im = [0.75, 0.5, 0.625], [0.25, 0.375, 0.5]
    t_s, o_s = [0.5, 0.25], [0.75, 0.875]
    for lam in (0.5, 2.0, 10.0):
        inv_m = msgr([lam * v for v in no], [lam * v for v in im]) == msgr(no, im)
        inv_r = mrsgr_from_sims([lam * v for v in t_s], [lam * v for v in o_s]) == \
            mrsgr_from_sims(t_s, o_s)
        ok &= inv_m and inv_r
        details.append(f"lam={lam}: msgr {inv_m}, mrsgr {inv_r}")
    elapsed = time.time() - tic
    report("metric algebra (definitions + bitwise scale invariance)",
           bool(ok) and elapsed < 5, "; ".join(details))


# ---------------------------------------------------------------------------
# Criteria 6-9: grid-based, sharing two preset runs over five seeds.
# ---------------------------------------------------------------------------

N_SEEDS = 5


def _grid(preset_name, tmpdir):
    cfg = preset_config(preset_name)
    outcomes = []
    for seed in range(N_SEEDS):
        run_cfg = replace(cfg, seed=seed,
                          output_dir=str(tmpdir / f"{preset_name}-s{seed}"))
        outcomes.append(run_experiment(run_cfg))
    return outcomes


def _series(outcomes, method, field, metric="frozen_encoder_cosine", attack="full"):
    return np.array([
        o.summary["methods"][method][attack][metric][field] for o in outcomes
    ])


@pytest.fixture(scope="session")
def grid2(tmp_path_factory):
    return _grid("2concept", tmp_path_factory.mktemp("grid2"))


@pytest.fixture(scope="session")
def grid3(tmp_path_factory):
    return _grid("3concept", tmp_path_factory.mktemp("grid3"))


def test_immunization_effect(grid2):
    values = _series(grid2, "merged", "msgr_mean")
    positives = int(np.sum(values > 0))
    median = float(np.median(values))
    report("immunization effect (2-concept, FullFineTune)",
           positives >= 4 and median > 0.05,
           f"msgr per seed {[f'{v:+.3f}' for v in values]}, median {median:+.3f}, "
           f"positive {positives}/{N_SEEDS}")


def test_baseline_ordering(grid2, grid3):
    ok = True
    details = []
    for name, grid in (("2concept", grid2), ("3concept", grid3)):
        merged = _series(grid, "merged", "msgr_mean")
        joint = _series(grid, "joint", "msgr_mean")
        compose = _series(grid, "compose", "msgr_mean")
        vs_joint = int(np.sum(merged >= joint))
        vs_compose = int(np.sum(merged >= compose))
        ok &= vs_joint >= 3 and vs_compose >= 3
        details.append(f"{name}: >=joint {vs_joint}/{N_SEEDS}, >=compose {vs_compose}/{N_SEEDS}")
    report("baseline ordering (merged vs joint/compose)", bool(ok), "; ".join(details))


def test_usability_preservation(grid2):
    merged = _series(grid2, "merged", "mrsgr_mean")
    sequential = _series(grid2, "sequential", "mrsgr_mean")
    positives = int(np.sum(merged > 0))
    vs_seq = int(np.sum(merged > sequential))
    report("usability preservation (mrsgr)",
           positives >= 3 and vs_seq >= 3,
           f"mrsgr per seed {[f'{v:+.3f}' for v in merged]}, positive {positives}/{N_SEEDS}, "
           f"> sequential {vs_seq}/{N_SEEDS}")


def test_determinism_byte_identical(grid2, tmp_path):
    cfg = preset_config("2concept")
    rerun = run_experiment(replace(cfg, seed=0, output_dir=str(tmp_path / "rerun")))
    original = (grid2[0].output_dir / "results.csv").read_bytes()
    repeated = (rerun.output_dir / "results.csv").read_bytes()
    report("determinism (byte-identical results.csv)", original == repeated,
           f"{len(original)} bytes compared")
