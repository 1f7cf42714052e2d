import numpy as np
import pytest
import torch

from immulab.adapt import (
    EMBEDDING_ONLY,
    FULL,
    KINDS,
    KV_ONLY,
    LOWRANK,
    AdaptMethod,
    AdaptSession,
    adapt,
    effective_params,
)
from immulab.diffusion import (
    ConceptSpec,
    Denoiser,
    DenoiserArch,
    GaussianMixture,
    NoiseSchedule,
    denoise,
    init_params,
    make_toy_dataset,
)
from immulab.errors import NonFiniteLoss
from immulab.linalg import Rng, finite_diff_grad, rel_err
from immulab.merge import ParamSet


def setup(seed=0, sites=1):
    arch = DenoiserArch(data_dim=2, token_count=2, embed_dim=6, key_dim=4,
                        value_dim=4, hidden_dim=8, attention_sites=sites, num_steps=20)
    sched = NoiseSchedule.linear(num_steps=20)
    rng = Rng(seed)
    model = Denoiser(arch, init_params(arch, rng.child("init")))
    concept = ConceptSpec(0, torch.from_numpy(rng.child("emb").normal((2, 6))),
                          GaussianMixture.single([2.0, 1.0], 0.3))
    data = make_toy_dataset([concept], 64, rng.child("data"))[0]
    return arch, sched, model, concept, data, rng


def test_method_validation():
    with pytest.raises(ValueError):
        AdaptMethod(kind=FULL, lr=1e-2, steps=0, batch_size=4)
    with pytest.raises(ValueError):
        AdaptMethod(kind="nope", lr=1e-2, steps=1, batch_size=4)
    with pytest.raises(ValueError):
        AdaptMethod(kind=LOWRANK, lr=1e-2, steps=1, batch_size=4, rank=0)


def test_zero_learning_rate_is_identity():
    arch, sched, model, concept, data, rng = setup()
    method = AdaptMethod(kind=FULL, lr=0.0, steps=1, batch_size=4)
    result = adapt(model, method, concept, data, sched, rng.child("adapt"))
    for a, b in zip(result.adapted_params.kv_weights, model.params.kv_weights):
        assert torch.equal(a, b)
    assert torch.equal(result.adapted_params.rest, model.params.rest)


def test_embedding_only_dead_path():
    arch, sched, model, concept, data, rng = setup()
    dead = Denoiser(arch, ParamSet([torch.zeros_like(w) for w in model.params.kv_weights],
                                   model.params.rest.clone()))
    method = AdaptMethod(kind=EMBEDDING_ONLY, lr=1e-2, steps=10, batch_size=4)
    session = AdaptSession(dead, method, concept, data, sched, rng.child("adapt"))
    initial = session.embedding.detach().clone()
    session.run(method.steps)
    assert torch.equal(session.embedding.detach(), initial)


def test_subset_discipline():
    arch, sched, model, concept, data, rng = setup()
    base_kv = [w.clone() for w in model.params.kv_weights]
    base_rest = model.params.rest.clone()
    for kind in KINDS:
        method = AdaptMethod(kind=kind, lr=1e-3, steps=5, batch_size=4, rank=2)
        result = adapt(model, method, concept, data, sched, rng.child("adapt", kind))
        if kind == KV_ONLY or kind == LOWRANK:
            assert torch.equal(result.adapted_params.rest, base_rest)
        if kind == EMBEDDING_ONLY:
            assert torch.equal(result.adapted_params.rest, base_rest)
            for a, b in zip(result.adapted_params.kv_weights, base_kv):
                assert torch.equal(a, b)
            assert result.learned_embedding is not None
        # Inputs are never mutated.
        for a, b in zip(model.params.kv_weights, base_kv):
            assert torch.equal(a, b)
        assert torch.equal(model.params.rest, base_rest)


def test_full_finetune_halves_loss():
    arch, sched, model, concept, data, rng = setup(seed=1)
    method = AdaptMethod(kind=FULL, lr=1e-2, steps=500, batch_size=8)
    result = adapt(model, method, concept, data, sched, rng.child("adapt"))
    initial = np.median(result.loss_trajectory[:10])
    final = np.median(result.loss_trajectory[-10:])
    assert final < 0.5 * initial


def test_all_methods_make_progress():
    finals, initials = {}, {}
    for kind in KINDS:
        f, i = [], []
        for seed in range(5):
            arch, sched, model, concept, data, rng = setup(seed=seed + 10)
            method = AdaptMethod(kind=kind, lr=5e-3, steps=150, batch_size=8, rank=2)
            result = adapt(model, method, concept, data, sched, rng.child("adapt"))
            f.append(result.final_loss)
            i.append(result.loss_trajectory[0])
        finals[kind], initials[kind] = np.median(f), np.median(i)
        assert finals[kind] < initials[kind], kind


def test_determinism():
    arch, sched, model, concept, data, rng = setup(seed=2)
    method = AdaptMethod(kind=FULL, lr=1e-2, steps=20, batch_size=4)
    r1 = adapt(model, method, concept, data, sched, Rng(99).child("a"))
    r2 = adapt(model, method, concept, data, sched, Rng(99).child("a"))
    assert r1.loss_trajectory == r2.loss_trajectory
    for a, b in zip(r1.adapted_params.tensors(), r2.adapted_params.tensors()):
        assert torch.equal(a, b)


def test_session_segments_equal_one_shot():
    arch, sched, model, concept, data, rng = setup(seed=3)
    method = AdaptMethod(kind=FULL, lr=1e-2, steps=30, batch_size=4)
    one = AdaptSession(model, method, concept, data, sched, Rng(7)).run(30).result()
    seg = AdaptSession(model, method, concept, data, sched, Rng(7))
    for chunk in (10, 10, 10):
        seg.run(chunk)
    two = seg.result()
    assert one.loss_trajectory == two.loss_trajectory
    for a, b in zip(one.adapted_params.tensors(), two.adapted_params.tensors()):
        assert torch.equal(a, b)


def test_divergence_raises_nonfinite_loss():
    arch, sched, model, concept, data, rng = setup(seed=4)
    method = AdaptMethod(kind=FULL, lr=1e8, steps=200, batch_size=4)
    with pytest.raises(NonFiniteLoss) as err:
        adapt(model, method, concept, data, sched, rng.child("adapt"))
    assert len(err.value.trajectory) >= 1


def test_effective_params_zero_factors():
    arch, sched, model, concept, data, rng = setup()
    factors = [(torch.zeros(w.shape[0], 2, dtype=torch.float64),
                torch.zeros(2, w.shape[1], dtype=torch.float64))
               for w in model.params.kv_weights]
    eff = effective_params(model.params, factors)
    for a, b in zip(eff.kv_weights, model.params.kv_weights):
        assert torch.equal(a, b)
    assert torch.equal(eff.rest, model.params.rest)


def test_effective_params_full_rank_equals_direct_delta():
    arch, sched, model, concept, data, rng = setup()
    factors, deltas = [], []
    for w in model.params.kv_weights:
        c = w.shape[0]
        delta = torch.from_numpy(rng.child("delta").normal(tuple(w.shape)))
        factors.append((torch.eye(c, dtype=torch.float64), delta))
        deltas.append(delta)
    eff = effective_params(model.params, factors)
    for a, w, d in zip(eff.kv_weights, model.params.kv_weights, deltas):
        assert torch.allclose(a, w + d, atol=1e-15)


def test_lowrank_factor_gradients_match_finite_differences():
    arch, sched, model, concept, data, rng = setup(seed=5)
    x = torch.from_numpy(rng.child("x").normal((3, arch.data_dim)))
    w = model.params.kv_weights[0]
    r = 2
    a0 = rng.child("a").normal((w.shape[0], r))
    b0 = rng.child("b").normal((r, w.shape[1]))

    def forward_sq(a_t, b_t):
        factors = [(a_t, b_t)] + [
            (torch.zeros(v.shape[0], r, dtype=torch.float64),
             torch.zeros(r, v.shape[1], dtype=torch.float64))
            for v in model.params.kv_weights[1:]
        ]
        eff = effective_params(model.params, factors)
        out = denoise(arch, eff, x, concept.embedding, 3)
        return torch.sum(out * out)

    a_leaf = torch.from_numpy(a0.copy()).requires_grad_(True)
    b_leaf = torch.from_numpy(b0.copy()).requires_grad_(True)
    ga, gb = torch.autograd.grad(forward_sq(a_leaf, b_leaf), [a_leaf, b_leaf])
    fd_a = finite_diff_grad(lambda m: float(forward_sq(torch.from_numpy(m), torch.from_numpy(b0))), a0, 1e-6)
    fd_b = finite_diff_grad(lambda m: float(forward_sq(torch.from_numpy(a0), torch.from_numpy(m))), b0, 1e-6)
    assert rel_err(ga.numpy(), fd_a) <= 1e-5
    assert rel_err(gb.numpy(), fd_b) <= 1e-5


def test_lowrank_initial_model_equals_base():
    arch, sched, model, concept, data, rng = setup(seed=6)
    method = AdaptMethod(kind=LOWRANK, lr=1e-3, steps=1, batch_size=4, rank=2)
    session = AdaptSession(model, method, concept, data, sched, rng.child("adapt"))
    eff = session._effective()
    for a, b in zip(eff.kv_weights, model.params.kv_weights):
        assert torch.allclose(a, b, atol=1e-15)
