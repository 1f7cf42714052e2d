"""Command-line experiment runner.

    immulab run <config.json>            execute the configured grid
    immulab check-gradients [--module]   finite-difference audits of the
                                         analytic gradient paths
    immulab summarize <results.csv>      gap-ratio tables from an emitted csv
    immulab gen-config --preset NAME     write a bundled preset config

Exit codes: 0 success, 1 configuration error, 2 partial grid failure,
3 internal error (including failed gradient checks).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from .diffusion import (
    ConceptSpec,
    Denoiser,
    DenoiserArch,
    GaussianMixture,
    NoiseSchedule,
    denoise,
    init_params,
    make_toy_dataset,
)
from .errors import ConfigError, ImmuLabError
from .experiment import (
    config_to_json,
    load_config,
    parse_results,
    preset_config,
    run_experiment,
    summarize_rows,
)
from .immunize import ImmunizeConfig, StepDraws, immunize_step, subset_mask
from .linalg import Rng, finite_diff_grad, rel_err
from .merge import MergeProblem, ParamSet, backward, merge_params, solve


def _check_merge(reports):
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(5):
        c, d, n = 6, 3, 2
        embeddings = [rng.standard_normal((2, c)) for _ in range(n)]
        weights = [rng.standard_normal((c, d)) for _ in range(n)]
        reg = rng.standard_normal((c + 4, c))
        w_pre = rng.standard_normal((c, d))
        upstream = rng.standard_normal((c, d))
        problem = MergeProblem.from_concepts(embeddings, reg, w_pre, weights)
        sol = solve(problem, 0.0)
        _, grads_w = backward(sol, problem, upstream)
        for idx in range(n):
            def scalar(w, idx=idx):
                ws = [w if i == idx else weights[i] for i in range(n)]
                p = MergeProblem.from_concepts(embeddings, reg, w_pre, ws)
                return float(np.sum(upstream * solve(p, 0.0).merged))

            fd = finite_diff_grad(scalar, weights[idx].copy(), h=1e-6)
            worst = max(worst, rel_err(grads_w[idx], fd))
    reports.append(("merge backward vs finite differences", worst, 1e-5))


def _check_diffusion(reports):
    worst = 0.0
    for seed in range(3):
        arch = DenoiserArch(data_dim=2, token_count=2, embed_dim=4, key_dim=4,
                            value_dim=4, hidden_dim=6, attention_sites=1, num_steps=10)
        rng = Rng(seed)
        params = init_params(arch, rng.child("p"))
        emb = torch.from_numpy(rng.child("e").normal((2, 4)))
        x = torch.from_numpy(rng.child("x").normal((3, 2)))
        leaves = params.leaves()
        val = torch.sum(denoise(arch, leaves, x, emb, 2) ** 2)
        grads = torch.autograd.grad(val, leaves.tensors())
        analytic = np.concatenate([g.numpy().reshape(-1) for g in grads])
        fd = finite_diff_grad(
            lambda v: float(torch.sum(denoise(arch, params.with_flat(v), x, emb, 2) ** 2)),
            params.flat(), h=1e-6)
        worst = max(worst, rel_err(analytic, fd))
    reports.append(("denoiser gradients vs finite differences", worst, 1e-5))


def _check_immunize(reports):
    from .diffusion import loss_at

    arch = DenoiserArch(data_dim=1, token_count=1, embed_dim=3, key_dim=2,
                        value_dim=1, hidden_dim=2, attention_sites=1, num_steps=5)
    sched = NoiseSchedule.linear(num_steps=5)
    rng = Rng(7)
    model = Denoiser(arch, init_params(arch, rng.child("init")))
    concepts = [
        ConceptSpec(i, torch.from_numpy(rng.child("emb", i).normal((1, 3))),
                    GaussianMixture.single([float(i)], 0.3))
        for i in range(2)
    ]
    data = make_toy_dataset(concepts, 8, rng.child("data"))
    reg = rng.child("reg").normal((5, 3))
    cfg = ImmunizeConfig(lower_lr=0.1, upper_lr=1.0, epochs=1, ridge_lambda=0.0,
                         lower_batch=4, upper_batch=4)
    x_l = [data[c.token_id][:4] for c in concepts]
    x_u = [data[c.token_id][4:8] for c in concepts]
    draws = StepDraws.sample(rng.child("draws"), sched,
                             [tuple(x.shape) for x in x_l], [tuple(x.shape) for x in x_u])

    theta_next, _ = immunize_step(model, model.params, concepts, x_l, x_u, reg, cfg, sched, draws)
    analytic = theta_next.flat() - model.params.flat()

    def objective(flat):
        params = model.params.with_flat(flat).leaves()
        live = Denoiser(arch, params)
        mask = subset_mask(params, cfg.lower_subset)
        adapted = []
        for i, c in enumerate(concepts):
            t, eps = draws.lower[i]
            inner = loss_at(live, x_l[i], c.embedding, sched, t, eps)
            g = torch.autograd.grad(inner, params.tensors(), allow_unused=True)
            g = [gi if gi is not None else torch.zeros_like(p) for gi, p in zip(g, params.tensors())]
            kv = [w - cfg.lower_lr * m * gi
                  for w, m, gi in zip(params.kv_weights, mask.kv_weights, g[:-1])]
            adapted.append(ParamSet(kv, params.rest - cfg.lower_lr * mask.rest * g[-1]))
        merged, _ = merge_params(adapted, [c.embedding for c in concepts], reg,
                                 model.params, ridge_lambda=0.0)
        mm = Denoiser(arch, merged)
        total = sum(
            loss_at(mm, x_u[i], concepts[i].embedding, sched, *draws.upper[i])
            for i in range(len(concepts))
        )
        return float(total.detach())

    fd = finite_diff_grad(objective, model.params.flat(), h=1e-5)
    reports.append(("bi-level upper gradient vs finite differences",
                    rel_err(analytic, fd), 1e-4))


def cmd_check_gradients(args) -> int:
    reports = []
    module = args.module
    if module in ("all", "merge"):
        _check_merge(reports)
    if module in ("all", "diffusion"):
        _check_diffusion(reports)
    if module in ("all", "immunize"):
        _check_immunize(reports)
    ok = True
    for name, err, tol in reports:
        passed = err <= tol
        ok &= passed
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: rel err {err:.3e} (tol {tol:.0e})")
    return 0 if ok else 3


def _print_summary(summary: dict) -> None:
    final = summary.get("final_step")
    print(f"gap ratios at step {final} (percent; mean over groups)")
    for method, per_attack in sorted(summary.get("methods", {}).items()):
        for attack, per_metric in sorted(per_attack.items()):
            for metric, entry in sorted(per_metric.items()):
                msgr = entry.get("msgr_mean")
                mrsgr = entry.get("mrsgr_mean")
                flag = " [negative denominator]" if any(
                    entry.get("negative_denominator", {}).values()) else ""
                parts = [f"{method:<10} {attack:<15} {metric:<22}"]
                parts.append(f"msgr {100 * msgr:7.2f}%" if msgr is not None else "msgr      n/a")
                parts.append(f"mrsgr {100 * mrsgr:7.2f}%" if mrsgr is not None else "mrsgr     n/a")
                print("  ".join(parts) + flag)


def cmd_run(args) -> int:
    config = load_config(args.config)
    outcome = run_experiment(config, output_root=args.output_root)
    print(f"wrote {outcome.output_dir / 'results.csv'} ({len(outcome.rows)} rows)")
    _print_summary(outcome.summary)
    failed = [c for c in outcome.manifest["cells"] if c["status"] == "failed"]
    for cell in failed:
        print(f"failed cell: {cell}")
    return 2 if failed else 0


def cmd_summarize(args) -> int:
    rows = parse_results(args.results)
    _print_summary(summarize_rows(rows))
    return 0


def cmd_gen_config(args) -> int:
    config = preset_config(args.preset)
    text = config_to_json(config)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="immulab", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment grid from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--output-root", default=None,
                       help="override the output root (also: IMMULAB_OUTPUT_ROOT)")
    p_run.set_defaults(func=cmd_run)

    p_check = sub.add_parser("check-gradients", help="finite-difference gradient audits")
    p_check.add_argument("--module", choices=["all", "merge", "diffusion", "immunize"],
                         default="all")
    p_check.set_defaults(func=cmd_check_gradients)

    p_sum = sub.add_parser("summarize", help="print gap-ratio tables from a results.csv")
    p_sum.add_argument("results")
    p_sum.set_defaults(func=cmd_summarize)

    p_gen = sub.add_parser("gen-config", help="write a bundled preset configuration")
    p_gen.add_argument("--preset", choices=["2concept", "3concept", "minimal"], required=True)
    p_gen.add_argument("--out", default=None)
    p_gen.set_defaults(func=cmd_gen_config)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ImmuLabError as exc:
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
