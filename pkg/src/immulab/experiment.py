"""Experiment configuration, the method x attack x concept grid runner, and
results serialization.

A run proceeds per concept group: generate embeddings and Gaussian-mixture
concepts, pre-train a base model on the held-out "other" concepts, immunize
it with each configured method, then attack every arm per concept while
recording similarity trajectories against reference draws. Rows land in
results.csv (schema below), aggregate gap ratios in summary.json, and a
machine-readable manifest records every cell as done or failed.

CSV schema (exact header): run_id,method,attack,concept,step,metric,arm,value
  arm = "none"      similarity(reference, generations of the un-immunized model)
  arm = "immunized" similarity(reference, generations of the method's model)
  arm = "cross"     similarity between the two arms' generations (mrsgr input)
Values are written with nine decimal places; all outputs are byte-stable
under a fixed (config, seed).
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .adapt import KINDS as ATTACK_KINDS
from .adapt import AdaptMethod, AdaptSession, train_denoiser
from .diffusion import (
    ConceptSpec,
    Denoiser,
    DenoiserArch,
    GaussianMixture,
    NoiseSchedule,
    init_params,
    make_toy_dataset,
    sample,
    save_checkpoint,
)
from .errors import ConfigError, DegenerateDenominator, ResampleLimitExceeded
from .immunize import (
    ImmunizeConfig,
    run_compose,
    run_joint,
    run_merged,
    run_sequential,
)
from .linalg import Rng
from .metrics import (
    METRIC_KINDS,
    MetricReport,
    SimilarityMetric,
    mrsgr_from_sims,
    msgr_detail,
    similarity,
)

SCHEMA_VERSION = 1
RESULTS_HEADER = "run_id,method,attack,concept,step,metric,arm,value"
OUTPUT_ROOT_ENV = "IMMULAB_OUTPUT_ROOT"

METHODS = ("merged", "joint", "compose", "sequential")
_METHOD_RUNNERS = {
    "merged": run_merged,
    "joint": run_joint,
    "compose": run_compose,
    "sequential": run_sequential,
}

EMBEDDING_COSINE_BOUND = 0.5
RESAMPLE_LIMIT = 200


# ---------------------------------------------------------------------------
# Configuration: strict parsing with unknown-key rejection.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConceptsConfig:
    num_targets: int = 2
    num_others: int = 2
    mean_radius: float = 2.5
    component_std: float = 0.3
    immunize_samples: int = 64
    attack_samples: int = 64
    reference_samples: int = 128
    pretrain_samples: int = 128


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1200
    lr: float = 1e-2
    batch_size: int = 16


@dataclass(frozen=True)
class GroupSpec:
    name: str
    concept_seed: int


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output_dir: str
    arch: DenoiserArch
    schedule_steps: int
    beta_start: float
    beta_end: float
    concepts: ConceptsConfig
    reg_embeddings: int
    pretrain: PretrainConfig
    immunize: ImmunizeConfig
    methods: tuple
    attacks: tuple
    metrics: tuple
    encoder_seed: int
    mmd_bandwidth: float
    checkpoints: tuple
    eval_samples: int
    groups: tuple
    workers: int = 1

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.schedule_steps, self.beta_start, self.beta_end)


def _require(d: dict, allowed: dict, path: str) -> None:
    for key in d:
        if key not in allowed:
            raise ConfigError(f"unknown key {path + key!r}")
    for key, typ in allowed.items():
        if key not in d:
            raise ConfigError(f"missing key {path + key!r}")
        if typ is float:
            if not isinstance(d[key], (int, float)) or isinstance(d[key], bool):
                raise ConfigError(f"key {path + key!r} must be a number")
        elif typ is not None and not isinstance(d[key], typ):
            raise ConfigError(f"key {path + key!r} must be {getattr(typ, '__name__', typ)}")


_ARCH_KEYS = {"data_dim": int, "token_count": int, "embed_dim": int, "key_dim": int,
              "value_dim": int, "hidden_dim": int, "attention_sites": int, "num_steps": int}
_SCHEDULE_KEYS = {"num_steps": int, "beta_start": float, "beta_end": float}
_CONCEPTS_KEYS = {"num_targets": int, "num_others": int, "mean_radius": float,
                  "component_std": float, "immunize_samples": int, "attack_samples": int,
                  "reference_samples": int, "pretrain_samples": int}
_PRETRAIN_KEYS = {"steps": int, "lr": float, "batch_size": int}
_IMMUNIZE_KEYS = {"lower_lr": float, "upper_lr": float, "epochs": int, "lower_subset": str,
                  "upper_subset": str, "grad_mode": str, "ridge_lambda": None,
                  "lower_batch": int, "upper_batch": int, "sum_over_concepts": bool}
_ATTACK_KEYS = {"kind": str, "lr": float, "steps": int, "batch_size": int,
                "rank": int, "lowrank_mlp": bool}
_GROUP_KEYS = {"name": str, "concept_seed": int}
_TOP_KEYS = {"schema_version": int, "seed": int, "output_dir": str, "arch": dict,
             "schedule": dict, "concepts": dict, "reg_embeddings": int, "pretrain": dict,
             "immunize": dict, "methods": list, "attacks": list, "metrics": list,
             "encoder_seed": int, "mmd_bandwidth": float, "checkpoints": list,
             "eval_samples": int, "groups": list, "workers": int}


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    _require(raw, _TOP_KEYS, "")
    if raw["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"key 'schema_version' must equal {SCHEMA_VERSION}")
    _require(raw["arch"], _ARCH_KEYS, "arch.")
    _require(raw["schedule"], _SCHEDULE_KEYS, "schedule.")
    _require(raw["concepts"], _CONCEPTS_KEYS, "concepts.")
    _require(raw["pretrain"], _PRETRAIN_KEYS, "pretrain.")
    _require(raw["immunize"], _IMMUNIZE_KEYS, "immunize.")
    imm = dict(raw["immunize"])
    if imm["ridge_lambda"] is not None and not isinstance(imm["ridge_lambda"], (int, float)):
        raise ConfigError("key 'immunize.ridge_lambda' must be null or a number")

    for m in raw["methods"]:
        if m not in METHODS:
            raise ConfigError(f"key 'methods': unknown method {m!r}")
    if len(set(raw["methods"])) != len(raw["methods"]):
        raise ConfigError("key 'methods': duplicates not allowed")
    for k in raw["metrics"]:
        if k not in METRIC_KINDS:
            raise ConfigError(f"key 'metrics': unknown metric {k!r}")
    attacks = []
    seen_kinds = set()
    for i, a in enumerate(raw["attacks"]):
        _require(a, _ATTACK_KEYS, f"attacks[{i}].")
        if a["kind"] not in ATTACK_KINDS:
            raise ConfigError(f"key 'attacks[{i}].kind': unknown kind {a['kind']!r}")
        if a["kind"] in seen_kinds:
            raise ConfigError(f"key 'attacks[{i}].kind': duplicate attack kind")
        seen_kinds.add(a["kind"])
        attacks.append(AdaptMethod(**a))
    cks = raw["checkpoints"]
    if not cks or any(not isinstance(c, int) or c < 0 for c in cks) or any(
        b <= a for a, b in zip(cks, cks[1:])
    ):
        raise ConfigError("key 'checkpoints' must be nonnegative, strictly increasing ints")
    groups = []
    for i, g in enumerate(raw["groups"]):
        _require(g, _GROUP_KEYS, f"groups[{i}].")
        groups.append(GroupSpec(**g))
    if not groups:
        raise ConfigError("key 'groups' must be nonempty")
    if len({g.name for g in groups}) != len(groups):
        raise ConfigError("key 'groups': names must be unique")
    concepts = ConceptsConfig(**raw["concepts"])
    if concepts.num_targets < 1:
        raise ConfigError("key 'concepts.num_targets' must be >= 1")
    if raw["workers"] < 1:
        raise ConfigError("key 'workers' must be >= 1")

    try:
        immunize = ImmunizeConfig(**imm)
        arch = DenoiserArch(**raw["arch"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(
        seed=raw["seed"],
        output_dir=raw["output_dir"],
        arch=arch,
        schedule_steps=raw["schedule"]["num_steps"],
        beta_start=float(raw["schedule"]["beta_start"]),
        beta_end=float(raw["schedule"]["beta_end"]),
        concepts=concepts,
        reg_embeddings=raw["reg_embeddings"],
        pretrain=PretrainConfig(**raw["pretrain"]),
        immunize=immunize,
        methods=tuple(raw["methods"]),
        attacks=tuple(attacks),
        metrics=tuple(raw["metrics"]),
        encoder_seed=raw["encoder_seed"],
        mmd_bandwidth=float(raw["mmd_bandwidth"]),
        checkpoints=tuple(cks),
        eval_samples=raw["eval_samples"],
        groups=tuple(groups),
        workers=raw["workers"],
    )


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "output_dir": cfg.output_dir,
        "arch": cfg.arch.to_dict(),
        "schedule": {"num_steps": cfg.schedule_steps, "beta_start": cfg.beta_start,
                     "beta_end": cfg.beta_end},
        "concepts": {k: getattr(cfg.concepts, k) for k in _CONCEPTS_KEYS},
        "reg_embeddings": cfg.reg_embeddings,
        "pretrain": {k: getattr(cfg.pretrain, k) for k in _PRETRAIN_KEYS},
        "immunize": {k: getattr(cfg.immunize, k) for k in _IMMUNIZE_KEYS},
        "methods": list(cfg.methods),
        "attacks": [
            {k: getattr(a, k) for k in _ATTACK_KEYS} for a in cfg.attacks
        ],
        "metrics": list(cfg.metrics),
        "encoder_seed": cfg.encoder_seed,
        "mmd_bandwidth": cfg.mmd_bandwidth,
        "checkpoints": list(cfg.checkpoints),
        "eval_samples": cfg.eval_samples,
        "groups": [{"name": g.name, "concept_seed": g.concept_seed} for g in cfg.groups],
        "workers": cfg.workers,
    }


def config_to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(config_to_json(cfg).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Embeddings and concept construction.
# ---------------------------------------------------------------------------

def gen_embeddings(n: int, tokens: int, dim: int, seed: int, reg_rows: int = 0):
    """Seeded concept embeddings with pairwise flat cosine below 0.5.

    Each embedding is resampled until it clears the bound against all
    accepted ones (capped at RESAMPLE_LIMIT tries). The regularization stack
    is drawn independently, reg_rows * tokens rows in total.
    """
    if n < 1 or tokens < 1 or dim < 1:
        raise ValueError("n, tokens and dim must be >= 1")
    rng = Rng(seed).child("embeddings")
    accepted = []
    for i in range(n):
        for attempt in range(RESAMPLE_LIMIT):
            cand = rng.normal((tokens, dim))
            flat = cand.reshape(-1)
            ok = all(
                abs(flat @ other.reshape(-1))
                / (np.linalg.norm(flat) * np.linalg.norm(other.reshape(-1)))
                < EMBEDDING_COSINE_BOUND
                for other in accepted
            )
            if ok:
                accepted.append(cand)
                break
        else:
            raise ResampleLimitExceeded(
                f"no embedding {i} under cosine {EMBEDDING_COSINE_BOUND} after {RESAMPLE_LIMIT} tries"
            )
    reg = Rng(seed).child("reg_stack").normal((reg_rows * tokens, dim))
    return accepted, reg


def build_concepts(config: ExperimentConfig, group: GroupSpec):
    """Deterministic concepts for one group: targets first, others after."""
    cc = config.concepts
    n_total = cc.num_targets + cc.num_others
    grng = Rng(config.seed).child("group", group.concept_seed)
    embeddings, generic_reg = gen_embeddings(
        n_total, config.arch.token_count, config.arch.embed_dim,
        seed=grng.child("emb").derive_seed(), reg_rows=config.reg_embeddings,
    )
    offset = float(grng.child("angles").generator.uniform(0, 2 * np.pi))
    concepts = []
    for i in range(n_total):
        angle = offset + 2 * np.pi * i / n_total
        mean = cc.mean_radius * np.array([np.cos(angle), np.sin(angle)])
        mean = mean[: config.arch.data_dim]
        if config.arch.data_dim > 2:
            mean = np.concatenate([mean, np.zeros(config.arch.data_dim - 2)])
        concepts.append(
            ConceptSpec(i, torch.from_numpy(embeddings[i]),
                        GaussianMixture.single(mean, cc.component_std))
        )
    targets = concepts[: cc.num_targets]
    others = concepts[cc.num_targets:]
    # Regularization stack: held-out concept embeddings plus the generic rows.
    reg_parts = [c.embedding_np() for c in others] + ([generic_reg] if len(generic_reg) else [])
    reg_stack = np.vstack(reg_parts) if reg_parts else np.zeros((0, config.arch.embed_dim))
    return targets, others, reg_stack


def concept_label(concept_id: int, num_targets: int) -> str:
    if concept_id < num_targets:
        return f"c{concept_id}"
    return f"other{concept_id - num_targets}"


# ---------------------------------------------------------------------------
# Result rows and CSV serialization.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    run_id: str
    method: str
    attack: str
    concept: str
    step: int
    metric: str
    arm: str
    value: float

    def sort_key(self):
        return (self.run_id, self.method, self.attack, self.concept,
                self.step, self.metric, self.arm)


def format_value(v: float) -> str:
    return f"{v:.9f}"


def emit_results(rows, path) -> None:
    """Write rows as CSV: exact header, nine-decimal values, LF newlines."""
    if not rows:
        raise ValueError("refusing to emit an empty results file")
    lines = [RESULTS_HEADER]
    for r in rows:
        if not np.isfinite(r.value):
            raise ValueError(f"non-finite value in row {r}")
        lines.append(
            f"{r.run_id},{r.method},{r.attack},{r.concept},{r.step},{r.metric},{r.arm},"
            f"{format_value(r.value)}"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_results(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != RESULTS_HEADER:
        raise ValueError(f"results file does not start with header {RESULTS_HEADER!r}")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 8:
            raise ValueError(f"malformed row: {line!r}")
        rows.append(ResultRow(parts[0], parts[1], parts[2], parts[3],
                              int(parts[4]), parts[5], parts[6], float(parts[7])))
    return rows


# ---------------------------------------------------------------------------
# Grid execution.
# ---------------------------------------------------------------------------

@dataclass
class CellStatus:
    group: str
    stage: str
    method: str = ""
    attack: str = ""
    concept: str = ""
    status: str = "done"
    error: str = ""

    def to_dict(self):
        return {"group": self.group, "stage": self.stage, "method": self.method,
                "attack": self.attack, "concept": self.concept,
                "status": self.status, "error": self.error}


@dataclass
class ExperimentOutcome:
    rows: list
    summary: dict
    manifest: dict
    output_dir: Path

    @property
    def failed(self) -> bool:
        return any(c["status"] == "failed" for c in self.manifest["cells"])


def _arm_generations(model, attack, concept, data, schedule, checkpoints, rng, n):
    """Attack a model, pausing at checkpoints; returns one batch per checkpoint.

    rng labels depend only on checkpoint indices, so arms evaluated with the
    same rng (different initial weights) share identical draw sequences.
    """
    session = AdaptSession(model, attack, concept, data, schedule, rng.child("attack"))
    gens, done = [], 0
    for ck in checkpoints:
        session.run(ck - done)
        done = ck
        gens.append(
            sample(session.model(), session.generation_embedding(), schedule, n,
                   rng.child("gen", ck)).numpy()
        )
    return gens


def _evaluate_cell(config, group, attack, concept, label, arm_models, datasets, schedule):
    """All rows of one (attack, concept) cell across methods and metrics."""
    grng = Rng(config.seed).child("group", group.concept_seed)
    cell_rng = grng.child("cell", attack.kind, concept.token_id)
    data = datasets["attack"][concept.token_id]
    refs = datasets["references"][concept.token_id].numpy()
    gens = {
        name: _arm_generations(model, attack, concept, data, schedule,
                               config.checkpoints, cell_rng, config.eval_samples)
        for name, model in arm_models.items()
    }
    rows = []
    for kind in config.metrics:
        metric = SimilarityMetric(kind=kind, encoder_seed=config.encoder_seed,
                                  bandwidth=config.mmd_bandwidth)
        for ck_idx, step in enumerate(config.checkpoints):
            none_gen = gens["none"][ck_idx]
            rows.append(ResultRow(group.name, "none", attack.kind, label, step, kind,
                                  "none", similarity(metric, refs, none_gen)))
            for method in config.methods:
                gen = gens[method][ck_idx]
                rows.append(ResultRow(group.name, method, attack.kind, label, step, kind,
                                      "immunized", similarity(metric, refs, gen)))
                rows.append(ResultRow(group.name, method, attack.kind, label, step, kind,
                                      "cross", similarity(metric, gen, none_gen)))
    return rows


def run_group(config: ExperimentConfig, group: GroupSpec, checkpoint_dir: Path | None):
    """Execute one concept group; returns (rows, cell statuses)."""
    statuses, rows = [], []
    schedule = config.schedule()
    grng = Rng(config.seed).child("group", group.concept_seed)
    targets, others, reg_stack = build_concepts(config, group)
    cc = config.concepts

    immunize_data = make_toy_dataset(targets, cc.immunize_samples, grng.child("immu_data"))
    attack_data = make_toy_dataset(targets + others, cc.attack_samples, grng.child("attack_data"))
    references = make_toy_dataset(targets + others, cc.reference_samples, grng.child("refs"))
    pretrain_concepts = others if others else targets
    pretrain_data = make_toy_dataset(pretrain_concepts, cc.pretrain_samples, grng.child("pre_data"))
    datasets = {"attack": attack_data, "references": references}

    base = Denoiser(config.arch, init_params(config.arch, grng.child("init")))
    pretrained, _ = train_denoiser(
        base, [(pretrain_data[c.token_id], c.embedding) for c in pretrain_concepts],
        schedule, config.pretrain.steps, config.pretrain.lr, config.pretrain.batch_size,
        grng.child("pretrain"),
    )
    statuses.append(CellStatus(group=group.name, stage="pretrain"))
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir / f"{group.name}__pretrained.npz", pretrained)

    arm_models = {"none": pretrained}
    for method in config.methods:
        try:
            runner = _METHOD_RUNNERS[method]
            model, trace = runner(pretrained, targets, immunize_data, config.immunize,
                                  schedule, grng.child("immunize", method), reg_stack)
            arm_models[method] = model
            statuses.append(CellStatus(group=group.name, stage="immunize", method=method))
            if checkpoint_dir is not None:
                save_checkpoint(checkpoint_dir / f"{group.name}__{method}.npz", model)
                np.savez(checkpoint_dir / f"{group.name}__{method}_trace.npz",
                         upper_losses=trace.upper_losses,
                         lower_post_losses=trace.lower_post_losses,
                         grad_norms=trace.grad_norms)
        except Exception as exc:  # cell failure, grid continues
            statuses.append(CellStatus(group=group.name, stage="immunize", method=method,
                                       status="failed", error=f"{type(exc).__name__}: {exc}"))

    live_methods = [m for m in config.methods if m in arm_models]
    live_config = replace(config, methods=tuple(live_methods))
    cells = [(attack, concept) for attack in config.attacks for concept in targets + others]

    def eval_cell(cell):
        attack, concept = cell
        label = concept_label(concept.token_id, cc.num_targets)
        try:
            return _evaluate_cell(live_config, group, attack, concept, label,
                                  arm_models, datasets, schedule), \
                   CellStatus(group=group.name, stage="evaluate", attack=attack.kind, concept=label)
        except Exception as exc:
            return [], CellStatus(group=group.name, stage="evaluate", attack=attack.kind,
                                  concept=label, status="failed",
                                  error=f"{type(exc).__name__}: {exc}")

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(eval_cell, cells))
    else:
        outcomes = [eval_cell(c) for c in cells]
    for cell_rows, status in outcomes:
        rows.extend(cell_rows)
        statuses.append(status)
    # Record failed immunization methods as failed evaluation cells too.
    for method in config.methods:
        if method not in arm_models:
            for attack, concept in cells:
                label = concept_label(concept.token_id, cc.num_targets)
                statuses.append(CellStatus(group=group.name, stage="evaluate",
                                           method=method, attack=attack.kind, concept=label,
                                           status="failed", error="immunization failed"))
    return rows, statuses


def summarize_rows(rows):
    """Gap-ratio tables from result rows.

    msgr uses the final-checkpoint reference similarities of the none arm vs
    each method's immunized arm over target concepts; mrsgr uses the final
    cross-arm similarities of target vs other concepts.
    """
    groups = sorted({r.run_id for r in rows})
    methods = sorted({r.method for r in rows if r.method != "none"})
    attacks = sorted({r.attack for r in rows})
    metrics = sorted({r.metric for r in rows})
    final_step = max(r.step for r in rows)
    index = {}
    for r in rows:
        index[(r.run_id, r.method, r.attack, r.concept, r.step, r.metric, r.arm)] = r.value

    def concepts_of(run_id, prefix):
        names = sorted({r.concept for r in rows if r.run_id == run_id
                        and r.concept.startswith(prefix)})
        return [n for n in names if not (prefix == "c" and n.startswith("other"))]

    summary = {"final_step": final_step, "methods": {}}
    for method in methods:
        per_attack = {}
        for attack in attacks:
            per_metric = {}
            for metric in metrics:
                report = MetricReport(metric=metric)
                for gname in groups:
                    tnames = concepts_of(gname, "c")
                    onames = concepts_of(gname, "other")
                    try:
                        no = [index[(gname, "none", attack, c, final_step, metric, "none")]
                              for c in tnames]
                        im = [index[(gname, method, attack, c, final_step, metric, "immunized")]
                              for c in tnames]
                        value, _, negative = msgr_detail(no, im)
                        report.msgr_by_group[gname] = value
                        report.negative_denominator[gname] = any(negative)
                    except (KeyError, DegenerateDenominator):
                        pass
                    try:
                        t_cross = [index[(gname, method, attack, c, final_step, metric, "cross")]
                                   for c in tnames]
                        o_cross = [index[(gname, method, attack, c, final_step, metric, "cross")]
                                   for c in onames]
                        if o_cross:
                            report.mrsgr_by_group[gname] = mrsgr_from_sims(t_cross, o_cross)
                    except (KeyError, DegenerateDenominator):
                        pass
                per_metric[metric] = report.to_dict()
            per_attack[attack] = per_metric
        summary["methods"][method] = per_attack
    return summary


def resolve_output_dir(config: ExperimentConfig, output_root=None) -> Path:
    root = output_root or os.environ.get(OUTPUT_ROOT_ENV)
    out = Path(config.output_dir)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def run_experiment(config: ExperimentConfig, output_root=None) -> ExperimentOutcome:
    """Run the full grid and write results.csv, summary.json, manifest.json,
    a canonical copy of the config, and per-arm model checkpoints."""
    out = resolve_output_dir(config, output_root)
    ckdir = out / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config_to_json(config), encoding="utf-8")

    rows, statuses = [], []
    for group in config.groups:
        try:
            g_rows, g_statuses = run_group(config, group, ckdir)
            rows.extend(g_rows)
            statuses.extend(g_statuses)
        except Exception as exc:  # whole-group failure; other groups continue
            statuses.append(CellStatus(group=group.name, stage="group", status="failed",
                                       error=f"{type(exc).__name__}: {exc}"))

    rows.sort(key=ResultRow.sort_key)
    summary = summarize_rows(rows) if rows else {"methods": {}}
    manifest = {
        "config_hash": config_hash(config),
        "package_version": __version__,
        "schema_version": SCHEMA_VERSION,
        "seed": config.seed,
        "groups": [g.name for g in config.groups],
        "metrics": list(config.metrics),
        "attacks": [a.kind for a in config.attacks],
        "methods": list(config.methods),
        "checkpoints": list(config.checkpoints),
        "cells": sorted((s.to_dict() for s in statuses),
                        key=lambda c: (c["group"], c["stage"], c["method"],
                                       c["attack"], c["concept"])),
        "results": "results.csv",
        "summary": "summary.json",
    }
    if rows:
        emit_results(rows, out / "results.csv")
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return ExperimentOutcome(rows=rows, summary=summary, manifest=manifest, output_dir=out)


# ---------------------------------------------------------------------------
# Bundled presets.
# ---------------------------------------------------------------------------

def preset_config(name: str) -> ExperimentConfig:
    if name == "minimal":
        raw = _base_raw()
        raw.update(output_dir="runs/minimal", seed=0)
        raw["concepts"].update(num_targets=1, num_others=0, immunize_samples=32,
                               attack_samples=32, reference_samples=32, pretrain_samples=32)
        raw["pretrain"].update(steps=60, lr=1e-2, batch_size=8)
        raw["immunize"].update(epochs=2)
        raw["methods"] = ["merged"]
        raw["attacks"] = [_full_attack(steps=5)]
        raw["metrics"] = ["frozen_encoder_cosine"]
        raw["checkpoints"] = [5]
        raw["eval_samples"] = 16
        raw["groups"] = [{"name": "g1", "concept_seed": 1}]
    elif name in ("2concept", "3concept"):
        raw = _base_raw()
        raw.update(output_dir=f"runs/{name}", seed=0)
        raw["concepts"].update(num_targets=2 if name == "2concept" else 3)
        raw["groups"] = [{"name": f"g{i}", "concept_seed": i} for i in range(1, 6)]
    else:
        raise ConfigError(f"unknown preset {name!r}")
    return config_from_dict(raw)


def _full_attack(steps: int, lr: float = 1e-2, batch_size: int = 8) -> dict:
    return {"kind": "full", "lr": lr, "steps": steps, "batch_size": batch_size,
            "rank": 2, "lowrank_mlp": False}


def _base_raw() -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": 0,
        "output_dir": "runs/exp",
        "arch": DenoiserArch().to_dict(),
        "schedule": {"num_steps": 50, "beta_start": 1e-4, "beta_end": 0.2},
        "concepts": {"num_targets": 2, "num_others": 3, "mean_radius": 2.5,
                     "component_std": 0.3, "immunize_samples": 64, "attack_samples": 64,
                     "reference_samples": 128, "pretrain_samples": 128},
        "reg_embeddings": 8,
        "pretrain": {"steps": 1200, "lr": 1e-2, "batch_size": 16},
        "immunize": {"lower_lr": 5e-3, "upper_lr": 1e-3, "epochs": 100,
                     "lower_subset": "all", "upper_subset": "all",
                     "grad_mode": "full_unrolled", "ridge_lambda": None,
                     "lower_batch": 8, "upper_batch": 8, "sum_over_concepts": True},
        "methods": ["merged", "joint", "compose", "sequential"],
        "attacks": [_full_attack(steps=150, lr=3e-3)],
        "metrics": ["frozen_encoder_cosine", "neg_mse", "mmd_gaussian"],
        "encoder_seed": 1234,
        "mmd_bandwidth": 1.0,
        "checkpoints": [0, 15, 30, 60, 100, 150],
        "eval_samples": 64,
        "groups": [{"name": "g1", "concept_seed": 1}],
        "workers": 1,
    }
