"""Desk-scale multi-concept model immunization.

A differentiable constrained model-merging layer, a bi-level unrolled-gradient
immunization trainer over a toy conditional diffusion model, the adaptation
attacks it must resist, gap-ratio evaluation metrics, and an experiment
runner that grids over methods x attacks x concept sets.

The submodules are the API surface: `linalg` (solvers, rng, the
finite-difference oracle), `merge` (the constrained merging layer),
`diffusion` (the toy model), `adapt` (attacks), `immunize` (the bi-level
trainer and baselines), `metrics` (similarities and gap ratios),
`experiment` (configs and the grid runner), `cli`.
"""

__version__ = "0.1.0"
