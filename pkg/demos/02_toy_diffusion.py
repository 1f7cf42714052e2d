"""Train the toy conditional diffusion model on two 2-D Gaussian concepts and
sample from both conditions."""

import numpy as np
import torch

from immulab.adapt import train_denoiser
from immulab.diffusion import (
    ConceptSpec,
    Denoiser,
    DenoiserArch,
    GaussianMixture,
    NoiseSchedule,
    init_params,
    make_toy_dataset,
    sample,
)
from immulab.linalg import Rng

rng = Rng(0)
arch = DenoiserArch()
schedule = NoiseSchedule.linear()

concepts = [
    ConceptSpec(0, torch.from_numpy(rng.child("e0").normal((2, 8))),
                GaussianMixture.single([2.0, 0.0], 0.3)),
    ConceptSpec(1, torch.from_numpy(rng.child("e1").normal((2, 8))),
                GaussianMixture.single([-2.0, 0.0], 0.3)),
]
data = make_toy_dataset(concepts, 256, rng.child("data"))

model = Denoiser(arch, init_params(arch, rng.child("init")))
model, trajectory = train_denoiser(
    model, [(data[c.token_id], c.embedding) for c in concepts], schedule,
    steps=2000, lr=1e-2, batch_size=16, rng=rng.child("train"),
)
print(f"training loss: {trajectory[0]:.3f} -> {np.median(trajectory[-50:]):.3f}")

for concept in concepts:
    gen = sample(model, concept.embedding, schedule, 256, rng.child("gen", concept.token_id))
    mean = gen.mean(dim=0).numpy()
    target = concept.sampler.means[0]
    print(f"concept {concept.token_id}: sample mean {np.round(mean, 2)} "
          f"(target {np.round(target, 2)}, std {float(gen.std(dim=0).mean()):.2f})")
