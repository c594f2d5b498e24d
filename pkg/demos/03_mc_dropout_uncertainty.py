"""
Monte-Carlo dropout uncertainty
===============================

Keeps dropout active at inference and runs the same image through the
network T times.  The spread of the T softmax vectors is the model's
uncertainty; the mean is a smoothed prediction.

Uses an untrained network: the point here is the sampling machinery,
not the accuracy of the grades.
"""

import numpy as np

from hipgrade import (AugmentationParams, BackboneSpec, HeadSpec, augment,
                      build_model, generate_phantom, mc_predict, mc_sample,
                      predictive_mean, render_drr, scalar_uncertainty,
                      spec_for_class, variance)

# A dropout-bearing classifier.  dropout_rate=0 would make every pass
# identical and the variance exactly zero.
model = build_model(BackboneSpec(name="small_cnn", pretrained=False,
                                 dropout_rate=0.3),
                    HeadSpec(task="classification", scheme="combined"))

# One grade-4 phantom projected to a DRR and standardized for the model.
spec = spec_for_class(4, seed=7, noise_sd=15.0)
volume, label, landmarks = generate_phantom(spec)
drr = render_drr(volume, landmarks.right_fhc, side="right")
tensor = augment(drr.pixels, AugmentationParams(enabled=False),
                 np.random.default_rng(0))

# 50 stochastic passes, reproducible via the seed.
samples = mc_sample(model, tensor, t=50, seed=123)
mean = predictive_mean(samples)
var = variance(samples)

print(f"true grade:        {label.combined}")
print(f"mc prediction:     {mc_predict(samples, model.head_spec).combined}")
print(f"mean probabilities: {np.round(mean, 3)}")
print(f"per-class variance: {np.round(var, 5)}")
print(f"scalar uncertainty: {scalar_uncertainty(var):.6f}")

# Same seed, same samples; different seed, different samples.
again = mc_sample(model, tensor, t=50, seed=123)
other = mc_sample(model, tensor, t=50, seed=124)
print(f"seed reproducible: {np.array_equal(samples.samples, again.samples)}")
print(f"seeds differ:      {not np.array_equal(samples.samples, other.samples)}")
