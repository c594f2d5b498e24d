"""Monte-Carlo dropout sampling and variance-based uncertainty.

A frozen model is run T times with its dropout layers active (everything
else stays in eval mode, so batch-norm statistics are fixed).  The
prediction is taken from the mean of the T outputs; the uncertainty is
the population variance of the samples, reduced to a scalar as the mean
of the per-class variances for classification, or the variance itself
for regression.  Separated models carry one sample set per head and the
scalar uncertainty averages the two heads.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .grading import GradingModel, HeadSpec, predict_from_arrays
from .labels import GradeLabel

__all__ = [
    "DEFAULT_MC_SAMPLES",
    "MCSampleSet",
    "mc_sample",
    "mc_sample_batch",
    "predictive_mean",
    "variance",
    "scalar_uncertainty",
    "mc_predict",
    "PredictionRecord",
    "make_prediction_record",
    "write_prediction_records",
    "load_prediction_records",
]

DEFAULT_MC_SAMPLES = 50


@dataclass
class MCSampleSet:
    """T stochastic outputs for one image.

    ``samples`` is (T, C) softmax rows or (T,) scalars; separated models
    store a pair of such arrays (Crowe head first).
    """

    samples: np.ndarray | tuple[np.ndarray, np.ndarray]
    t: int
    seed: int
    task: str
    scheme: str

    def __post_init__(self):
        if self.t < 1:
            raise ValueError("sample count must be >= 1")
        parts = self.samples if isinstance(self.samples, tuple) else (self.samples,)
        parts = tuple(np.asarray(p, dtype=float) for p in parts)
        for p in parts:
            if p.shape[0] != self.t:
                raise ValueError(f"expected {self.t} samples, got {p.shape[0]}")
            if self.task == "classification":
                if p.ndim != 2 or np.any(p < -1e-9) or \
                        np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
                    raise ValueError("classification samples must be probability vectors")
            elif p.ndim != 1:
                raise ValueError("regression samples must be scalars")
        self.samples = parts if len(parts) == 2 else parts[0]


@torch.no_grad()
def _stochastic_passes(model: GradingModel, batch: torch.Tensor, t: int, seed: int):
    """Run t dropout-active passes over a batch; restore module modes after."""
    modes = {m: m.training for m in model.modules()}
    model.eval()
    for m in model.modules():
        if isinstance(m, (nn.Dropout, nn.Dropout2d, nn.Dropout3d)):
            m.train()
    try:
        pass_seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(t)]
        outputs = []
        for s in pass_seeds:
            torch.manual_seed(s)
            outputs.append(model(batch))
    finally:
        for m, was_training in modes.items():
            m.train(was_training)
    return outputs


def _collect(outputs, head: HeadSpec, index: int):
    """Stack one batch position's outputs across the T passes."""
    if head.task == "classification" and head.scheme == "combined":
        return np.stack([o.combined_probs[index].numpy() for o in outputs])
    if head.task == "classification":
        return (np.stack([o.separated_probs[0][index].numpy() for o in outputs]),
                np.stack([o.separated_probs[1][index].numpy() for o in outputs]))
    if head.scheme == "combined":
        return np.array([float(o.regression_value[index]) for o in outputs])
    return (np.array([float(o.regression_value[0][index]) for o in outputs]),
            np.array([float(o.regression_value[1][index]) for o in outputs]))


def mc_sample(model: GradingModel, image, t: int = DEFAULT_MC_SAMPLES,
              seed: int = 0) -> MCSampleSet:
    """Draw T dropout samples for one image; deterministic given seed."""
    if t < 1:
        raise ValueError(f"sample count must be >= 1, got {t}")
    batch = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if batch.dim() == 3:
        batch = batch.unsqueeze(0)
    if batch.shape[0] != 1:
        raise ValueError("mc_sample takes a single image; use mc_sample_batch")
    outputs = _stochastic_passes(model, batch, t, seed)
    head = model.head_spec
    return MCSampleSet(samples=_collect(outputs, head, 0), t=t, seed=seed,
                       task=head.task, scheme=head.scheme)


def mc_sample_batch(model: GradingModel, images, t: int = DEFAULT_MC_SAMPLES,
                    seed: int = 0) -> list[MCSampleSet]:
    """Sample a whole batch per pass (one mask stream per pass, not per image).

    Faster than per-image calls; dropout masks are still independent
    across batch positions, but the substreams differ from mc_sample.
    """
    if t < 1:
        raise ValueError(f"sample count must be >= 1, got {t}")
    batch = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if batch.dim() == 3:
        batch = batch.unsqueeze(0)
    outputs = _stochastic_passes(model, batch, t, seed)
    head = model.head_spec
    return [MCSampleSet(samples=_collect(outputs, head, i), t=t, seed=seed,
                        task=head.task, scheme=head.scheme)
            for i in range(batch.shape[0])]


def _per_head(fn, samples):
    if isinstance(samples, tuple):
        return tuple(fn(p) for p in samples)
    return fn(samples)


def predictive_mean(sample_set: MCSampleSet):
    """Elementwise mean of the T samples (pair of means when separated)."""
    return _per_head(lambda p: p.mean(axis=0), sample_set.samples)


def variance(sample_set: MCSampleSet):
    """Population variance (1/T) * sum((sample - mean)^2), elementwise."""
    def pop_var(p):
        out = ((p - p.mean(axis=0)) ** 2).mean(axis=0)
        return out if out.ndim else float(out)
    return _per_head(pop_var, sample_set.samples)


def scalar_uncertainty(var) -> float:
    """Reduce a variance to one number per case.

    Classification vectors reduce to the mean of per-class variances;
    regression variance passes through; a separated pair reduces to the
    mean of its two heads' scalars.
    """
    if isinstance(var, tuple):
        if len(var) != 2:
            raise ValueError("expected a pair of per-head variances")
        return float(np.mean([scalar_uncertainty(v) for v in var]))
    arr = np.asarray(var, dtype=float)
    if arr.ndim == 0:
        return float(arr)
    if arr.ndim == 1:
        return float(arr.mean())
    raise ValueError(f"variance must be scalar or vector, got shape {arr.shape}")


def mc_predict(sample_set: MCSampleSet, head: HeadSpec) -> GradeLabel:
    """Hard label from the predictive mean (the reported T-sample decision)."""
    mean = predictive_mean(sample_set)
    if head.task == "classification" and head.scheme == "combined":
        return predict_from_arrays(head, combined_probs=mean)
    if head.task == "classification":
        return predict_from_arrays(head, separated_probs=mean)
    return predict_from_arrays(head, regression_value=mean)


@dataclass
class PredictionRecord:
    """One case's exported prediction with its uncertainty."""

    image_id: str
    setting: str
    predicted_class: int | None
    probs_or_value: object
    per_class_variance: object
    uncertainty: float


def _listify(value):
    if isinstance(value, tuple):
        return [_listify(v) for v in value]
    arr = np.asarray(value)
    return float(arr) if arr.ndim == 0 else [float(v) for v in arr]


def make_prediction_record(image_id: str, sample_set: MCSampleSet,
                           head: HeadSpec) -> PredictionRecord:
    var = variance(sample_set)
    label = mc_predict(sample_set, head)
    return PredictionRecord(
        image_id=image_id,
        setting=f"{head.task}/{head.scheme}",
        predicted_class=label.combined,
        probs_or_value=_listify(predictive_mean(sample_set)),
        per_class_variance=_listify(var),
        uncertainty=scalar_uncertainty(var),
    )


def write_prediction_records(records: Sequence[PredictionRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec)) + "\n")


def load_prediction_records(path) -> list[PredictionRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append(PredictionRecord(**json.loads(line)))
    return records
