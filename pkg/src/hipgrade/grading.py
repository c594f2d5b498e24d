"""Grading models: backbones, task heads, losses and prediction rules.

A model is a feature backbone (registry: vit_b16, vgg16, densenet161,
small_cnn) followed by one hidden fully-connected layer and either a
classification head (7-way combined, or two 4-way heads for separated
Crowe/KL) or a regression head (one scalar, or two for separated).

Dropout is placed per architecture so Monte-Carlo sampling has stochastic
layers to activate: inside the transformer encoder for vit_b16, before
each pooling stage for vgg16, after each transition block for
densenet161, and after each conv block for small_cnn.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F
import torchvision

from .labels import GradeLabel, NUM_CLASSES, separated_to_combined

__all__ = [
    "BACKBONE_NAMES",
    "BackboneSpec",
    "HeadSpec",
    "ModelOutput",
    "GradingModel",
    "build_model",
    "default_head_spec",
    "focal_loss",
    "two_head_loss",
    "regression_loss",
    "compute_loss",
    "predict_class",
    "predict_classes",
    "predict_from_arrays",
    "save_checkpoint",
    "load_checkpoint",
]

BACKBONE_NAMES = ("vit_b16", "vgg16", "densenet161", "small_cnn")
NUM_GRADES = 4          # Crowe and KL each range over 1..4
HIDDEN_DIM = 256        # width of the added fully-connected layer
_VIT_INPUT = 224        # vit_b16 expects 224x224; inputs are resized internally


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    pretrained: bool = False
    dropout_rate: float = 0.0
    dropout_placement: str = "default"

    def __post_init__(self):
        if self.name not in BACKBONE_NAMES:
            raise ValueError(f"unknown backbone {self.name!r}; choose from {BACKBONE_NAMES}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass(frozen=True)
class HeadSpec:
    task: str = "classification"
    scheme: str = "combined"
    alpha: float = 1.0
    beta: float = 1.0
    focal_gamma: float = 2.0

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise ValueError(f"task must be classification/regression, got {self.task!r}")
        if self.scheme not in ("combined", "separated"):
            raise ValueError(f"scheme must be combined/separated, got {self.scheme!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")


def default_head_spec(task: str, scheme: str, backbone_name: str = "small_cnn") -> HeadSpec:
    """Head settings with the tuned loss weights for each task/backbone.

    Separated classification uses alpha=2, beta=1.  Separated regression
    uses a per-backbone alpha (7 for vit_b16/small_cnn, 35 for vgg16 and
    densenet161) with beta=1.  Combined settings keep alpha=beta=1
    (unused).
    """
    alpha, beta = 1.0, 1.0
    if scheme == "separated":
        if task == "classification":
            alpha, beta = 2.0, 1.0
        else:
            alpha = 7.0 if backbone_name in ("vit_b16", "small_cnn") else 35.0
            beta = 1.0
    return HeadSpec(task=task, scheme=scheme, alpha=alpha, beta=beta)


@dataclass
class ModelOutput:
    """Batched model outputs; exactly the fields for the head in use.

    combined_probs: (N, 7) softmax, combined classification.
    separated_probs: ((N, 4), (N, 4)) softmax, separated classification.
    regression_value: (N,) scalar outputs, or a pair of (N,) for separated.
    features: (N, hidden) penultimate activations.
    """

    features: torch.Tensor
    combined_probs: torch.Tensor | None = None
    separated_probs: tuple[torch.Tensor, torch.Tensor] | None = None
    regression_value: torch.Tensor | tuple[torch.Tensor, torch.Tensor] | None = None

    def __len__(self):
        return self.features.shape[0]


class _SmallCNN(nn.Module):
    """Compact 4-block CNN usable without pretrained weights."""

    def __init__(self, dropout_rate: float):
        super().__init__()
        blocks = []
        channels = [3, 16, 32, 64, 128]
        for c_in, c_out in zip(channels, channels[1:]):
            blocks += [
                nn.Conv2d(c_in, c_out, kernel_size=3, padding=1),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
                nn.Dropout2d(dropout_rate),
                nn.MaxPool2d(2),
            ]
        self.blocks = nn.Sequential(*blocks)
        self.out_dim = channels[-1]

    def forward(self, x):
        x = self.blocks(x)
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


class _ViTBackbone(nn.Module):
    def __init__(self, pretrained: bool, dropout_rate: float):
        super().__init__()
        weights = torchvision.models.ViT_B_16_Weights.IMAGENET1K_V1 if pretrained else None
        self.vit = torchvision.models.vit_b_16(weights=weights, dropout=dropout_rate)
        self.vit.heads = nn.Identity()
        self.out_dim = 768

    def forward(self, x):
        if x.shape[-1] != _VIT_INPUT:
            x = F.interpolate(x, size=(_VIT_INPUT, _VIT_INPUT), mode="bilinear",
                              align_corners=False)
        return self.vit(x)


class _VGGBackbone(nn.Module):
    def __init__(self, pretrained: bool, dropout_rate: float):
        super().__init__()
        weights = torchvision.models.VGG16_Weights.IMAGENET1K_V1 if pretrained else None
        base = torchvision.models.vgg16(weights=weights)
        layers = []
        for layer in base.features:
            # stochastic layer after the last ReLU of each stage
            if isinstance(layer, nn.MaxPool2d) and dropout_rate > 0:
                layers.append(nn.Dropout2d(dropout_rate))
            layers.append(layer)
        self.features = nn.Sequential(*layers)
        self.avgpool = base.avgpool
        self.out_dim = 512 * 7 * 7

    def forward(self, x):
        return torch.flatten(self.avgpool(self.features(x)), 1)


class _DenseNetBackbone(nn.Module):
    def __init__(self, pretrained: bool, dropout_rate: float):
        super().__init__()
        weights = torchvision.models.DenseNet161_Weights.IMAGENET1K_V1 if pretrained else None
        base = torchvision.models.densenet161(weights=weights)
        features = nn.Sequential()
        for name, module in base.features.named_children():
            features.add_module(name, module)
            if name.startswith("transition") and dropout_rate > 0:
                features.add_module(f"{name}_dropout", nn.Dropout2d(dropout_rate))
        self.features = features
        self.out_dim = 2208

    def forward(self, x):
        x = F.relu(self.features(x), inplace=True)
        return torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)


def _build_backbone(spec: BackboneSpec) -> nn.Module:
    if spec.name == "small_cnn":
        return _SmallCNN(spec.dropout_rate)
    if spec.name == "vit_b16":
        return _ViTBackbone(spec.pretrained, spec.dropout_rate)
    if spec.name == "vgg16":
        return _VGGBackbone(spec.pretrained, spec.dropout_rate)
    if spec.name == "densenet161":
        return _DenseNetBackbone(spec.pretrained, spec.dropout_rate)
    raise ValueError(f"unknown backbone {spec.name!r}")


class GradingModel(nn.Module):
    """Backbone + hidden layer + the head(s) selected by HeadSpec."""

    def __init__(self, backbone: BackboneSpec, head: HeadSpec, hidden_dim: int = HIDDEN_DIM):
        super().__init__()
        self.backbone_spec = backbone
        self.head_spec = head
        self.hidden_dim = hidden_dim
        self.backbone = _build_backbone(backbone)
        self.hidden = nn.Sequential(
            nn.Linear(self.backbone.out_dim, hidden_dim),
            nn.ReLU(inplace=True),
        )
        if head.scheme == "combined":
            out = NUM_CLASSES if head.task == "classification" else 1
            self.head = nn.Linear(hidden_dim, out)
        else:
            out = NUM_GRADES if head.task == "classification" else 1
            self.head_crowe = nn.Linear(hidden_dim, out)
            self.head_kl = nn.Linear(hidden_dim, out)

    def forward(self, x: torch.Tensor) -> ModelOutput:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.shape[1:] != (3, 150, 150):
            raise ValueError(f"expected (N, 3, 150, 150) input, got {tuple(x.shape)}")
        feats = self.hidden(self.backbone(x))
        head, out = self.head_spec, ModelOutput(features=feats)
        if head.scheme == "combined":
            raw = self.head(feats)
            if head.task == "classification":
                out.combined_probs = torch.softmax(raw, dim=1)
            else:
                out.regression_value = raw.squeeze(1)
        else:
            raw_c, raw_k = self.head_crowe(feats), self.head_kl(feats)
            if head.task == "classification":
                out.separated_probs = (torch.softmax(raw_c, dim=1),
                                       torch.softmax(raw_k, dim=1))
            else:
                out.regression_value = (raw_c.squeeze(1), raw_k.squeeze(1))
        return out


def build_model(backbone: BackboneSpec, head: HeadSpec,
                hidden_dim: int = HIDDEN_DIM) -> GradingModel:
    return GradingModel(backbone, head, hidden_dim)


def focal_loss(probs, target, gamma: float = 2.0, eps: float = 1e-12):
    """Focal loss -(1 - p_t)^gamma * log(p_t) on softmax probabilities.

    ``target`` indexes the probability vector (0-based).  A 1-D input
    gives the single-sample loss; a 2-D (N, C) batch returns the mean.
    gamma = 0 reduces to cross-entropy.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if torch.is_tensor(probs):
        if probs.dim() == 1:
            probs, target = probs.unsqueeze(0), torch.as_tensor([int(target)])
        else:
            target = torch.as_tensor(target, dtype=torch.long)
        if target.min() < 0 or target.max() >= probs.shape[1]:
            raise ValueError("target class index out of range")
        p_t = probs.gather(1, target.view(-1, 1)).squeeze(1).clamp_min(eps)
        return ((1.0 - p_t) ** gamma * (-torch.log(p_t))).mean()
    probs = np.asarray(probs, dtype=float)
    if probs.ndim == 1:
        probs, target = probs[None, :], np.asarray([int(target)])
    else:
        target = np.asarray(target, dtype=int)
    if target.min() < 0 or target.max() >= probs.shape[1]:
        raise ValueError("target class index out of range")
    p_t = np.maximum(probs[np.arange(len(target)), target], eps)
    return float(np.mean((1.0 - p_t) ** gamma * (-np.log(p_t))))


def two_head_loss(loss_crowe, loss_kl, alpha: float, beta: float):
    """Weighted sum alpha * crowe-head loss + beta * KL-head loss."""
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be >= 0")
    return alpha * loss_crowe + beta * loss_kl


def regression_loss(pred, target):
    """Mean absolute error between predicted values and ordinal targets."""
    if torch.is_tensor(pred):
        target = torch.as_tensor(target, dtype=pred.dtype, device=pred.device)
        return torch.abs(pred - target).mean()
    return float(np.mean(np.abs(np.asarray(pred, dtype=float) - np.asarray(target, dtype=float))))


def compute_loss(output: ModelOutput, labels: Sequence[GradeLabel], head: HeadSpec):
    """Training loss for a batch under the given task/scheme."""
    if head.task == "classification":
        if head.scheme == "combined":
            target = torch.as_tensor([lab.combined - 1 for lab in labels])
            return focal_loss(output.combined_probs, target, head.focal_gamma)
        crowe = torch.as_tensor([lab.crowe - 1 for lab in labels])
        kl = torch.as_tensor([lab.kl - 1 for lab in labels])
        probs_c, probs_k = output.separated_probs
        return two_head_loss(focal_loss(probs_c, crowe, head.focal_gamma),
                             focal_loss(probs_k, kl, head.focal_gamma),
                             head.alpha, head.beta)
    if head.scheme == "combined":
        return regression_loss(output.regression_value,
                               [float(lab.combined) for lab in labels])
    value_c, value_k = output.regression_value
    return two_head_loss(regression_loss(value_c, [float(lab.crowe) for lab in labels]),
                         regression_loss(value_k, [float(lab.kl) for lab in labels]),
                         head.alpha, head.beta)


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def _clamp(value: int, lo: int, hi: int) -> int:
    return max(lo, min(hi, value))


def predict_from_arrays(head: HeadSpec, combined_probs=None, separated_probs=None,
                        regression_value=None) -> GradeLabel:
    """Prediction rule on plain arrays (one sample, fields per the head)."""
    if head.task == "classification":
        if head.scheme == "combined":
            cls = int(np.argmax(combined_probs)) + 1
            return GradeLabel.from_combined(cls)
        crowe = int(np.argmax(separated_probs[0])) + 1
        kl = int(np.argmax(separated_probs[1])) + 1
        return GradeLabel.from_pair(crowe, kl)
    if head.scheme == "combined":
        cls = _clamp(_round_half_up(float(regression_value)), 1, NUM_CLASSES)
        return GradeLabel.from_combined(cls)
    crowe = _clamp(_round_half_up(float(regression_value[0])), 1, NUM_GRADES)
    kl = _clamp(_round_half_up(float(regression_value[1])), 1, NUM_GRADES)
    return GradeLabel.from_pair(crowe, kl)


def _to_numpy(value):
    if torch.is_tensor(value):
        return value.detach().cpu().numpy()
    return np.asarray(value)


def predict_classes(output: ModelOutput, head: HeadSpec) -> list[GradeLabel]:
    """Hard labels for every sample in a batched output.

    Classification takes the argmax per head (lowest index on ties);
    regression rounds half-up and clamps to the valid range.  Separated
    predictions may form an invalid Crowe/KL pair, in which case the
    returned label has combined = None.
    """
    n = len(output)
    results = []
    for i in range(n):
        if head.task == "classification" and head.scheme == "combined":
            results.append(predict_from_arrays(head, combined_probs=_to_numpy(output.combined_probs)[i]))
        elif head.task == "classification":
            pc, pk = output.separated_probs
            results.append(predict_from_arrays(head, separated_probs=(_to_numpy(pc)[i], _to_numpy(pk)[i])))
        elif head.scheme == "combined":
            results.append(predict_from_arrays(head, regression_value=_to_numpy(output.regression_value)[i]))
        else:
            vc, vk = output.regression_value
            results.append(predict_from_arrays(head, regression_value=(_to_numpy(vc)[i], _to_numpy(vk)[i])))
    return results


def predict_class(output: ModelOutput, head: HeadSpec) -> GradeLabel:
    """Hard label for a single-sample output (batch size must be 1)."""
    if len(output) != 1:
        raise ValueError(f"predict_class expects batch size 1, got {len(output)}; "
                         "use predict_classes")
    return predict_classes(output, head)[0]


def config_hash(config: dict) -> str:
    """Stable short hash of a JSON-serializable config mapping."""
    canon = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def save_checkpoint(model: GradingModel, path, config: dict | None = None) -> None:
    """Write a self-describing checkpoint (specs + weights + config hash)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config = dict(config or {})
    payload = {
        "backbone": asdict(model.backbone_spec),
        "head": asdict(model.head_spec),
        "hidden_dim": model.hidden_dim,
        "state_dict": model.state_dict(),
        "config": config,
        "config_hash": config_hash(config),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[GradingModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, stored config)."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    model = build_model(BackboneSpec(**payload["backbone"]),
                        HeadSpec(**payload["head"]),
                        hidden_dim=payload["hidden_dim"])
    model.load_state_dict(payload["state_dict"])
    return model, payload["config"]
