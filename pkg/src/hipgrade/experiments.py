"""Experiment orchestration: patient-wise CV, training, ablations, embedding.

The protocol is 4-fold cross-validation split patient-wise (both hips of
a patient stay in one partition), repeated with fresh splits and fresh
training seeds; within each fold the held-out fold is the test set, one
rotating fold is validation and the rest train.  Training uses Adam with
cosine-annealed learning rate and keeps the epoch with the best
validation score (highest ECA for classification, lowest SE for
regression).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .drr import AugmentationParams, augment, load_drr
from .grading import (BackboneSpec, GradingModel, HeadSpec, build_model,
                      compute_loss, config_hash, default_head_spec,
                      load_checkpoint, predict_classes, save_checkpoint)
from .labels import GradeLabel, ManifestRow
from .metrics import EvalSet, eca, regression_se, summarize
from .uncertainty import (PredictionRecord, make_prediction_record,
                          mc_sample_batch, write_prediction_records)
from .utils import atomic_write_text, child_seeds

__all__ = [
    "ExperimentConfig",
    "published_config",
    "load_config",
    "save_config",
    "split_patientwise",
    "fold_partitions",
    "select_rows",
    "row_label",
    "ImageCache",
    "TrainResult",
    "train",
    "evaluate_model",
    "FoldResult",
    "RunReport",
    "run_cv",
    "evaluate_external",
    "ablate",
    "extract_features",
    "embed_features",
    "plot_embedding",
]

# Published per-backbone training settings (epochs, base LR, dropout rate).
_PUBLISHED = {
    ("vit_b16", "classification"): (200, 5e-5, 0.1),
    ("vit_b16", "regression"): (300, 5e-5, 0.1),
    ("vgg16", "classification"): (200, 5e-5, 0.3),
    ("vgg16", "regression"): (300, 8e-5, 0.1),
    ("densenet161", "classification"): (200, 5e-5, 0.2),
    ("densenet161", "regression"): (300, 8e-5, 0.2),
}


@dataclass
class ExperimentConfig:
    backbone: BackboneSpec
    head: HeadSpec
    epochs: int = 40
    base_lr: float = 1e-3
    scheduler: str = "cosine_annealing"
    batch_size: int = 32
    folds: int = 4
    repeats: int = 15
    mc_samples: int = 50
    seed: int = 0
    augmentation: AugmentationParams = field(default_factory=AugmentationParams)
    hidden_dim: int = 256

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.scheduler != "cosine_annealing":
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["backbone"] = BackboneSpec(**d["backbone"])
        d["head"] = HeadSpec(**d["head"])
        aug = {k: tuple(v) if isinstance(v, list) else v
               for k, v in dict(d["augmentation"]).items()}
        d["augmentation"] = AugmentationParams(**aug)
        return cls(**d)

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def published_config(backbone_name: str, task: str, scheme: str,
                     pretrained: bool = True, seed: int = 0) -> ExperimentConfig:
    """Config carrying the published training settings for one backbone/task.

    small_cnn has no published row; it borrows the ViT schedule with a
    dropout rate of 0.2.
    """
    key = (backbone_name if backbone_name != "small_cnn" else "vit_b16", task)
    if key not in _PUBLISHED:
        raise ValueError(f"no published settings for {backbone_name}/{task}")
    epochs, base_lr, dropout = _PUBLISHED[key]
    if backbone_name == "small_cnn":
        dropout, pretrained = 0.2, False
    backbone = BackboneSpec(name=backbone_name, pretrained=pretrained,
                            dropout_rate=dropout)
    head = default_head_spec(task, scheme, backbone_name)
    return ExperimentConfig(backbone=backbone, head=head, epochs=epochs,
                            base_lr=base_lr, seed=seed)


def save_config(config: ExperimentConfig, path) -> None:
    atomic_write_text(path, json.dumps(config.to_dict(), indent=2) + "\n")


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


def split_patientwise(rows: Sequence[ManifestRow], folds: int, seed: int) -> dict[str, int]:
    """Assign each patient to one fold; all of a patient's hips move together."""
    patients = sorted({r.patient_id for r in rows})
    if len(patients) < folds:
        raise ValueError(f"{len(patients)} patients cannot fill {folds} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(patients))
    return {patients[idx]: pos % folds for pos, idx in enumerate(order)}


def fold_partitions(assignment: dict[str, int], fold: int, folds: int,
                    val_rotation: int = 0) -> tuple[list[str], list[str], list[str]]:
    """Patient ids for (train, validation, test) with fold as the test fold.

    Validation is one of the non-test folds, chosen by val_rotation so
    repeated runs rotate which fold validates.
    """
    if not 0 <= fold < folds:
        raise ValueError(f"fold {fold} out of range for {folds} folds")
    others = [g for g in range(folds) if g != fold]
    val_fold = others[val_rotation % len(others)]
    train, val, test = [], [], []
    for pid in sorted(assignment):
        g = assignment[pid]
        if g == fold:
            test.append(pid)
        elif g == val_fold:
            val.append(pid)
        else:
            train.append(pid)
    return train, val, test


def select_rows(rows: Sequence[ManifestRow], patient_ids) -> list[ManifestRow]:
    wanted = set(patient_ids)
    return [r for r in rows if r.patient_id in wanted]


def row_label(row: ManifestRow) -> GradeLabel:
    return GradeLabel(row.crowe, row.kl, row.combined_class)


class ImageCache:
    """Lazy pixel cache keyed by manifest image path."""

    def __init__(self):
        self._pixels: dict[str, np.ndarray] = {}

    def get(self, row: ManifestRow) -> np.ndarray:
        if row.image_path not in self._pixels:
            image, _ = load_drr(row.image_path)
            self._pixels[row.image_path] = image.pixels
        return self._pixels[row.image_path]

    def preload(self, rows: Sequence[ManifestRow]) -> None:
        for row in rows:
            self.get(row)


def _eval_tensors(rows, cache: ImageCache, params: AugmentationParams) -> np.ndarray:
    quiet = replace(params, enabled=False)
    rng = np.random.default_rng(0)  # unused when disabled
    return np.stack([augment(cache.get(r), quiet, rng) for r in rows])


@dataclass
class TrainResult:
    model: GradingModel
    best_epoch: int
    best_val_metric: float
    history: dict


def _validation_score(model: GradingModel, rows, cache, config) -> float:
    eval_set = evaluate_model(model, rows, cache, config)
    if config.head.task == "classification":
        return eca(eval_set)
    return regression_se(eval_set)


def train(config: ExperimentConfig, train_rows: Sequence[ManifestRow],
          val_rows: Sequence[ManifestRow], seed: int | None = None,
          cache: ImageCache | None = None,
          progress: Callable[[str], None] | None = None) -> TrainResult:
    """Train one model; returns the best-validation-epoch weights.

    Classification keeps the epoch with the highest validation ECA,
    regression the lowest validation SE; ties keep the earlier epoch.
    Raises on non-finite loss.
    """
    if not train_rows or not val_rows:
        raise ValueError("training and validation sets must be non-empty")
    seed = config.seed if seed is None else seed
    torch_seed, aug_seed = child_seeds(seed, 2)
    torch.manual_seed(torch_seed)
    rng = np.random.default_rng(aug_seed)

    cache = cache or ImageCache()
    cache.preload(list(train_rows) + list(val_rows))
    model = build_model(config.backbone, config.head, config.hidden_dim)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.base_lr,
                                 weight_decay=0.0)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer,
                                                           T_max=config.epochs)
    labels = [row_label(r) for r in train_rows]
    maximize = config.head.task == "classification"
    best_metric = -np.inf if maximize else np.inf
    best_epoch, best_state = -1, None
    history = {"train_loss": [], "val_metric": [], "lr": []}

    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(len(train_rows))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = np.stack([augment(cache.get(train_rows[i]), config.augmentation, rng)
                              for i in idx])
            output = model(torch.from_numpy(batch))
            loss = compute_loss(output, [labels[i] for i in idx], config.head)
            if not torch.isfinite(loss):
                raise RuntimeError(f"training diverged: non-finite loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        scheduler.step()
        val_metric = _validation_score(model, val_rows, cache, config)
        history["train_loss"].append(float(np.mean(losses)))
        history["val_metric"].append(val_metric)
        history["lr"].append(float(optimizer.param_groups[0]["lr"]))
        improved = val_metric > best_metric if maximize else val_metric < best_metric
        if improved:
            best_metric, best_epoch = val_metric, epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if progress:
            progress(f"epoch {epoch + 1}/{config.epochs} "
                     f"loss={history['train_loss'][-1]:.4f} val={val_metric:.4f}")

    model.load_state_dict(best_state)
    return TrainResult(model=model, best_epoch=best_epoch,
                       best_val_metric=float(best_metric), history=history)


@torch.no_grad()
def evaluate_model(model: GradingModel, rows: Sequence[ManifestRow],
                   cache: ImageCache | None = None,
                   config: ExperimentConfig | None = None,
                   batch_size: int = 64) -> EvalSet:
    """Deterministic single-pass predictions for a set of manifest rows."""
    if not rows:
        raise ValueError("no rows to evaluate")
    cache = cache or ImageCache()
    params = config.augmentation if config else AugmentationParams()
    model.eval()
    preds: list[GradeLabel] = []
    for start in range(0, len(rows), batch_size):
        chunk = rows[start:start + batch_size]
        batch = torch.from_numpy(_eval_tensors(chunk, cache, params))
        preds.extend(predict_classes(model(batch), model.head_spec))
    return EvalSet(predictions=preds, truths=[row_label(r) for r in rows],
                   setting=model.head_spec.scheme)


@dataclass
class FoldResult:
    repeat: int
    fold: int
    metrics: dict
    best_epoch: int
    best_val_metric: float
    n_train: int
    n_val: int
    n_test: int


@dataclass
class RunReport:
    """Per-(repeat, fold) results plus the config that produced them."""

    entries: list[FoldResult]
    config: dict
    config_hash: str
    uncertainty: list[PredictionRecord] = field(default_factory=list)

    def __post_init__(self):
        keys = [(e.repeat, e.fold) for e in self.entries]
        if len(keys) != len(set(keys)):
            raise ValueError("duplicate (repeat, fold) entries in report")

    _SKIP = ("n", "setting", "absent_classes")

    def metric_names(self) -> list[str]:
        if not self.entries:
            return []
        return [k for k, v in self.entries[0].metrics.items()
                if k not in self._SKIP and isinstance(v, (int, float))]

    def aggregate(self) -> dict:
        """mean and SD of each metric over all (repeat, fold) entries."""
        out = {}
        for name in self.metric_names():
            values = np.array([e.metrics[name] for e in self.entries], dtype=float)
            out[name] = {"mean": float(values.mean()),
                         "sd": float(values.std(ddof=1)) if values.size > 1 else 0.0}
        return out

    def per_repeat_vector(self, metric: str) -> np.ndarray:
        """Fold-averaged metric per repeat, for the significance grids."""
        repeats = sorted({e.repeat for e in self.entries})
        return np.array([
            np.mean([e.metrics[metric] for e in self.entries if e.repeat == r])
            for r in repeats
        ])

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "aggregate": self.aggregate(),
            "entries": [asdict(e) for e in self.entries],
        }

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out_dir / "report.json",
                          json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        names = self.metric_names()
        lines = [",".join(["repeat", "fold", "best_epoch", "best_val_metric"] + names)]
        for e in sorted(self.entries, key=lambda e: (e.repeat, e.fold)):
            cells = [str(e.repeat), str(e.fold), str(e.best_epoch),
                     f"{e.best_val_metric:.6g}"]
            cells += [f"{e.metrics[name]:.6g}" for name in names]
            lines.append(",".join(cells))
        atomic_write_text(out_dir / "folds.csv", "\n".join(lines) + "\n")
        if self.uncertainty:
            write_prediction_records(self.uncertainty, out_dir / "uncertainty.jsonl")


def run_cv(config: ExperimentConfig, rows: Sequence[ManifestRow],
           out_dir=None, with_uncertainty: bool = False,
           save_checkpoints: bool = False,
           progress: Callable[[str], None] | None = None) -> RunReport:
    """The full folds x repeats protocol over one manifest.

    Each repeat re-splits the patients and re-seeds training; the
    validation fold rotates with the repeat index.  Reports one entry
    per (repeat, fold).
    """
    rows = list(rows)
    out_dir = Path(out_dir) if out_dir is not None else None
    cache = ImageCache()
    entries: list[FoldResult] = []
    records: list[PredictionRecord] = []
    repeat_seeds = np.random.SeedSequence(config.seed).spawn(config.repeats)
    for r in range(config.repeats):
        split_seed = int(repeat_seeds[r].generate_state(1)[0])
        fold_seeds = [int(s.generate_state(1)[0]) for s in repeat_seeds[r].spawn(config.folds)]
        assignment = split_patientwise(rows, config.folds, split_seed)
        for f in range(config.folds):
            train_p, val_p, test_p = fold_partitions(assignment, f, config.folds,
                                                     val_rotation=r)
            train_rows = select_rows(rows, train_p)
            val_rows = select_rows(rows, val_p)
            test_rows = select_rows(rows, test_p)
            if progress:
                progress(f"repeat {r} fold {f}: train={len(train_rows)} "
                         f"val={len(val_rows)} test={len(test_rows)}")
            result = train(config, train_rows, val_rows, seed=fold_seeds[f],
                           cache=cache, progress=None)
            eval_set = evaluate_model(result.model, test_rows, cache, config)
            entries.append(FoldResult(
                repeat=r, fold=f, metrics=summarize(eval_set),
                best_epoch=result.best_epoch,
                best_val_metric=result.best_val_metric,
                n_train=len(train_rows), n_val=len(val_rows),
                n_test=len(test_rows)))
            if with_uncertainty:
                tensors = _eval_tensors(test_rows, cache, config.augmentation)
                sets = mc_sample_batch(result.model, tensors, t=config.mc_samples,
                                       seed=fold_seeds[f])
                records += [make_prediction_record(row.image_path, s, config.head)
                            for row, s in zip(test_rows, sets)]
            if save_checkpoints and out_dir is not None:
                save_checkpoint(result.model,
                                out_dir / "checkpoints" / f"r{r}_f{f}.pt",
                                config.to_dict())
    report = RunReport(entries=entries, config=config.to_dict(),
                       config_hash=config.hash, uncertainty=records)
    if out_dir is not None:
        report.save(out_dir)
    return report


def evaluate_external(checkpoint_path, rows: Sequence[ManifestRow],
                      mc_samples: int | None = None, seed: int = 0,
                      out_dir=None, batch_size: int = 64) -> dict:
    """Single-pass plus MC evaluation of a saved model on a manifest.

    Reports accuracy and balanced accuracy under both the deterministic
    1-sample prediction and the mc_samples-averaged prediction.
    """
    from .metrics import balanced_accuracy, confusion
    from .uncertainty import mc_predict

    rows = list(rows)
    if not rows:
        raise ValueError("no rows to evaluate")
    model, stored = load_checkpoint(checkpoint_path)
    config = ExperimentConfig.from_dict(stored) if "backbone" in stored else None
    params = config.augmentation if config else AugmentationParams()
    if mc_samples is None:
        mc_samples = config.mc_samples if config else 50
    cache = ImageCache()
    single = evaluate_model(model, rows, cache, config, batch_size=batch_size)

    truths = [row_label(r) for r in rows]
    mc_preds: list[GradeLabel] = []
    records: list[PredictionRecord] = []
    batch_seeds = child_seeds(seed, (len(rows) + batch_size - 1) // batch_size)
    for bi, start in enumerate(range(0, len(rows), batch_size)):
        chunk = rows[start:start + batch_size]
        tensors = _eval_tensors(chunk, cache, params)
        sets = mc_sample_batch(model, tensors, t=mc_samples, seed=batch_seeds[bi])
        for row, s in zip(chunk, sets):
            mc_preds.append(mc_predict(s, model.head_spec))
            records.append(make_prediction_record(row.image_path, s, model.head_spec))
    mc_set = EvalSet(predictions=mc_preds, truths=truths,
                     setting=model.head_spec.scheme)

    report = {
        "n": len(rows),
        "checkpoint": str(checkpoint_path),
        "mc_samples": mc_samples,
        "single_sample": summarize(single),
        "mc": summarize(mc_set),
        "absent_classes": list(balanced_accuracy(single).absent_classes),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out_dir / "external_report.json",
                          json.dumps(report, indent=2, sort_keys=True) + "\n")
        confusion(single).to_csv(out_dir / "confusion_single.csv")
        confusion(mc_set).to_csv(out_dir / "confusion_mc.csv")
        write_prediction_records(records, out_dir / "uncertainty.jsonl")
    return report


_ABLATABLE = ("alpha", "dropout_rate")


def ablate(config: ExperimentConfig, parameter: str, values: Sequence,
           rows: Sequence[ManifestRow], out_dir=None,
           progress: Callable[[str], None] | None = None) -> list[dict]:
    """run_cv once per parameter value; returns one table row per value."""
    if parameter not in _ABLATABLE:
        raise ValueError(f"parameter must be one of {_ABLATABLE}, got {parameter!r}")
    if not values:
        raise ValueError("values must be non-empty")
    table = []
    for value in values:
        if parameter == "alpha":
            cfg = replace(config, head=replace(config.head, alpha=float(value)))
        else:
            cfg = replace(config, backbone=replace(config.backbone,
                                                   dropout_rate=float(value)))
        if progress:
            progress(f"{parameter}={value}")
        sub_dir = Path(out_dir) / f"{parameter}_{value}" if out_dir is not None else None
        report = run_cv(cfg, rows, out_dir=sub_dir, progress=progress)
        row = {parameter: float(value)}
        for name, stats in report.aggregate().items():
            row[f"{name}_mean"] = stats["mean"]
            row[f"{name}_sd"] = stats["sd"]
        table.append(row)
    if out_dir is not None:
        _save_ablation(table, parameter, Path(out_dir))
    return table


def _save_ablation(table: list[dict], parameter: str, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    fieldnames = list(table[0])
    lines = [",".join(fieldnames)]
    for row in table:
        lines.append(",".join(f"{row[k]:.6g}" for k in fieldnames))
    atomic_write_text(out_dir / f"ablation_{parameter}.csv", "\n".join(lines) + "\n")

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    metric = "eca" if "eca_mean" in table[0] else "se"
    xs = [row[parameter] for row in table]
    ys = [row[f"{metric}_mean"] for row in table]
    errs = [row[f"{metric}_sd"] for row in table]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.errorbar(xs, ys, yerr=errs, marker="o")
    ax.set_xlabel(parameter)
    ax.set_ylabel(metric)
    fig.tight_layout()
    fig.savefig(out_dir / f"ablation_{parameter}.png", dpi=120)
    plt.close(fig)


@torch.no_grad()
def extract_features(model: GradingModel, pixel_images: Sequence[np.ndarray],
                     params: AugmentationParams | None = None,
                     batch_size: int = 64) -> np.ndarray:
    """Penultimate feature vectors for a list of DRR pixel arrays."""
    params = replace(params or AugmentationParams(), enabled=False)
    rng = np.random.default_rng(0)
    model.eval()
    feats = []
    for start in range(0, len(pixel_images), batch_size):
        chunk = pixel_images[start:start + batch_size]
        batch = torch.from_numpy(np.stack([augment(px, params, rng) for px in chunk]))
        feats.append(model(batch).features.numpy())
    return np.concatenate(feats, axis=0)


def embed_features(model_or_checkpoint, pixel_images: Sequence[np.ndarray],
                   method: str | Callable = "spectral", seed: int = 0) -> np.ndarray:
    """Map penultimate features to 2D for visualization.

    ``method`` may be "spectral" (default), "tsne", "pca", or any
    callable features -> (N, 2).  Deterministic given the seed.
    """
    if len(pixel_images) < 3:
        raise ValueError("need at least 3 images to embed")
    if isinstance(model_or_checkpoint, (str, Path)):
        model, _ = load_checkpoint(model_or_checkpoint)
    else:
        model = model_or_checkpoint
    features = extract_features(model, pixel_images)
    if callable(method):
        coords = np.asarray(method(features), dtype=float)
    elif method == "spectral":
        from sklearn.manifold import SpectralEmbedding
        n_neighbors = min(15, len(pixel_images) - 1)
        coords = SpectralEmbedding(n_components=2, n_neighbors=n_neighbors,
                                   random_state=seed).fit_transform(features)
    elif method == "tsne":
        from sklearn.manifold import TSNE
        perplexity = min(30.0, max(2.0, (len(pixel_images) - 1) / 3.0))
        coords = TSNE(n_components=2, random_state=seed,
                      perplexity=perplexity, init="pca").fit_transform(features)
    elif method == "pca":
        from sklearn.decomposition import PCA
        coords = PCA(n_components=2, random_state=seed).fit_transform(features)
    else:
        raise ValueError(f"unknown embedding method {method!r}")
    if coords.shape != (len(pixel_images), 2):
        raise ValueError(f"embedding returned shape {coords.shape}")
    return coords


def plot_embedding(coords: np.ndarray, classes: Sequence[int], path,
                   uncertainties: Sequence[float] | None = None) -> None:
    """Scatter of the 2D embedding, colored by class, sized by uncertainty."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    coords = np.asarray(coords, dtype=float)
    classes = np.asarray(classes)
    sizes = 25.0
    if uncertainties is not None:
        u = np.asarray(uncertainties, dtype=float)
        span = u.max() - u.min()
        sizes = 15.0 + 85.0 * (u - u.min()) / span if span > 0 else 25.0
    fig, ax = plt.subplots(figsize=(6, 5))
    scatter = ax.scatter(coords[:, 0], coords[:, 1], c=classes, s=sizes,
                         cmap="viridis", alpha=0.8)
    fig.colorbar(scatter, ax=ax, label="class")
    ax.set_xlabel("dim 1")
    ax.set_ylabel("dim 2")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
