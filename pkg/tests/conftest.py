"""Shared fixtures: a small rendered phantom dataset on disk."""

import pytest

from hipgrade.drr import render_drr, save_drr
from hipgrade.labels import ManifestRow, write_manifest
from hipgrade.utils import child_seeds
from hipgrade.volume import generate_phantom, spec_for_class


def render_dataset(out_dir, per_class, noise_sd=20.0, seed=1234, classes=range(1, 8)):
    """Generate phantoms, render DRRs to PNG, return manifest rows."""
    images = out_dir / "images"
    images.mkdir(parents=True, exist_ok=True)
    classes = list(classes)
    seeds = child_seeds(seed, len(classes) * per_class)
    rows = []
    idx = 0
    for cls in classes:
        for _ in range(per_class):
            pid = f"p{idx:04d}"
            spec = spec_for_class(cls, seed=seeds[idx], noise_sd=noise_sd)
            volume, label, landmarks = generate_phantom(spec)
            image = render_drr(volume, landmarks.right_fhc, side="right",
                               patient_id=pid)
            png = images / f"{pid}.png"
            save_drr(image, png, label)
            rows.append(ManifestRow(patient_id=pid, side="right",
                                    image_path=str(png), crowe=label.crowe,
                                    kl=label.kl, combined_class=label.combined))
            idx += 1
    write_manifest(rows, out_dir / "manifest.csv")
    return rows


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """14 rendered phantom DRRs (2 per class) with a manifest."""
    out_dir = tmp_path_factory.mktemp("tiny_dataset")
    rows = render_dataset(out_dir, per_class=2)
    return {"dir": out_dir, "rows": rows, "manifest": out_dir / "manifest.csv"}
