"""
Penultimate-feature embedding
=============================

Projects the model's 256-dim penultimate features for a batch of DRRs
down to 2D.  With a trained model the grades form ordered clusters;
with the untrained model used here the picture is an honest blob, but
the plumbing is identical.
"""

from pathlib import Path

from hipgrade import (BackboneSpec, HeadSpec, build_model, embed_features,
                      extract_features, generate_phantom, render_drr,
                      spec_for_class)
from hipgrade.experiments import plot_embedding

out = Path(__file__).parent / "output"
out.mkdir(exist_ok=True)

# Four DRRs per grade.
images, classes = [], []
seed = 100
for grade in range(1, 8):
    for _ in range(4):
        seed += 1
        volume, label, landmarks = generate_phantom(
            spec_for_class(grade, seed=seed, noise_sd=15.0))
        images.append(render_drr(volume, landmarks.right_fhc).pixels)
        classes.append(label.combined)

model = build_model(BackboneSpec(name="small_cnn", pretrained=False,
                                 dropout_rate=0.1),
                    HeadSpec(task="classification", scheme="combined"))

features = extract_features(model, images)
print(f"feature matrix: {features.shape}")

# PCA keeps the demo fast and deterministic; "spectral" and "tsne" are
# drop-in alternatives.
coords = embed_features(model, images, method="pca", seed=0)
plot_embedding(coords, classes, out / "embedding.png")
print(f"wrote {out / 'embedding.png'}")
