"""Follow one unlabelled batch through the semi-supervised pipeline.

Generates a small synthetic set, trains a partial-data model for a few
epochs so its guesses are not uniform, then shows what each stage does to the
targets: K-view averaging, sharpening, and mixup against the shuffled pool.

    python demos/ssl_walkthrough.py [workdir]
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from hydramix import data, ssl
from hydramix.model import ModelConfig, build, predict
from hydramix.training import Hyperparams, train

np.set_printoptions(precision=3, suppress=True)

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="hydramix_demo_"))
ds = data.load(data.generate(data.DatasetSpec(n_train=300, n_test=90, seed=0), root / "data"))
print("dataset:", data.summarize(ds))

split = data.make_split(ds, 90, seed=0)
model = build(ModelConfig(num_classes=ds.num_classes), seed=0)
_, records = train(model, ds, split, Hyperparams(epochs=10, mode="partial"))
print(f"partial model after 10 epochs: test accuracy {records[-1].test_accuracy:.3f}")

pool = data.unlabelled_pool(ds, split)
rng = np.random.default_rng(1)
images = pool.images[:4]

raw = predict(model, images)[0]
guess = ssl.pseudo_label(model, images, k=2, rng=rng)
sharp = ssl.sharpen(guess.probs, 0.5)
print("\nraw prediction on the original images\n", raw)
print("mean over K=2 augmented views\n", guess.probs)
print("sharpened at T=0.5\n", sharp)
print("centroid guesses (from the original image):", np.c_[guess.cx, guess.cy])

# the labelled half of the batch gets one augmentation and one-hot labels
lab = data.labelled_set(ds, split)
idx = np.arange(4)
ops = ssl.sample_ops(rng, 4)
lx, lcx, lcy = ssl.augment_batch(lab.images[idx], ops, lab.cx[idx], lab.cy[idx])
xb = ssl.Batch(lx, np.eye(ds.num_classes)[lab.class_ids[idx]], lcx, lcy)
ub = ssl.Batch(guess.views[0], sharp, *ssl.transform_centroids(guess.cx, guess.cy, guess.ops[0]))

mx, mu = ssl.mix_batches(xb, ub, rng)
print("\nmixing weights (always >= 0.5):", mx.gamma, mu.gamma)
print("mixed labelled targets\n", mx.labels)
print("mixed unlabelled targets\n", mu.labels)
print("centroid targets stay with the first argument:", np.array_equal(mu.cx, ub.cx))
