"""Synthetic cell patches, the on-disk manifest, and labelled/unlabelled splits.

Each class has a fixed rendering style: "tumour" is a large dark ellipse with
chromatin texture, "lymphocyte" a small high-contrast disc, "background" stain
noise only. The blob centre is the ground-truth centroid.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ArgumentError, ConfigError, DataIOError, ManifestError

MANIFEST_VERSION = 1
BACKGROUND_CENTROID = (0.5, 0.5)
STYLES = ("tumour", "lymphocyte", "background")

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["version", "classes", "records"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": MANIFEST_VERSION},
        "classes": {"type": "array", "minItems": 2, "items": {"type": "string", "minLength": 1}},
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "path", "class_id", "cx", "cy", "split"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "path": {"type": "string", "minLength": 1},
                    "class_id": {"type": "integer", "minimum": 0},
                    "cx": {"type": "number", "minimum": 0, "maximum": 1},
                    "cy": {"type": "number", "minimum": 0, "maximum": 1},
                    "split": {"enum": ["train", "test"]},
                },
            },
        },
    },
}


@dataclass
class DatasetSpec:
    n_train: int = 18000
    n_test: int = 6000
    classes: list = field(default_factory=lambda: list(STYLES))
    seed: int = 0
    patch_size: int = 41

    def validate(self):
        if self.n_train <= 0:
            raise ConfigError(f"n_train must be positive, got {self.n_train}", "n_train")
        if self.n_test <= 0:
            raise ConfigError(f"n_test must be positive, got {self.n_test}", "n_test")
        if len(self.classes) < 2:
            raise ConfigError(f"classes needs at least two names, got {self.classes!r}", "classes")
        if len(set(self.classes)) != len(self.classes) or not all(isinstance(c, str) and c for c in self.classes):
            raise ConfigError(f"classes must be distinct non-empty strings, got {self.classes!r}", "classes")
        if self.patch_size < 21:
            raise ConfigError(f"patch_size must be >= 21, got {self.patch_size}", "patch_size")
        return self


def _style(classes, class_id):
    name = classes[class_id]
    return name if name in STYLES else STYLES[class_id % len(STYLES)]


def _smooth_noise(rng, size, grid=6):
    coarse = rng.normal(size=(grid, grid))
    pos = np.linspace(0, grid - 1, size)
    rows = np.array([np.interp(pos, np.arange(grid), r) for r in coarse])
    return np.array([np.interp(pos, np.arange(grid), c) for c in rows.T]).T


def render_patch(style, rng, size=41):
    """Render one patch; returns (float image in [0, 1], cx, cy) in normalised coordinates."""
    stain = np.array([0.87, 0.80, 0.87]) + rng.normal(0, 0.03, 3)
    texture = 0.04 * _smooth_noise(rng, size)
    img = stain[None, None, :] + texture[:, :, None] + rng.normal(0, 0.03, (size, size, 3))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5

    if style == "background":
        cx, cy = BACKGROUND_CENTROID
    elif style == "tumour":
        a, b = rng.uniform(6.5, 9.0), rng.uniform(5.0, 7.0)
        x, y = rng.uniform(a + 2, size - a - 2, size=2)
        theta = rng.uniform(0, np.pi)
        u = (xx - x) * np.cos(theta) + (yy - y) * np.sin(theta)
        v = -(xx - x) * np.sin(theta) + (yy - y) * np.cos(theta)
        r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        alpha = np.clip((1.1 - r) / 0.25, 0, 1)
        nucleus = np.array([0.40, 0.28, 0.52]) * (1 + 0.12 * rng.normal(size=(size, size, 1)))
        img = img * (1 - alpha[:, :, None]) + nucleus * alpha[:, :, None]
        cx, cy = x / size, y / size
    elif style == "lymphocyte":
        radius = rng.uniform(3.0, 4.5)
        x, y = rng.uniform(radius + 2, size - radius - 2, size=2)
        r = np.hypot(xx - x, yy - y) / radius
        alpha = np.clip((1.05 - r) / 0.1, 0, 1)
        nucleus = np.array([0.14, 0.10, 0.33]) + rng.normal(0, 0.02, (size, size, 3))
        img = img * (1 - alpha[:, :, None]) + nucleus * alpha[:, :, None]
        cx, cy = x / size, y / size
    else:
        raise ArgumentError(f"unknown style {style!r}")
    return np.clip(img, 0.0, 1.0), float(cx), float(cy)


def _records_for_split(spec, split, count, offset):
    # Round-robin class assignment keeps the classes balanced to within one record.
    c = len(spec.classes)
    return [(f"{split}_{i:06d}", i % c, split, offset + i) for i in range(count)]


def generate(spec, out_dir):
    """Render ``spec`` into ``out_dir/images/*.png`` plus ``out_dir/manifest.json``."""
    spec.validate()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create dataset directory {out}: {exc.strerror}") from exc
    records = []
    todo = _records_for_split(spec, "train", spec.n_train, 0) + _records_for_split(spec, "test", spec.n_test, spec.n_train)
    for rid, class_id, split, stream in todo:
        rng = np.random.default_rng([spec.seed, stream])
        img, cx, cy = render_patch(_style(spec.classes, class_id), rng, spec.patch_size)
        rel = f"images/{rid}.png"
        try:
            Image.fromarray(np.round(img * 255).astype(np.uint8), "RGB").save(out / rel, format="PNG")
        except OSError as exc:
            raise DataIOError(f"cannot write {out / rel}: {exc.strerror}") from exc
        records.append({"id": rid, "path": rel, "class_id": class_id, "cx": cx, "cy": cy, "split": split})
    manifest = {"version": MANIFEST_VERSION, "classes": list(spec.classes), "records": records}
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return out


@dataclass
class Dataset:
    classes: list
    ids: np.ndarray
    paths: list
    images: np.ndarray  # (N, S, S, 3) float32 in [0, 1]
    class_ids: np.ndarray
    cx: np.ndarray
    cy: np.ndarray
    split: np.ndarray
    root: Path | None = None

    def __len__(self):
        return len(self.ids)

    @property
    def num_classes(self):
        return len(self.classes)

    @property
    def background_index(self):
        return self.classes.index("background") if "background" in self.classes else None

    def indices(self, split):
        return np.flatnonzero(self.split == split)

    @property
    def n_train(self):
        return int(np.sum(self.split == "train"))

    def test_set(self):
        idx = self.indices("test")
        return LabelledSet(self.ids[idx], self.images[idx], self.class_ids[idx], self.cx[idx], self.cy[idx])


@dataclass(frozen=True)
class LabelledSet:
    ids: np.ndarray
    images: np.ndarray
    class_ids: np.ndarray
    cx: np.ndarray
    cy: np.ndarray

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class UnlabelledPool:
    """Training images with every annotation stripped; only ids and pixels."""

    ids: np.ndarray
    images: np.ndarray

    def __len__(self):
        return len(self.ids)


def _field_path(error):
    path = ""
    for part in error.absolute_path:
        path += f"[{part}]" if isinstance(part, int) else (f".{part}" if path else part)
    return path or "<root>"


def read_manifest(root):
    path = Path(root) / "manifest.json"
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path} is not valid JSON: {exc}", "<root>") from exc
    error = jsonschema.exceptions.best_match(jsonschema.Draft202012Validator(MANIFEST_SCHEMA).iter_errors(manifest))
    if error is not None:
        where = _field_path(error)
        raise ManifestError(f"manifest field {where}: {error.message}", where)
    n_classes = len(manifest["classes"])
    seen = set()
    for i, rec in enumerate(manifest["records"]):
        if rec["class_id"] >= n_classes:
            raise ManifestError(f"manifest field records[{i}].class_id: {rec['class_id']} >= {n_classes} classes", f"records[{i}].class_id")
        if rec["id"] in seen:
            raise ManifestError(f"manifest field records[{i}].id: duplicate id {rec['id']!r}", f"records[{i}].id")
        seen.add(rec["id"])
    return manifest


def _read_png(path):
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "RGB":
                raise DataIOError(f"{path}: expected an RGB image, got mode {im.mode}")
            return np.asarray(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        if isinstance(exc, DataIOError):
            raise
        raise DataIOError(f"cannot decode image {path}: {exc}") from exc


def load(root):
    """Load a dataset directory; images are scaled to [0, 1] float32."""
    root = Path(root)
    if not root.is_dir():
        raise DataIOError(f"dataset directory {root} does not exist")
    manifest = read_manifest(root)
    recs = manifest["records"]
    images = [_read_png(root / r["path"]) for r in recs]
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DataIOError(f"images in {root} have mixed shapes {sorted(shapes)}")
    if shapes and (next(iter(shapes))[0] != next(iter(shapes))[1]):
        raise DataIOError(f"patches in {root} must be square, got {next(iter(shapes))}")
    stack = np.stack(images).astype(np.float32) / 255.0 if images else np.zeros((0, 41, 41, 3), np.float32)
    return Dataset(
        classes=list(manifest["classes"]),
        ids=np.array([r["id"] for r in recs]),
        paths=[r["path"] for r in recs],
        images=stack,
        class_ids=np.array([r["class_id"] for r in recs], dtype=np.int64),
        cx=np.array([r["cx"] for r in recs], dtype=np.float64),
        cy=np.array([r["cy"] for r in recs], dtype=np.float64),
        split=np.array([r["split"] for r in recs]),
        root=root,
    )


def checksum(root):
    """sha256 over the manifest and every image, in manifest order."""
    root = Path(root)
    h = hashlib.sha256((root / "manifest.json").read_bytes())
    for rec in read_manifest(root)["records"]:
        h.update((root / rec["path"]).read_bytes())
    return h.hexdigest()


def summarize(dataset):
    """Record counts keyed by split then class name."""
    out = {}
    for split in ("train", "test"):
        idx = dataset.indices(split)
        out[split] = {name: int(np.sum(dataset.class_ids[idx] == c)) for c, name in enumerate(dataset.classes)}
    return out


@dataclass(frozen=True)
class SplitPlan:
    labelled_budget: int
    labelled_ids: tuple
    unlabelled_ids: tuple


def make_split(dataset, budget, seed):
    """Class-stratified labelled subset of the training records; the rest is the unlabelled pool.

    Per-class quotas are ``budget // C`` with the remainder going to the
    lowest class indices, so quotas do not depend on the seed.
    """
    train = dataset.indices("train")
    c = dataset.num_classes
    if budget > len(train):
        raise ArgumentError(f"budget {budget} exceeds the {len(train)} training records")
    if budget < c:
        raise ArgumentError(f"budget {budget} is smaller than the {c} classes; cannot stratify")
    rng = np.random.default_rng(seed)
    quotas = [budget // c + (1 if k < budget % c else 0) for k in range(c)]
    chosen = []
    for k, quota in enumerate(quotas):
        members = train[dataset.class_ids[train] == k]
        if quota > len(members):
            raise ArgumentError(f"class {dataset.classes[k]!r} has {len(members)} training records, quota is {quota}")
        chosen.append(rng.choice(members, size=quota, replace=False))
    labelled = np.sort(np.concatenate(chosen))
    unlabelled = np.setdiff1d(train, labelled)
    return SplitPlan(budget, tuple(dataset.ids[labelled].tolist()), tuple(dataset.ids[unlabelled].tolist()))


def _positions(dataset, ids):
    lookup = {rid: i for i, rid in enumerate(dataset.ids)}
    return np.array([lookup[r] for r in ids], dtype=np.int64)


def labelled_set(dataset, plan):
    idx = _positions(dataset, plan.labelled_ids)
    return LabelledSet(dataset.ids[idx], dataset.images[idx], dataset.class_ids[idx], dataset.cx[idx], dataset.cy[idx])


def unlabelled_pool(dataset, plan):
    idx = _positions(dataset, plan.unlabelled_ids)
    return UnlabelledPool(dataset.ids[idx], dataset.images[idx])
