"""Procedural street-scene toy data, its oracle segmenter, and scoring.

Scenes are layered band layouts — sky strip, building block, road strip —
with vegetation blobs grown over the building band and car boxes placed on
the road, each filled to an exact pixel budget so class frequencies track the
domain spec tightly. Every class renders as its palette color plus Gaussian
noise, which keeps nearest-prototype segmentation near-perfect and lets the
same palette act as ground-truth recovery oracle for refined images.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, ContractError, GenerationError, IngestionError
from .tensorcore import Tensor, no_grad

CLASS_NAMES = ("sky", "building", "road", "vegetation", "car")
N_CLASSES = len(CLASS_NAMES)
SKY, BUILDING, ROAD, VEGETATION, CAR = range(N_CLASSES)
_MIN_PALETTE_DIST = 0.25


@dataclass
class DomainSpec:
    """Class mix, palette, and texture noise of one toy domain."""

    name: str
    frequencies: np.ndarray
    palette: np.ndarray
    noise: float = 0.08

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=np.float64)
        self.palette = np.asarray(self.palette, dtype=np.float64)
        if self.frequencies.shape != (N_CLASSES,):
            raise ConfigError("frequencies", f"need {N_CLASSES} entries, got {self.frequencies.shape}")
        if np.any(self.frequencies <= 0):
            raise ConfigError("frequencies", "every class frequency must be positive")
        if abs(float(self.frequencies.sum()) - 1.0) > 1e-6:
            raise ConfigError("frequencies", f"must sum to 1, got {self.frequencies.sum():.8f}")
        if self.palette.shape != (N_CLASSES, 3):
            raise ConfigError("palette", f"need ({N_CLASSES}, 3) colors, got {self.palette.shape}")
        if np.any(np.abs(self.palette) >= 1.0):
            raise ConfigError("palette", "colors must lie strictly inside (-1, 1)")
        d = np.linalg.norm(self.palette[:, None] - self.palette[None, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        if d.min() < _MIN_PALETTE_DIST:
            i, j = np.unravel_index(int(np.argmin(d)), d.shape)
            raise ConfigError(
                "palette",
                f"colors for {CLASS_NAMES[i]} and {CLASS_NAMES[j]} are {d.min():.3f} apart "
                f"(minimum {_MIN_PALETTE_DIST})",
            )
        if self.noise < 0:
            raise ConfigError("noise", f"must be >= 0, got {self.noise}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "frequencies": self.frequencies.tolist(),
            "palette": self.palette.tolist(),
            "noise": self.noise,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        missing = {"name", "frequencies", "palette"} - set(d)
        if missing:
            raise ConfigError(sorted(missing)[0], "missing from domain spec")
        return cls(d["name"], d["frequencies"], d["palette"], d.get("noise", 0.08))

    @classmethod
    def from_json(cls, path) -> "DomainSpec":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise IngestionError(path, f"cannot read spec: {e}") from e
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError("spec", f"invalid JSON at line {e.lineno}: {e.msg}") from e


def source_domain_spec() -> DomainSpec:
    """Synthetic-like domain: lots of sky and building, little vegetation."""
    return DomainSpec(
        name="toy-source",
        frequencies=[0.32, 0.30, 0.22, 0.10, 0.06],
        palette=[
            [0.30, 0.55, 0.90],
            [-0.05, -0.08, -0.12],
            [-0.60, -0.62, -0.60],
            [-0.40, 0.32, -0.42],
            [0.75, -0.45, -0.38],
        ],
    )


def target_domain_spec() -> DomainSpec:
    """Real-like domain: darker palette, more vegetation and cars."""
    return DomainSpec(
        name="toy-target",
        frequencies=[0.22, 0.26, 0.22, 0.20, 0.10],
        palette=[
            [0.10, 0.35, 0.70],
            [-0.25, -0.18, -0.05],
            [-0.70, -0.70, -0.72],
            [-0.55, 0.15, -0.55],
            [0.55, -0.55, -0.50],
        ],
    )


def builtin_spec(name: str) -> DomainSpec:
    table = {"toy-source": source_domain_spec, "toy-target": target_domain_spec}
    if name not in table:
        raise ConfigError("spec", f"unknown builtin spec {name!r}; use one of {sorted(table)}")
    return table[name]()


@dataclass
class ToyScene:
    image: np.ndarray          # (3, H, W) float32 in (-1, 1)
    labels: np.ndarray         # (H, W) uint8 class ids
    domain: str
    seed: int


def _stochastic_round(x: float, rng: np.random.Generator) -> int:
    base = int(np.floor(x))
    return base + (1 if rng.random() < x - base else 0)


def _fill_region(labels, rows, cls, budget, rng, draw_patch, max_tries=4000):
    """Paint random patches inside `rows` until exactly `budget` pixels hold `cls`."""
    if budget <= 0:
        return
    r0, r1 = rows
    h, w = labels.shape
    area = (r1 - r0) * w
    if budget > area:
        raise GenerationError(
            f"cannot place {budget} {CLASS_NAMES[cls]} pixels in a {r1 - r0}x{w} band"
        )
    painted = 0
    for _ in range(max_tries):
        if painted >= budget:
            break
        mask = draw_patch(rng, (r0, r1), (h, w))
        sel = mask & (labels[r0:r1] != cls)
        gain = int(sel.sum())
        if gain == 0:
            continue
        if painted + gain > budget:
            # trim the patch in row-major order so the count lands exactly
            flat = np.flatnonzero(sel.reshape(-1))
            keep = flat[: budget - painted]
            sel = np.zeros_like(sel.reshape(-1))
            sel[keep] = True
            sel = sel.reshape(r1 - r0, w)
            gain = budget - painted
        labels[r0:r1][sel] = cls
        painted += gain
    else:
        raise GenerationError(
            f"layout infeasible: placed {painted}/{budget} {CLASS_NAMES[cls]} pixels"
        )


def _blob_patch(rng, rows, shape):
    r0, r1 = rows
    h, w = shape
    band = r1 - r0
    cy = rng.uniform(0, band)
    cx = rng.uniform(0, w)
    ry = rng.uniform(1.5, max(2.0, band * 0.45))
    rx = rng.uniform(2.0, max(2.5, w * 0.12))
    yy, xx = np.mgrid[0:band, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _box_patch(rng, rows, shape):
    r0, r1 = rows
    h, w = shape
    band = r1 - r0
    bh = int(rng.integers(2, max(3, min(5, band)) + 1))
    bw = int(rng.integers(3, 8))
    top = int(rng.integers(0, max(1, band - bh + 1)))
    left = int(rng.integers(0, max(1, w - bw + 1)))
    mask = np.zeros((band, w), dtype=bool)
    mask[top : top + bh, left : left + bw] = True
    return mask


def generate_scene(spec: DomainSpec, seed: int, height: int = 64, width: int = 64) -> ToyScene:
    """Deterministic scene synthesis; identical seed gives identical bytes."""
    if height < 16 or width < 16:
        raise ContractError(f"generate_scene: minimum size is 16x16, got {height}x{width}")
    rng = np.random.default_rng(seed)
    f = spec.frequencies
    # Band heights use stochastic rounding so long-run class means stay unbiased.
    h_sky = max(2, _stochastic_round(f[SKY] * height, rng))
    h_road = max(2, _stochastic_round((f[ROAD] + f[CAR]) * height, rng))
    if h_sky + h_road > height - 4:
        raise GenerationError("sky and road bands leave no room for buildings")
    labels = np.empty((height, width), dtype=np.uint8)
    labels[:h_sky] = SKY
    labels[h_sky : height - h_road] = BUILDING
    labels[height - h_road :] = ROAD

    veg_budget = int(round(f[VEGETATION] * height * width))
    car_budget = int(round(f[CAR] * height * width))
    _fill_region(labels, (h_sky, height - h_road), VEGETATION, veg_budget, rng, _blob_patch)
    _fill_region(labels, (height - h_road, height), CAR, car_budget, rng, _box_patch)

    image = spec.palette[labels].astype(np.float64)
    image += rng.normal(0.0, spec.noise, size=image.shape)
    image = np.clip(image, -0.999, 0.999).transpose(2, 0, 1).astype(np.float32)
    return ToyScene(image=image, labels=labels, domain=spec.name, seed=seed)


def oracle_segment(image: np.ndarray, spec: DomainSpec) -> np.ndarray:
    """Nearest palette prototype per pixel; ties go to the lowest class id."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"oracle_segment: expected (3, H, W), got {img.shape}")
    px = img.reshape(3, -1).T                                  # (HW, 3)
    d2 = (
        np.sum(px * px, axis=1)[:, None]
        - 2.0 * px @ spec.palette.T
        + np.sum(spec.palette * spec.palette, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1).astype(np.uint8).reshape(img.shape[1:])


# -- scoring -------------------------------------------------------------------


@dataclass
class MetricReport:
    confusion: np.ndarray
    pixel_acc: float
    class_acc: float
    mean_iou: float
    per_class_iou: np.ndarray   # nan where the class is absent from truth

    @classmethod
    def from_confusion(cls, confusion: np.ndarray) -> "MetricReport":
        cm = np.asarray(confusion, dtype=np.int64)
        if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
            raise ContractError(f"confusion matrix must be square, got {cm.shape}")
        total = cm.sum()
        if total <= 0:
            raise ContractError("confusion matrix is empty")
        truth = cm.sum(axis=1)          # row i: ground-truth class i
        pred = cm.sum(axis=0)
        tp = np.diag(cm)
        present = truth > 0
        pixel_acc = float(tp.sum() / total)
        class_acc = float(np.mean(tp[present] / truth[present]))
        union = truth + pred - tp
        iou = np.full(cm.shape[0], np.nan)
        iou[present] = tp[present] / union[present]
        return cls(
            confusion=cm,
            pixel_acc=pixel_acc,
            class_acc=class_acc,
            mean_iou=float(np.nanmean(iou[present])),
            per_class_iou=iou,
        )

    def to_dict(self) -> dict:
        return {
            "pixel_acc": self.pixel_acc,
            "class_acc": self.class_acc,
            "mean_iou": self.mean_iou,
            "per_class_iou": [None if np.isnan(v) else float(v) for v in self.per_class_iou],
            "confusion": self.confusion.tolist(),
            "classes": list(CLASS_NAMES[: self.confusion.shape[0]]),
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def to_csv(self, path) -> None:
        names = CLASS_NAMES[: self.confusion.shape[0]]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pixel_acc", "class_acc", "mean_iou"] + [f"iou_{n}" for n in names])
            writer.writerow(
                [repr(self.pixel_acc), repr(self.class_acc), repr(self.mean_iou)]
                + ["" if np.isnan(v) else repr(float(v)) for v in self.per_class_iou]
            )


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ContractError(f"confusion_matrix: shape mismatch {pred.shape} vs {truth.shape}")
    idx = truth.reshape(-1).astype(np.int64) * n_classes + pred.reshape(-1).astype(np.int64)
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def segmentation_scores(pred: np.ndarray, truth: np.ndarray, n_classes: int = N_CLASSES) -> MetricReport:
    return MetricReport.from_confusion(confusion_matrix(pred, truth, n_classes))


def evaluate_refiner(generator, scenes, target_spec: DomainSpec, batch_size: int = 8) -> MetricReport:
    """Refine each scene, segment the refined image with the target palette,
    and score against the scene's own ground truth."""
    if not scenes:
        raise ContractError("evaluate_refiner: no scenes given")
    total = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    with no_grad():
        for lo in range(0, len(scenes), batch_size):
            chunk = scenes[lo : lo + batch_size]
            batch = Tensor(np.stack([s.image for s in chunk]))
            refined, _ = generator.generate(batch)
            for img, scene in zip(refined.data, chunk):
                pred = oracle_segment(img, target_spec)
                total += confusion_matrix(pred, scene.labels)
    return MetricReport.from_confusion(total)


# -- image and dataset IO ---------------------------------------------------------


def save_image(image: np.ndarray, path) -> None:
    """(3, H, W) floats in [-1, 1] -> 8-bit RGB PNG."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"save_image: expected (3, H, W), got {img.shape}")
    u8 = np.round((np.clip(img, -1.0, 1.0) + 1.0) * 0.5 * 255.0).astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(path)


def load_image(path, size: int | None = None) -> np.ndarray:
    """8-bit RGB image file -> (3, H, W) float32 in [-1, 1]."""
    try:
        img = Image.open(path)
        img.load()
    except (OSError, UnidentifiedImageError) as e:
        raise IngestionError(path, f"unreadable image: {e}") from e
    if img.mode != "RGB":
        raise IngestionError(path, f"expected an 8-bit RGB image, got mode {img.mode!r}")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0 * 2.0 - 1.0
    return arr.transpose(2, 0, 1)


def load_image_folder(path, size: int | None = None) -> list[tuple[str, np.ndarray]]:
    """All images in a directory, ordered by filename."""
    root = Path(path)
    if not root.is_dir():
        raise IngestionError(path, "not a directory")
    names = sorted(
        p.name for p in root.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if not names:
        raise IngestionError(path, "no image files found")
    return [(n, load_image(root / n, size=size)) for n in names]


def save_labels(labels: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path)


def load_labels(path) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, UnidentifiedImageError) as e:
        raise IngestionError(path, f"unreadable label map: {e}") from e
    if img.mode != "L":
        raise IngestionError(path, f"expected a single-channel label map, got mode {img.mode!r}")
    return np.asarray(img, dtype=np.uint8)


def write_dataset(out_dir, spec: DomainSpec, count: int, seed: int,
                  height: int = 64, width: int = 64) -> list[ToyScene]:
    """Generate scenes to <out>/images + <out>/labels plus a manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    scenes = []
    records = []
    for i in range(count):
        scene = generate_scene(spec, seed + i, height, width)
        name = f"scene_{i:05d}.png"
        save_image(scene.image, out / "images" / name)
        save_labels(scene.labels, out / "labels" / name)
        records.append({"image": f"images/{name}", "labels": f"labels/{name}", "seed": scene.seed})
        scenes.append(scene)
    manifest = {
        "spec": spec.to_dict(),
        "seed": seed,
        "count": count,
        "height": height,
        "width": width,
        "items": records,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return scenes


def read_dataset(path) -> tuple[list[ToyScene], DomainSpec]:
    """Load a gen-data directory back into memory via its manifest."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise IngestionError(path, "missing manifest.json (expected a gen-data directory)")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise IngestionError(manifest_path, f"invalid manifest JSON: {e.msg}") from e
    spec = DomainSpec.from_dict(manifest["spec"])
    scenes = []
    for rec in manifest["items"]:
        image = load_image(root / rec["image"])
        labels = load_labels(root / rec["labels"])
        scenes.append(ToyScene(image=image, labels=labels, domain=spec.name, seed=rec["seed"]))
    return scenes, spec
