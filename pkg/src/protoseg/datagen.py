"""Synthetic 2D segmentation tasks with partial / sparse / missing annotations.

Images are single-channel canvases with disks, rectangles and rings on a
noisy background.  Rows of the image play the role of slices for the
sparse regime.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .losses import SPARSE, UNLABELED, VOLUMETRIC, AnnotationSpec

SHAPE_KINDS = ("disk", "rectangle", "ring")
MAX_PLACEMENT_TRIES = 50
MAX_LAYOUTS = 100


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassShape:
    label: int
    kind: str
    size: tuple
    intensity: float
    intensity_sd: float = 0.02
    prob: float = 0.8

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))


@dataclass(frozen=True)
class Domain:
    bg_mean: float = 0.1
    bg_sd: float = 0.02
    noise_sd: float = 0.04
    invert: bool = False


@dataclass(frozen=True)
class SynthTask:
    height: int = 48
    width: int = 48
    classes: tuple = ()
    domain: Domain = field(default_factory=Domain)

    def __post_init__(self):
        classes = tuple(c if isinstance(c, ClassShape) else ClassShape(**c) for c in self.classes)
        object.__setattr__(self, "classes", classes)
        if not isinstance(self.domain, Domain):
            object.__setattr__(self, "domain", Domain(**self.domain))
        labels = [c.label for c in classes]
        if labels != list(range(1, len(labels) + 1)):
            raise ValueError(f"class labels must be 1..N in order, got {labels}")

    @property
    def n_classes(self):
        return len(self.classes)

    def to_dict(self):
        d = asdict(self)
        d["classes"] = [asdict(c) for c in self.classes]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["height"], d["width"], tuple(ClassShape(**c) for c in d["classes"]),
                   Domain(**d["domain"]))


def _shape_mask(kind, cy, cx, size, aspect, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= size * size
    if kind == "rectangle":
        return (np.abs(dy) <= size) & (np.abs(dx) <= size * aspect)
    r2 = dy * dy + dx * dx
    return (r2 <= size * size) & (r2 >= (0.5 * size) ** 2)


def _layout(shapes, h, w, rng):
    for _ in range(MAX_LAYOUTS):
        placed = []
        for reach in shapes:
            for _ in range(MAX_PLACEMENT_TRIES):
                cy = rng.uniform(reach + 1, h - reach - 1)
                cx = rng.uniform(reach + 1, w - reach - 1)
                if all(np.hypot(cy - py, cx - px) > reach + pr + 1 for py, px, pr in placed):
                    placed.append((cy, cx, reach))
                    break
            else:
                break
        if len(placed) == len(shapes):
            return placed
    return None


def gen_sample(task, seed):
    """(image [1,H,W], full label map [H,W]) for one seeded draw."""
    rng = np.random.default_rng(seed)
    h, w = task.height, task.width
    labels = np.zeros((h, w), dtype=np.int64)
    img = np.full((h, w), task.domain.bg_mean + task.domain.bg_sd * rng.standard_normal())
    drawn = []
    for cls in task.classes:
        if rng.random() >= cls.prob:
            continue
        size = rng.uniform(*cls.size)
        aspect = rng.uniform(0.6, 1.0) if cls.kind == "rectangle" else 1.0
        reach = size * np.hypot(1.0, aspect) if cls.kind == "rectangle" else size
        if 2 * reach + 2 >= min(h, w):
            raise PlacementError(f"class {cls.label}: shape of reach {reach:.1f} does not fit {h}x{w}")
        drawn.append((cls, size, aspect, reach))
    placed = _layout([d[3] for d in drawn], h, w, rng)
    if placed is None:
        raise PlacementError(f"could not place {len(drawn)} shapes on {h}x{w} after {MAX_LAYOUTS} layouts")
    for (cls, size, aspect, _), (cy, cx, _) in zip(drawn, placed):
        mask = _shape_mask(cls.kind, cy, cx, size, aspect, h, w)
        img[mask] = cls.intensity + cls.intensity_sd * rng.standard_normal()
        labels[mask] = cls.label
    img = img + task.domain.noise_sd * rng.standard_normal((h, w))
    if task.domain.invert:
        img = 1.0 - img
    # stored as float32 on disk; round here so in-memory and on-disk data agree
    img = img.astype(np.float32).astype(np.float64)
    return img[None], labels


# -- annotation masking -------------------------------------------------------------
@dataclass(frozen=True)
class Regime:
    """How a full label map is reduced to training annotations.

    kind: ``partial`` (``phi`` fixed or a random ``subset_size``-subset of
    ``pool``), ``sparse`` (every ``stride``-th row, each keeping ``phi`` or a
    random ``subset_size``-subset), or ``unlabeled``.
    """

    kind: str
    phi: tuple = None
    subset_size: int = None
    pool: tuple = None
    stride: int = 5
    offset: int = None

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("phi", "pool"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class AnnotatedSample:
    image: np.ndarray
    full_labels: np.ndarray
    train_labels: np.ndarray
    spec: AnnotationSpec
    subject_id: str = ""
    seed: int = None


def _draw_phi(regime, n_classes, rng):
    if regime.phi is not None:
        phi = tuple(sorted(regime.phi))
    else:
        pool = regime.pool or tuple(range(1, n_classes + 1))
        k = regime.subset_size or len(pool)
        phi = tuple(sorted(int(c) for c in rng.choice(pool, size=k, replace=False)))
    if not phi:
        raise ValueError("labeled regime needs a nonempty class subset")
    return phi


def _keep_only(labels, phi):
    return np.where(np.isin(labels, phi), labels, 0)


def mask_annotations(image, full_labels, regime, seed, n_classes=None, subject_id=""):
    rng = np.random.default_rng(seed)
    full_labels = np.asarray(full_labels)
    n_classes = int(full_labels.max()) if n_classes is None else n_classes
    if regime.kind == "unlabeled":
        spec = AnnotationSpec(UNLABELED)
        train = np.zeros_like(full_labels)
    elif regime.kind == "partial":
        phi = _draw_phi(regime, n_classes, rng)
        spec = AnnotationSpec(VOLUMETRIC, phi=phi)
        train = _keep_only(full_labels, phi)
    elif regime.kind == "sparse":
        if regime.stride < 1:
            raise ValueError(f"sparse stride must be >= 1, got {regime.stride}")
        offset = regime.offset if regime.offset is not None else int(rng.integers(regime.stride))
        rows = tuple(r for r in range(full_labels.shape[0]) if r % regime.stride == offset)
        row_phis = tuple(_draw_phi(regime, n_classes, rng) for _ in rows)
        spec = AnnotationSpec(SPARSE, rows=rows, row_phis=row_phis)
        train = np.zeros_like(full_labels)
        for r, phi in zip(rows, row_phis):
            train[r] = _keep_only(full_labels[r], phi)
    else:
        raise ValueError(f"unknown regime kind {regime.kind!r}")
    return AnnotatedSample(image, full_labels, train, spec, subject_id, seed)


# -- datasets --------------------------------------------------------------------------
@dataclass
class Dataset:
    train: list
    test: list
    manifest: dict

    def __len__(self):
        return len(self.train) + len(self.test)


def _normalize_mix(regime_mix):
    items = list(regime_mix.items()) if isinstance(regime_mix, dict) else list(regime_mix)
    regimes = [r if isinstance(r, Regime) else Regime.from_dict(r) for r, _ in items]
    weights = np.array([float(w) for _, w in items])
    return regimes, weights / weights.sum()


def build_dataset(task, n_samples, regime_mix, seed, test_fraction=0.2, prefix="s"):
    """In-memory dataset plus the manifest that regenerates it."""
    rng = np.random.default_rng(seed)
    regimes, weights = _normalize_mix(regime_mix)
    n_test = int(round(n_samples * test_fraction))
    test_idx = set(int(i) for i in rng.permutation(n_samples)[:n_test])
    entries, train, test = [], [], []
    for i in range(n_samples):
        sample_seed = int(rng.integers(2**31 - 1))
        mask_seed = int(rng.integers(2**31 - 1))
        regime = regimes[int(rng.choice(len(regimes), p=weights))]
        sid = f"{prefix}{i:04d}"
        image, full = gen_sample(task, sample_seed)
        sample = mask_annotations(image, full, regime, mask_seed, task.n_classes, sid)
        split = "test" if i in test_idx else "train"
        (test if split == "test" else train).append(sample)
        entries.append({
            "id": sid, "seed": sample_seed, "mask_seed": mask_seed, "split": split,
            "regime": regime.to_dict(), "annotation": sample.spec.to_dict(),
            "image": f"{sid}_image.bin", "full_labels": f"{sid}_full.bin",
            "train_labels": f"{sid}_train.bin",
        })
    manifest = {
        "format": 1, "task": task.to_dict(), "seed": seed, "n_samples": n_samples,
        "test_fraction": test_fraction,
        "regime_mix": [[r.to_dict(), float(w)] for r, w in zip(regimes, weights)],
        "samples": entries,
    }
    return Dataset(train, test, manifest)


def regenerate(manifest):
    """Rebuild every sample from the seeds recorded in a manifest."""
    task = SynthTask.from_dict(manifest["task"])
    train, test = [], []
    for e in manifest["samples"]:
        image, full = gen_sample(task, e["seed"])
        s = mask_annotations(image, full, Regime.from_dict(e["regime"]), e["mask_seed"],
                             task.n_classes, e["id"])
        (test if e["split"] == "test" else train).append(s)
    return Dataset(train, test, manifest)


# -- on-disk format ----------------------------------------------------------------------
def _write_grid(path, arr, dtype):
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[None]
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_grid(path, dtype):
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise ValueError(f"{path}: missing 12-byte header")
    h, w, c = struct.unpack_from("<III", raw)
    body = np.frombuffer(raw[12:], dtype=dtype)
    if body.size != h * w * c:
        raise ValueError(f"{path}: header says {c}x{h}x{w}, payload holds {body.size} values")
    return body.reshape(c, h, w)


def write_image(path, image):
    _write_grid(path, image, "<f4")


def read_image(path):
    return _read_grid(path, "<f4").astype(np.float64)


def write_labels(path, labels):
    _write_grid(path, labels, "<u2")


def read_labels(path):
    return _read_grid(path, "<u2")[0].astype(np.int64)


def save_dataset(ds, out_dir):
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        by_id = {s.subject_id: s for s in ds.train + ds.test}
        for e in ds.manifest["samples"]:
            s = by_id[e["id"]]
            write_image(out / e["image"], s.image)
            write_labels(out / e["full_labels"], s.full_labels)
            write_labels(out / e["train_labels"], s.train_labels)
        (out / "manifest.json").write_text(json.dumps(ds.manifest, indent=1, sort_keys=True))
    except OSError as exc:
        raise OSError(f"writing dataset to {out}: {exc}") from exc
    return ds.manifest


def gen_dataset(task, n_samples, regime_mix, seed, out_dir, test_fraction=0.2, prefix="s"):
    ds = build_dataset(task, n_samples, regime_mix, seed, test_fraction, prefix)
    return save_dataset(ds, out_dir)


def load_dataset(path):
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    train, test = [], []
    for e in manifest["samples"]:
        s = AnnotatedSample(
            read_image(root / e["image"]), read_labels(root / e["full_labels"]),
            read_labels(root / e["train_labels"]), AnnotationSpec.from_dict(e["annotation"]),
            e["id"], e["seed"])
        (test if e["split"] == "test" else train).append(s)
    return Dataset(train, test, manifest)


# -- stock tasks ----------------------------------------------------------------------
_STOCK_SHAPES = (
    ("disk", (4.0, 6.0), 0.30),
    ("rectangle", (3.5, 5.0), 0.43),
    ("ring", (5.5, 7.5), 0.56),
    ("disk", (4.0, 6.0), 0.69),
    ("rectangle", (3.5, 5.0), 0.82),
    ("ring", (5.5, 7.5), 0.95),
)


def toy_task(n_classes=6, present=None, domain=None, height=48, width=48, prob=0.8):
    """Stock task: class c gets the c-th (kind, size, intensity) entry.

    ``present`` restricts which labels can appear (others get prob 0) while
    keeping the label numbering 1..n_classes.
    """
    if n_classes > len(_STOCK_SHAPES):
        raise ValueError(f"stock task has at most {len(_STOCK_SHAPES)} classes")
    present = set(range(1, n_classes + 1)) if present is None else set(present)
    classes = tuple(
        ClassShape(c, kind, size, inten, prob=prob if c in present else 0.0)
        for c, (kind, size, inten) in enumerate(_STOCK_SHAPES[:n_classes], start=1))
    return SynthTask(height, width, classes, domain or Domain())


SHIFTED_DOMAIN = Domain(bg_mean=0.1, bg_sd=0.02, noise_sd=0.06, invert=True)
