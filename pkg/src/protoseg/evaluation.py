"""Prediction, Dice metrics, forgetting reports and similarity-map export."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import network
from .prototypes import as_matrix, similarity_field


def _cosines(features, protos):
    f = np.asarray(getattr(features, "data", features), dtype=np.float64)
    pm = as_matrix(protos)
    pm = pm / np.linalg.norm(pm, axis=1, keepdims=True)
    norm = np.sqrt((f * f).sum(axis=0, keepdims=True))
    fhat = f / np.where(norm < 1e-12, 1.0, norm)
    return np.tensordot(pm, fhat, axes=(1, 0))


def predict(features, protos, tau=None):
    """Per-pixel argmax of cosine similarity; ties go to the lower class index.

    ``tau`` is accepted for symmetry with the softmax but cannot change the
    argmax.
    """
    return np.argmax(_cosines(features, protos), axis=0)


def features_of(ckpt, image):
    return network.forward(ckpt.params, image, ckpt.net_config).data


def predict_sample(ckpt, image, n_classes=None):
    n = ckpt.n_classes if n_classes is None else n_classes
    return predict(features_of(ckpt, image), ckpt.prototypes[: n + 1])


def dice_score(pred, gt, c):
    """Percent Dice for class ``c``; 100 if absent from both maps."""
    p = np.asarray(pred) == c
    g = np.asarray(gt) == c
    denom = p.sum() + g.sum()
    if denom == 0:
        return 100.0
    return 100.0 * 2.0 * np.logical_and(p, g).sum() / denom


@dataclass
class StructureStats:
    n_subjects: int
    mean: float
    std: float
    before: float = None
    delta: float = None


@dataclass
class MetricsReport:
    per_structure: dict
    per_subject: list
    notes: list = field(default_factory=list)

    @property
    def per_subject_mean(self):
        return float(np.mean([m for _, m in self.per_subject])) if self.per_subject else float("nan")

    @property
    def per_subject_std(self):
        return float(np.std([m for _, m in self.per_subject])) if self.per_subject else float("nan")

    def structure_mean(self, classes=None):
        keys = [c for c in (classes or self.per_structure) if c in self.per_structure]
        return float(np.mean([self.per_structure[c].mean for c in keys])) if keys else float("nan")

    @property
    def per_structure_mean(self):
        return self.structure_mean()

    @property
    def per_structure_std(self):
        vals = [s.mean for s in self.per_structure.values()]
        return float(np.std(vals)) if vals else float("nan")

    def to_csv(self, path):
        with_delta = any(s.before is not None for s in self.per_structure.values())
        cols = ["class", "n_subjects", "mean_dsc", "std_dsc"] + (["before_dsc", "delta"] if with_delta else [])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for c in sorted(self.per_structure):
                s = self.per_structure[c]
                row = [c, s.n_subjects, repr(s.mean), repr(s.std)]
                if with_delta:
                    row += ["" if s.before is None else repr(s.before),
                            "" if s.delta is None else repr(s.delta)]
                w.writerow(row)
        return path

    def summary(self):
        return (f"per-subject {self.per_subject_mean:.2f} ({self.per_subject_std:.2f}), "
                f"per-structure {self.per_structure_mean:.2f} ({self.per_structure_std:.2f})")


STD_NOTE = ("std: per-subject over subjects; per class over the subjects containing it; "
            "overall per-structure over class means (population std)")


def _dice_table(preds, samples, classes):
    per_class = {c: [] for c in classes}
    per_subject = []
    for pred, s in zip(preds, samples):
        present = [c for c in classes if np.any(s.full_labels == c)]
        scores = [dice_score(pred, s.full_labels, c) for c in present]
        for c, d in zip(present, scores):
            per_class[c].append(d)
        if scores:
            per_subject.append((s.subject_id, float(np.mean(scores))))
    return per_class, per_subject


def report(ckpt, samples, classes, n_classes=None):
    samples = list(getattr(samples, "test", samples))
    if not samples:
        raise ValueError("empty test set")
    preds = [predict_sample(ckpt, s.image, n_classes) for s in samples]
    per_class, per_subject = _dice_table(preds, samples, classes)
    notes = [STD_NOTE]
    table = {}
    for c in classes:
        vals = per_class[c]
        if not vals:
            notes.append(f"class {c} absent from every test subject; omitted")
            continue
        table[c] = StructureStats(len(vals), float(np.mean(vals)), float(np.std(vals)))
    return MetricsReport(table, per_subject, notes)


def forgetting_report(teacher, student, samples, old_classes, new_classes, new_samples=None):
    """Old-class DSC before (teacher) and after (student), plus new-class DSC.

    ``new_samples`` scores the new classes on a different test set (domain shift).
    """
    before = report(teacher, samples, old_classes)
    after = report(student, samples, old_classes)
    fresh = report(student, samples if new_samples is None else new_samples, new_classes)
    table = {}
    for c, s in after.per_structure.items():
        b = before.per_structure.get(c)
        table[c] = StructureStats(s.n_subjects, s.mean, s.std,
                                  None if b is None else b.mean,
                                  None if b is None else s.mean - b.mean)
    table.update(fresh.per_structure)
    notes = list(dict.fromkeys(before.notes + after.notes + fresh.notes))
    return MetricsReport(table, after.per_subject, notes)


# -- similarity maps -------------------------------------------------------------------
def pgm_bytes(sim):
    sim = np.asarray(sim, dtype=np.float64)
    gray = np.clip(np.floor(255.0 * (sim + 1.0) / 2.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes()


def export_similarity(ckpt, image, class_index, out_prefix):
    """Write ``<prefix>.f32`` (raw little-endian H x W) and ``<prefix>.pgm``."""
    if not 0 <= class_index < ckpt.prototypes.shape[0]:
        raise ValueError(f"class {class_index} outside prototype budget {ckpt.prototypes.shape[0]}")
    sim = similarity_field(features_of(ckpt, image), ckpt.prototypes, class_index)
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    try:
        Path(f"{prefix}.f32").write_bytes(np.ascontiguousarray(sim, dtype="<f4").tobytes())
        Path(f"{prefix}.pgm").write_bytes(pgm_bytes(sim))
    except OSError as exc:
        raise OSError(f"writing similarity map {prefix}: {exc}") from exc
    return sim


def similarity_contrast(ckpt, samples, classes):
    """Mean cosine to a class prototype inside that class minus outside it."""
    inside, outside = [], []
    for s in getattr(samples, "test", samples):
        feats = features_of(ckpt, s.image)
        for c in classes:
            mask = s.full_labels == c
            if not mask.any():
                continue
            sim = similarity_field(feats, ckpt.prototypes, c)
            inside.append(sim[mask].mean())
            outside.append(sim[~mask].mean())
    return float(np.mean(inside) - np.mean(outside))
