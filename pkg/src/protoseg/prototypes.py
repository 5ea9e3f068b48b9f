"""Fixed class prototypes: embeddings -> top-variance columns -> orthonormal rows.

Row 0 is always the background / not-yet-learned class.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad

DEFAULT_EMBED_DIM = 512
DEFAULT_FEATURE_DIM = 64


class RankDeficiencyError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingMatrix:
    rows: np.ndarray
    source: str

    def __post_init__(self):
        if self.rows.ndim != 2 or self.rows.shape[0] < 2:
            raise ValueError(f"need at least 2 embedding rows, got shape {self.rows.shape}")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("embedding matrix contains non-finite entries")


@dataclass(frozen=True)
class PrototypeSet:
    """Orthonormal (K x D) prototype matrix; immutable."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64, copy=True)
        if m.ndim != 2 or m.shape[0] > m.shape[1]:
            raise ValueError(f"prototype matrix must be K x D with K <= D, got {m.shape}")
        gram = m @ m.T
        if np.abs(gram - np.eye(m.shape[0])).max() > 1e-9:
            raise ValueError("prototype rows are not orthonormal")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def n_rows(self):
        return self.matrix.shape[0]

    @property
    def dim(self):
        return self.matrix.shape[1]

    def rows(self, k):
        """First ``k`` rows (classes 0..k-1)."""
        if k > self.n_rows:
            raise ValueError(f"prototype budget {self.n_rows} < requested {k} rows")
        return self.matrix[:k]


def as_matrix(protos):
    return np.asarray(getattr(protos, "matrix", protos), dtype=np.float64)


# -- embedding sources -------------------------------------------------------
def write_embedding_file(path, rows):
    rows = np.asarray(rows, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *rows.shape))
        fh.write(rows.tobytes())


def read_embedding_file(path):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: missing 8-byte header")
    n, e = struct.unpack_from("<II", raw)
    body = raw[8:]
    if len(body) != 4 * n * e:
        raise ValueError(f"{path}: header says {n}x{e} floats, payload has {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(n, e).astype(np.float64)


def make_embeddings(source, n_rows, embed_dim=DEFAULT_EMBED_DIM):
    """Seeded standard-normal rows (``source`` an int) or rows read from a file.

    The seeded path draws from ``numpy.random.default_rng(seed)`` (PCG64).
    """
    if n_rows < 2:
        raise ValueError("need at least background plus one class")
    if isinstance(source, (int, np.integer)):
        rng = np.random.default_rng(int(source))
        return EmbeddingMatrix(rng.standard_normal((n_rows, embed_dim)), f"seed:{int(source)}")
    rows = read_embedding_file(source)
    if rows.shape != (n_rows, embed_dim):
        raise ValueError(f"{source}: expected {n_rows}x{embed_dim} embeddings, file holds {rows.shape[0]}x{rows.shape[1]}")
    return EmbeddingMatrix(rows, f"file:{source}")


def select_features(emb, dim):
    """Keep the ``dim`` columns with the largest across-class variance, in original order."""
    rows = emb.rows if isinstance(emb, EmbeddingMatrix) else np.asarray(emb, dtype=np.float64)
    if dim > rows.shape[1]:
        raise ValueError(f"cannot select {dim} features from {rows.shape[1]}")
    var = rows.var(axis=0)
    keep = np.sort(np.argsort(-var, kind="stable")[:dim])
    return rows[:, keep]


# -- orthogonalization -------------------------------------------------------------
def _orthogonalize(basis, rows, offset=0):
    out = list(basis)
    for i, v in enumerate(rows):
        v = np.array(v, dtype=np.float64)
        norm_in = np.linalg.norm(v)
        u = v.copy()
        for e in out:
            u -= (u @ e) * e
        if np.linalg.norm(u) < 1e-8 * norm_in or norm_in == 0:
            raise RankDeficiencyError(f"row {offset + i} is linearly dependent on earlier rows")
        # second sweep restores orthogonality lost to cancellation
        for e in out:
            u -= (u @ e) * e
        out.append(u / np.linalg.norm(u))
    return out


def gram_schmidt(m):
    m = np.asarray(m, dtype=np.float64)
    if m.shape[0] > m.shape[1]:
        raise ValueError(f"{m.shape[0]} rows cannot be orthogonal in dimension {m.shape[1]}")
    return PrototypeSet(np.array(_orthogonalize([], m)))


def extend_prototypes(existing, new_rows):
    existing = existing if isinstance(existing, PrototypeSet) else PrototypeSet(existing)
    new_rows = np.asarray(new_rows, dtype=np.float64).reshape(-1, existing.dim)
    if len(new_rows) == 0:
        return existing
    total = existing.n_rows + len(new_rows)
    if total > existing.dim:
        raise ValueError(f"prototype budget exceeded: {total} rows in dimension {existing.dim}")
    out = _orthogonalize(list(existing.matrix), new_rows, offset=existing.n_rows)
    return PrototypeSet(np.vstack([existing.matrix] + out[existing.n_rows:]))


def unit_rows(m):
    """Row-normalize without orthogonalizing (ablation path)."""
    m = np.asarray(m, dtype=np.float64)
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def build_prototypes(n_rows, seed=0, dim=DEFAULT_FEATURE_DIM, embed_dim=DEFAULT_EMBED_DIM,
                     orthogonalize=True, embedding_file=None):
    """Embeddings -> feature selection -> Gram-Schmidt (or plain normalization)."""
    emb = make_embeddings(embedding_file if embedding_file else seed, n_rows, embed_dim)
    reduced = select_features(emb, dim)
    if orthogonalize:
        return gram_schmidt(reduced)
    return unit_rows(reduced)


def similarity_field(features, protos, class_index):
    """Cosine similarity between each pixel's feature and one prototype, H x W."""
    f = features.data if isinstance(features, ad.Tensor) else np.asarray(features, dtype=np.float64)
    proto = as_matrix(protos)[class_index]
    fhat = ad.l2_normalize(f, axis=0).data
    proto = proto / np.linalg.norm(proto)
    return np.tensordot(proto, fhat, axes=(0, 0))
