import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from protoseg import prototypes as P


def classical_gram_schmidt(v):
    """Textbook recurrence: u_k = v_k - sum_i proj_{u_i}(v_k), then normalize."""
    us = []
    for vk in v:
        u = vk.copy()
        for ui in us:
            u = u - (vk @ ui) / (ui @ ui) * ui
        us.append(u)
    return np.array([u / np.linalg.norm(u) for u in us])


def test_seeded_embeddings_are_deterministic():
    a = P.make_embeddings(7, 17, 512)
    b = P.make_embeddings(7, 17, 512)
    assert a.rows.tobytes() == b.rows.tobytes()
    assert a.rows.shape == (17, 512)


def test_seeded_embeddings_match_documented_prng():
    np.testing.assert_array_equal(P.make_embeddings(3, 4, 8).rows,
                                  np.random.default_rng(3).standard_normal((4, 8)))


def test_seeded_embedding_statistics():
    rows = P.make_embeddings(11, 10_000, 16).rows
    assert np.abs(rows.mean(axis=0)).max() < 0.05
    assert np.abs(rows.var(axis=0) - 1).max() < 0.05


def test_embedding_file_round_trip(tmp_path):
    rows = np.random.default_rng(0).standard_normal((4, 6)).astype(np.float32)
    path = tmp_path / "emb.bin"
    P.write_embedding_file(path, rows)
    raw = path.read_bytes()
    assert raw[:8] == np.array([4, 6], dtype="<u4").tobytes()
    np.testing.assert_array_equal(P.make_embeddings(path, 4, 6).rows, rows.astype(np.float64))


def test_embedding_file_shape_mismatch(tmp_path):
    path = tmp_path / "emb.bin"
    P.write_embedding_file(path, np.ones((3, 6)))
    with pytest.raises(ValueError, match="expected 4x6"):
        P.make_embeddings(path, 4, 6)


def test_embedding_file_non_finite(tmp_path):
    path = tmp_path / "emb.bin"
    P.write_embedding_file(path, np.array([[1.0, np.nan], [0.0, 1.0]]))
    with pytest.raises(ValueError, match="non-finite"):
        P.make_embeddings(path, 2, 2)


def test_select_features_keeps_high_variance_column():
    out = P.select_features(np.array([[0.0, 1.0], [0.0, -1.0]]), 1)
    np.testing.assert_array_equal(out, [[1.0], [-1.0]])


def test_select_features_identity_and_ties():
    m = np.random.default_rng(0).standard_normal((3, 5))
    np.testing.assert_array_equal(P.select_features(m, 5), m)
    tied = np.array([[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 1.0, 2.0]])
    # every column has variance 1
    np.testing.assert_array_equal(P.select_features(tied, 2), tied[:, :2])


def test_select_features_preserves_column_order():
    m = np.array([[0.0, 5.0, 0.0, 1.0], [0.0, -5.0, 0.0, -1.0]])
    np.testing.assert_array_equal(P.select_features(m, 2), m[:, [1, 3]])
    with pytest.raises(ValueError):
        P.select_features(m, 5)


def test_gram_schmidt_hand_example():
    np.testing.assert_allclose(P.gram_schmidt([[1.0, 0.0], [1.0, 1.0]]).matrix, np.eye(2), atol=1e-15)


def test_gram_schmidt_orthonormal_input_unchanged():
    q, _ = np.linalg.qr(np.random.default_rng(2).standard_normal((6, 6)))
    np.testing.assert_allclose(P.gram_schmidt(q.T[:4]).matrix, q.T[:4], atol=1e-12)


def test_gram_schmidt_rank_deficiency():
    with pytest.raises(P.RankDeficiencyError, match="row 1"):
        P.gram_schmidt([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])


def test_gram_schmidt_matches_textbook_recurrence():
    v = np.random.default_rng(4).standard_normal((6, 10))
    np.testing.assert_allclose(P.gram_schmidt(v).matrix, classical_gram_schmidt(v), atol=1e-10)


def test_gram_schmidt_row0_is_normalized_input():
    v = np.random.default_rng(5).standard_normal((3, 8))
    np.testing.assert_allclose(P.gram_schmidt(v).matrix[0], v[0] / np.linalg.norm(v[0]), atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 64))
def test_gram_schmidt_orthonormality_and_idempotence(seed, rows):
    v = np.random.default_rng(seed).standard_normal((rows, 64))
    e = P.gram_schmidt(v).matrix
    gram = e @ e.T
    assert np.abs(gram - np.diag(np.diag(gram))).max() <= 1e-9
    assert np.abs(np.linalg.norm(e, axis=1) - 1).max() <= 1e-12
    np.testing.assert_allclose(P.gram_schmidt(e).matrix, e, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_class_permutation_keeps_orthonormality(seed):
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((8, 100))
    perm = np.concatenate([[0], 1 + rng.permutation(7)])
    e = P.gram_schmidt(P.select_features(emb[perm], 64)).matrix
    np.testing.assert_allclose(e @ e.T, np.eye(8), atol=1e-9)


def test_extend_prototypes():
    base = P.PrototypeSet(np.eye(3)[:2])
    assert P.extend_prototypes(base, np.zeros((0, 3))) is base
    ext = P.extend_prototypes(base, [[1.0, 1.0, 1.0]])
    np.testing.assert_allclose(ext.matrix[2], [0.0, 0.0, 1.0], atol=1e-15)
    assert ext.matrix[:2].tobytes() == base.matrix.tobytes()
    with pytest.raises(P.RankDeficiencyError):
        P.extend_prototypes(base, [[2.0, -1.0, 0.0]])
    with pytest.raises(ValueError, match="budget"):
        P.extend_prototypes(ext, [[1.0, 2.0, 3.0]])


def test_prototype_budget_limit():
    with pytest.raises(ValueError):
        P.gram_schmidt(np.random.default_rng(0).standard_normal((5, 4)))


def test_similarity_field():
    protos = P.PrototypeSet(np.eye(4)[:3])
    same = np.broadcast_to(np.array([0.0, 2.0, 0.0, 0.0])[:, None, None], (4, 3, 3))
    np.testing.assert_allclose(P.similarity_field(same, protos, 1), 1.0)
    np.testing.assert_allclose(P.similarity_field(same, protos, 0), 0.0)
    f = np.array([3.0, 4.0, 0.0, 0.0]).reshape(4, 1, 1)
    assert P.similarity_field(f, protos, 0)[0, 0] == pytest.approx(0.6)


def test_build_prototypes_default_shape():
    pset = P.build_prototypes(17, seed=7)
    assert pset.matrix.shape == (17, 64)
    raw = P.build_prototypes(17, seed=7, orthogonalize=False)
    np.testing.assert_allclose(np.linalg.norm(raw, axis=1), 1.0)
    assert np.abs(raw @ raw.T - np.eye(17)).max() > 1e-3
