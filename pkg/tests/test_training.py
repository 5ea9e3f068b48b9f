import csv

import numpy as np
import pytest

from protoseg import autodiff as ad
from protoseg import datagen as D
from protoseg import losses as L
from protoseg import network as net
from protoseg import training as T
from protoseg.prototypes import build_prototypes

SMALL = net.NetConfig(1, ((3, 8), (1, 16)))


@pytest.fixture(scope="module")
def tiny():
    task = D.toy_task(4, height=24, width=24)
    task = D.SynthTask(24, 24, tuple(D.ClassShape(c.label, c.kind, (2.0, 3.0), c.intensity) for c in task.classes))
    ds = D.build_dataset(task, 12, [(D.Regime("partial", subset_size=2), 1.0)], 0)
    protos = build_prototypes(5, seed=0, dim=16, embed_dim=64)
    return ds, protos


def test_lr_schedule():
    cfg = T.StageConfig(iterations=1000)
    assert T.lr_at(0, cfg) == cfg.lr
    assert T.lr_at(1000, cfg) == 0.0
    assert T.lr_at(500, cfg) == pytest.approx(0.53589 * cfg.lr, rel=1e-5)
    lrs = [T.lr_at(i, cfg) for i in range(1001)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_adamw_fixed_point_and_shrinkage():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.zeros(2)}
    q, _ = T.optimizer_step(p, g, T.AdamState(), 0.1, 0.0)
    np.testing.assert_array_equal(q["w"], p["w"])
    q, _ = T.optimizer_step(p, g, T.AdamState(), 0.1, 0.01)
    np.testing.assert_allclose(q["w"], p["w"] * (1 - 0.1 * 0.01), rtol=1e-15)


def test_adamw_first_step_and_reference():
    p = {"w": np.array([0.5])}
    q, st = T.optimizer_step(p, {"w": np.array([1.0])}, T.AdamState(), 1e-3, 0.0)
    assert q["w"][0] - 0.5 == pytest.approx(-1e-3, rel=1e-6)
    # three steps against a scalar loop of the textbook recurrence
    rng = np.random.default_rng(0)
    gs = rng.standard_normal(3)
    x, m, v = 0.5, 0.0, 0.0
    params, state = {"w": np.array([0.5])}, T.AdamState()
    for t, gv in enumerate(gs, start=1):
        m = 0.9 * m + 0.1 * gv
        v = 0.999 * v + 0.001 * gv * gv
        x = x - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        x = x - 0.01 * 0.1 * x
        params, state = T.optimizer_step(params, {"w": np.array([gv])}, state, 0.01, 0.1)
    assert params["w"][0] == pytest.approx(x, abs=1e-15)


def test_adamw_rejects_non_finite():
    with pytest.raises(FloatingPointError, match="conv0.weight"):
        T.optimizer_step({"conv0.weight": np.zeros(2)}, {"conv0.weight": np.array([np.nan, 0.0])},
                         T.AdamState(), 0.1, 0.0)


def test_stage_config_validation():
    assert T.StageConfig().lambda3 == 0.0
    assert T.StageConfig(kind=T.INCREMENTAL, n_old=4, m_new=2).lambda3 == 1.0
    with pytest.raises(ValueError):
        T.StageConfig(kind=T.INCREMENTAL, n_old=4, m_new=0)
    with pytest.raises(ValueError):
        T.StageConfig(lambda3=1.0)
    with pytest.raises(ValueError):
        T.StageConfig.from_dict({"bogus": 1})


def test_zero_iterations_returns_init(tiny):
    ds, protos = tiny
    cfg = T.StageConfig(n_old=4, iterations=0, init_seed=3)
    ck = T.train_initial(cfg, ds, protos, SMALL)
    init = net.init(SMALL, 3)
    assert all(ck.params[k].tobytes() == init[k].tobytes() for k in init)


def test_training_is_deterministic_and_logged(tiny, tmp_path):
    ds, protos = tiny
    cfg = T.StageConfig(n_old=4, iterations=12, batch_size=2, log_interval=5, seed=1)
    a = T.train_initial(cfg, ds, protos, SMALL, log_path=tmp_path / "log.csv")
    b = T.train_initial(cfg, ds, protos, SMALL)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert tuple(rows[0]) == T.LOG_COLUMNS
    its = [int(r["iteration"]) for r in rows]
    assert its == [0, 5, 10, 11]
    assert all(np.isfinite(float(r["loss_total"])) for r in rows)
    for k in T.LOG_COLUMNS[1:9]:
        assert [float(r[k]) for r in rows] == [x[k] for x in b.log] or k == "seconds"


def test_class_outside_budget(tiny):
    ds, protos = tiny
    with pytest.raises(ValueError, match="outside"):
        T.train_initial(T.StageConfig(n_old=2, iterations=1), ds, protos, SMALL)
    with pytest.raises(ValueError, match="budget"):
        T.train_initial(T.StageConfig(n_old=6, iterations=1), ds, protos, SMALL)




def test_incremental_contracts(tiny):
    ds, protos = tiny
    task = D.SynthTask(24, 24, tuple(D.ClassShape(c, "disk", (2.0, 3.0), 0.2 * c) for c in (1, 2, 3, 4)))
    old = D.build_dataset(task, 6, [(D.Regime("partial", phi=(1, 2)), 1.0)], 1)
    new = D.build_dataset(task, 6, [(D.Regime("partial", phi=(3, 4)), 1.0),
                                    (D.Regime("unlabeled"), 1.0)], 2)
    teacher = T.train_initial(T.StageConfig(n_old=2, iterations=3, batch_size=2), old, protos, SMALL)
    before = net.clone(teacher.params)
    cfg0 = T.StageConfig(kind=T.INCREMENTAL, n_old=2, m_new=2, iterations=0)
    st0 = T.train_incremental(cfg0, new, teacher, protos)
    assert all(st0.params[k].tobytes() == teacher.params[k].tobytes() for k in before)
    cfg = T.StageConfig(kind=T.INCREMENTAL, n_old=2, m_new=2, iterations=4, batch_size=3, log_interval=1)
    st = T.train_incremental(cfg, new, teacher, protos)
    assert all(teacher.params[k].tobytes() == before[k].tobytes() for k in before)
    # the student starts as the teacher: recompute the first KD value by hand
    idx = np.random.default_rng(cfg.seed).integers(len(new.train), size=cfg.batch_size)
    kls = []
    for i in idx:
        f = net.forward(teacher.params, new.train[i].image, SMALL).data.reshape(16, -1)
        cos = protos.matrix @ (f / np.linalg.norm(f, axis=0))
        t = np.exp(cos[:3] / 0.12) / np.exp(cos[:3] / 0.12).sum(axis=0)
        s = np.exp(cos / 0.12) / np.exp(cos / 0.12).sum(axis=0)
        folded = np.stack([s[0] + s[3] + s[4], s[1], s[2]])
        kls.append((t * np.log(t / folded)).sum(axis=0).mean())
    assert st.log[0]["loss_kd"] == pytest.approx(np.mean(kls), abs=1e-9)
    assert st.n_classes == 4
    with pytest.raises(ValueError, match="budget"):
        T.train_incremental(T.StageConfig(kind=T.INCREMENTAL, n_old=2, m_new=4, iterations=1),
                            new, teacher, protos)
    with pytest.raises(ValueError, match="teacher"):
        T.train_incremental(cfg, new, None, protos)


def test_incremental_uses_new_class_phi():
    spec = L.AnnotationSpec(L.VOLUMETRIC, phi=(3,))
    sample = D.AnnotatedSample(np.zeros((1, 2, 2)), np.array([[3, 4], [0, 0]]),
                               np.array([[3, 4], [0, 0]]), spec)
    cfg = T.StageConfig(kind=T.INCREMENTAL, n_old=2, m_new=2)
    p = ad.Tensor(np.full((5, 2, 2), 0.2))
    got = T._sample_losses(p, sample, cfg, np.full((3, 2, 2), 1 / 3)).focal_ce.item()
    want = L.focal_ce(p, sample.train_labels, L.AnnotationSpec(L.VOLUMETRIC, phi=(3, 4))).item()
    assert got == want
