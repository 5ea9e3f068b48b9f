"""Scaled-down experiment drivers: offline toy task, class- and domain-incremental runs.

Each driver is a pure function of its seeds; the acceptance suite and the
CLI both call into here.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import datagen as D
from . import losses as L
from . import network
from . import evaluation as E
from . import training as T
from .prototypes import build_prototypes

log = logging.getLogger(__name__)

TOY_CLASSES = tuple(range(1, 7))
OLD_CLASSES = (1, 2, 3, 4)
NEW_CLASSES = (5, 6)


@dataclass
class RunResult:
    ckpt: object
    report: E.MetricsReport
    extra: dict = field(default_factory=dict)

    @property
    def dsc(self):
        return self.report.per_structure_mean


def _split(task, n_train, n_test, regime, seed, prefix):
    n = n_train + n_test
    return D.build_dataset(task, n, [(regime, 1.0)], seed, test_fraction=n_test / n, prefix=prefix)


def toy_dataset(seed=0, n_train=200, n_test=40, subset_size=3):
    """Six-class task; every training image annotates a random 3-class subset."""
    return _split(D.toy_task(6), n_train, n_test, D.Regime("partial", subset_size=subset_size),
                  seed, "toy")


def offline_run(seed=0, tau=0.12, proto_seed=None, orthogonalize=True, iterations=3000,
                dataset=None, net_config=None):
    ds = dataset or toy_dataset(seed)
    protos = build_prototypes(7, seed=seed if proto_seed is None else proto_seed,
                              orthogonalize=orthogonalize)
    cfg = T.StageConfig(n_old=6, iterations=iterations, tau_student=tau, tau_teacher=tau,
                        seed=seed, init_seed=seed)
    ckpt = T.train_initial(cfg, ds, protos, net_config)
    rep = E.report(ckpt, ds.test, TOY_CLASSES)
    contrast = E.similarity_contrast(ckpt, ds.test, TOY_CLASSES)
    log.info("offline seed=%d tau=%g ortho=%s: %s", seed, tau, orthogonalize, rep.summary())
    return RunResult(ckpt, rep, {"contrast": contrast, "dataset": ds})


# -- class-incremental ---------------------------------------------------------------------
def class_incremental(seed=0, lambda3_values=(1.0, 0.0), iterations=3000):
    """Teacher on classes 1-4, students on 5-6 with the old labels reset to 0.

    Both stages see images of the same six-class task; only the annotations differ.
    """
    task = D.toy_task(6)
    initial = _split(task, 200, 40, D.Regime("partial", phi=OLD_CLASSES), seed, "init")
    incr = _split(task, 200, 0, D.Regime("partial", phi=NEW_CLASSES), seed + 1000, "incr")
    protos = build_prototypes(7, seed=seed)
    tcfg = T.StageConfig(n_old=4, iterations=iterations, seed=seed, init_seed=seed)
    teacher = T.train_initial(tcfg, initial, protos)
    out = {"teacher": teacher, "test": initial.test}
    for lam3 in lambda3_values:
        cfg = T.StageConfig(kind=T.INCREMENTAL, n_old=4, m_new=2, iterations=iterations,
                            lambda3=lam3, seed=seed + 1)
        student = T.train_incremental(cfg, incr, teacher, protos)
        rep = E.forgetting_report(teacher, student, initial.test, OLD_CLASSES, NEW_CLASSES)
        out[lam3] = RunResult(student, rep)
        log.info("class-incremental lambda3=%g: old %.2f new %.2f", lam3,
                 rep.structure_mean(OLD_CLASSES), rep.structure_mean(NEW_CLASSES))
    return out


# -- domain-incremental ----------------------------------------------------------------------
def domain_incremental(seed=0, replay_counts=(0, 50), iterations=3000):
    """Teacher on domain A (classes 1-4); students on a shifted domain B with classes 5-6.

    ``replay_counts`` lists how many unlabeled domain-A images join the
    incremental training set in each student run.
    """
    task_a = D.toy_task(6, present=OLD_CLASSES)
    task_b = D.toy_task(6, present=NEW_CLASSES, domain=D.SHIFTED_DOMAIN)
    initial = _split(task_a, 200, 40, D.Regime("partial", phi=OLD_CLASSES), seed, "domA")
    incr = _split(task_b, 200, 40, D.Regime("partial", phi=NEW_CLASSES), seed + 1000, "domB")
    pool = _split(task_a, max(replay_counts) or 1, 0, D.Regime("unlabeled"), seed + 2000, "replay")
    protos = build_prototypes(7, seed=seed)
    tcfg = T.StageConfig(n_old=4, iterations=iterations, seed=seed, init_seed=seed)
    teacher = T.train_initial(tcfg, initial, protos)
    out = {"teacher": teacher, "test_old": initial.test, "test_new": incr.test}
    for n in replay_counts:
        train = list(incr.train) + list(pool.train[:n])
        cfg = T.StageConfig(kind=T.INCREMENTAL, n_old=4, m_new=2, iterations=iterations,
                            seed=seed + 1)
        student = T.train_incremental(cfg, train, teacher, protos)
        rep = E.forgetting_report(teacher, student, initial.test, OLD_CLASSES, NEW_CLASSES,
                                  new_samples=incr.test)
        out[n] = RunResult(student, rep)
        log.info("domain-incremental replay=%d: old %.2f new %.2f", n,
                 rep.structure_mean(OLD_CLASSES), rep.structure_mean(NEW_CLASSES))
    return out


# -- gradient oracle --------------------------------------------------------------------------
GRAD_NET = ((3, 4), (1, 8))


def loss_grad_errors(seed=0, n=3, m=1, size=4, h=1e-6):
    """Max relative error (analytic vs central differences) per loss, w.r.t. every network weight.

    Random ``size`` x ``size`` image, ``n`` old classes for the teacher and
    ``n + m`` for the student; losses are composed through the network and
    the prototype softmax.
    """
    rng = np.random.default_rng(seed)
    cfg = network.NetConfig(1, GRAD_NET)
    params = network.init(cfg, seed)
    for k in params:  # nonzero biases so every parameter gets exercised
        if k.endswith("bias"):
            params[k] = 0.1 * rng.standard_normal(params[k].shape)
    protos = build_prototypes(n + m + 1, seed=seed, dim=cfg.feature_dim, embed_dim=16).matrix
    image = rng.standard_normal((1, size, size))
    labels = rng.integers(0, n + m + 1, (size, size))
    phi = tuple(sorted(rng.choice(np.arange(1, n + m + 1), size=2, replace=False).tolist()))
    spec = L.AnnotationSpec(L.VOLUMETRIC, phi=phi)
    teacher = L.prototype_softmax(network.forward(network.init(cfg, seed + 1), image, cfg),
                                  protos[: n + 1]).data
    weights = rng.standard_normal((n + m + 1, size, size))

    def probs(ps):
        return L.prototype_softmax(network.forward(ps, image, cfg), protos)

    def total(p):
        parts = L.SampleLosses(entropy=L.entropy_loss(p), volume=L.volume_loss(p),
                               focal_ce=L.focal_ce(p, labels, spec), dice=L.dice_loss(p, labels, spec),
                               kd=L.kd_loss(teacher, p, n, m))
        return L.total_loss(parts, L.LossWeights(lambda3=1.0), 0)

    terms = {
        "prototype_softmax": lambda p: ad.sum(ad.mul(p, weights)),
        "focal_ce": lambda p: L.focal_ce(p, labels, spec),
        "dice": lambda p: L.dice_loss(p, labels, spec),
        "entropy": lambda p: L.entropy_loss(p),
        "volume": lambda p: L.volume_loss(p),
        "kd": lambda p: L.kd_loss(teacher, p, n, m),
        "total": total,
    }
    errors = {}
    for name, term in terms.items():
        worst = 0.0
        for key in params:
            def f(x, key=key):
                ps = dict(params)
                ps[key] = x
                return term(probs(ps))
            worst = max(worst, ad.grad_check(f, params[key], h))
        errors[name] = worst
    return errors
