"""Initial and incremental training loops (AdamW, poly learning-rate decay)."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import network
from .checkpoint import Checkpoint
from .prototypes import as_matrix

log = logging.getLogger(__name__)

INITIAL = "initial"
INCREMENTAL = "incremental"
LOG_COLUMNS = ("iteration", "loss_total", "loss_fce", "loss_dice", "loss_entropy",
               "loss_volume", "loss_kd", "lr", "lambda2", "seconds")


@dataclass
class StageConfig:
    kind: str = INITIAL
    n_old: int = 6
    m_new: int = 0
    tau_teacher: float = L.DEFAULT_TAU
    tau_student: float = L.DEFAULT_TAU
    iterations: int = 3000
    batch_size: int = 4
    lr: float = 1e-3
    poly_power: float = 0.9
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda1_labeled: float = 1.0
    lambda1_unlabeled: float = 3.0
    lambda2_base: float = 1e-5
    lambda2_epochs: float = 5.0
    epoch_iterations: int = 1000
    lambda3: float = None
    kd_exclude: bool = False
    seed: int = 0
    init_seed: int = 0
    log_interval: int = 50

    def __post_init__(self):
        if self.kind not in (INITIAL, INCREMENTAL):
            raise ValueError(f"unknown stage kind {self.kind!r}")
        if self.lambda3 is None:
            self.lambda3 = 0.0 if self.kind == INITIAL else 1.0
        if self.kind == INITIAL and self.lambda3 != 0:
            raise ValueError("initial stage has no teacher; lambda3 must be 0")
        if self.kind == INITIAL and self.m_new:
            raise ValueError("initial stage has no new classes")
        if self.kind == INCREMENTAL and self.m_new < 1:
            raise ValueError("incremental stage needs at least one new class")

    @property
    def n_classes(self):
        return self.n_old + self.m_new

    @property
    def new_classes(self):
        return tuple(range(self.n_old + 1, self.n_old + self.m_new + 1))

    def weights(self):
        return L.LossWeights(self.lambda1_labeled, self.lambda1_unlabeled, self.lambda2_base,
                             self.lambda2_epochs, self.epoch_iterations, self.lambda3)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown stage config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(it, cfg):
    if cfg.iterations <= 0:
        return cfg.lr
    return cfg.lr * max(1.0 - it / cfg.iterations, 0.0) ** cfg.poly_power


# -- optimizer -------------------------------------------------------------------------
@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params, grads, state, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
    """One AdamW update; returns new (params, state) without touching the inputs."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ad.ShapeError(f"optimizer_step[{name}]", p.shape, g.shape)
        m = beta1 * state.m.get(name, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        q = p - lr * mhat / (np.sqrt(vhat) + eps)
        new_params[name] = q - lr * weight_decay * q
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


# -- loop ----------------------------------------------------------------------------------
def _samples(dataset):
    return list(dataset.train) if hasattr(dataset, "train") else list(dataset)


def _sample_losses(p_student, sample, cfg, teacher_probs=None):
    n_cls = cfg.n_classes
    ent = L.entropy_loss(p_student)
    vol = L.volume_loss(p_student, n_cls)
    out = L.SampleLosses(entropy=ent, volume=vol, labeled=sample.spec.labeled)
    if sample.spec.labeled:
        spec = sample.spec
        if cfg.kind == INCREMENTAL:
            spec = spec.with_phi(cfg.new_classes)
        out.focal_ce = L.focal_ce(p_student, sample.train_labels, spec)
        out.dice = L.dice_loss(p_student, sample.train_labels, spec)
    if teacher_probs is not None:
        exclude = None
        if cfg.kd_exclude and sample.spec.labeled:
            exclude = (sample.train_labels >= 1) & (sample.train_labels <= cfg.n_old)
            if exclude.all():
                exclude = None
        out.kd = L.kd_loss(teacher_probs, p_student, cfg.n_old, cfg.m_new, exclude)
    return out


def _run(cfg, samples, protos, net_config, params, teacher=None, log_path=None):
    weights = cfg.weights()
    rows = as_matrix(protos)
    student_rows = rows[: cfg.n_classes + 1]
    teacher_rows = rows[: cfg.n_old + 1]
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history = []
    start = time.perf_counter()
    for it in range(cfg.iterations):
        idx = rng.integers(len(samples), size=cfg.batch_size)
        batch = [samples[i] for i in idx]
        images = np.stack([s.image for s in batch])
        tparams = network.as_trainable(params)
        feats = network.forward(tparams, images, net_config)
        # channel-first over the whole batch: (K, B, H, W)
        probs = L.prototype_softmax(ad.transpose(feats, (1, 0, 2, 3)), student_rows, cfg.tau_student)
        tprobs = None
        if teacher is not None and weights.lambda3 > 0:
            tfeats = network.forward(teacher, images, net_config).data
            tprobs = L.prototype_softmax(tfeats.transpose(1, 0, 2, 3), teacher_rows, cfg.tau_teacher).data
        epoch = it // cfg.epoch_iterations
        totals, comps = [], []
        for b, sample in enumerate(batch):
            p = ad.reshape(ad.take(probs, [b], axis=1), (probs.shape[0],) + probs.shape[2:])
            pt = tprobs[:, b] if tprobs is not None else None
            sl = _sample_losses(p, sample, cfg, pt)
            totals.append(L.total_loss(sl, weights, epoch))
            comps.append(sl)
        loss = totals[0]
        for t in totals[1:]:
            loss = ad.add(loss, t)
        loss = ad.mul(loss, 1.0 / len(totals))
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        loss.backward()
        lr = lr_at(it, cfg)
        grads = {k: t.grad for k, t in tparams.items()}
        params, state = optimizer_step(params, grads, state, lr, cfg.weight_decay,
                                       cfg.beta1, cfg.beta2, cfg.adam_eps)
        if it % cfg.log_interval == 0 or it == cfg.iterations - 1:
            history.append(_log_row(it, loss, comps, lr, L.lambda2_at(epoch, weights),
                                    time.perf_counter() - start))
            log.debug("iter %d loss %.5f", it, history[-1]["loss_total"])
    if log_path is not None:
        write_log(log_path, history)
    return params, history


def _mean_of(comps, attr):
    vals = [getattr(c, attr).item() for c in comps if getattr(c, attr) is not None]
    return float(np.mean(vals)) if vals else 0.0


def _log_row(it, loss, comps, lr, lam2, seconds):
    return {
        "iteration": it, "loss_total": loss.item(),
        "loss_fce": _mean_of(comps, "focal_ce"), "loss_dice": _mean_of(comps, "dice"),
        "loss_entropy": _mean_of(comps, "entropy"), "loss_volume": _mean_of(comps, "volume"),
        "loss_kd": _mean_of(comps, "kd"), "lr": lr, "lambda2": lam2, "seconds": seconds,
    }


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _check_labels(samples, max_label, what):
    for s in samples:
        top = int(s.train_labels.max()) if s.train_labels.size else 0
        if top > max_label:
            raise ValueError(f"sample {s.subject_id}: label {top} outside {what} 1..{max_label}")


def train_initial(cfg, dataset, protos, net_config=None, log_path=None):
    """Train a fresh network on classes 1..cfg.n_old; returns a Checkpoint."""
    if cfg.kind != INITIAL:
        raise ValueError("train_initial needs an initial-stage config")
    net_config = net_config or network.NetConfig()
    rows = as_matrix(protos)
    if rows.shape[0] < cfg.n_old + 1:
        raise ValueError(f"prototype budget {rows.shape[0]} rows < {cfg.n_old + 1} needed")
    if rows.shape[1] != net_config.feature_dim:
        raise ValueError(f"prototype width {rows.shape[1]} != feature dim {net_config.feature_dim}")
    samples = _samples(dataset)
    if not samples:
        raise ValueError("empty training set")
    _check_labels(samples, cfg.n_old, "prototype budget")
    params = network.init(net_config, cfg.init_seed)
    params, history = _run(cfg, samples, rows, net_config, params, log_path=log_path)
    return Checkpoint(net_config, params, rows.copy(), cfg.n_old, cfg.to_dict(), cfg.iterations,
                      {"seed": cfg.seed, "init_seed": cfg.init_seed}, history)


def train_incremental(cfg, dataset, teacher, protos=None, log_path=None):
    """Distil a frozen teacher into a student that also learns classes n_old+1..n_old+m_new."""
    if teacher is None:
        raise ValueError("incremental training needs a teacher checkpoint")
    if cfg.kind != INCREMENTAL:
        raise ValueError("train_incremental needs an incremental-stage config")
    if teacher.n_classes != cfg.n_old:
        raise ValueError(f"teacher segments {teacher.n_classes} classes, config says n_old={cfg.n_old}")
    rows = as_matrix(teacher.prototypes if protos is None else protos)
    if rows.shape[0] < cfg.n_classes + 1:
        raise ValueError(f"prototype budget {rows.shape[0]} rows < {cfg.n_classes + 1} needed")
    if not np.array_equal(rows[: cfg.n_old + 1], teacher.active_prototypes):
        raise ValueError("prototype rows 0..n_old differ from the teacher's")
    samples = _samples(dataset)
    if not samples:
        raise ValueError("empty training set")
    _check_labels(samples, cfg.n_classes, "prototype budget")
    frozen = network.clone(teacher.params)
    for arr in frozen.values():
        arr.setflags(write=False)
    student = network.clone(teacher.params)
    params, history = _run(cfg, samples, rows, teacher.net_config, student, teacher=frozen,
                           log_path=log_path)
    return Checkpoint(teacher.net_config, params, rows.copy(), cfg.n_classes, cfg.to_dict(),
                      cfg.iterations, {"seed": cfg.seed, "teacher_stage": teacher.stage}, history)
