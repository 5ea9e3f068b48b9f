"""Command-line entry point: ``protoseg <subcommand> [--config PATH] [--set key=value ...] --out DIR``.

Every subcommand merges a JSON config file, ``--set`` overrides and the
explicit flags (later wins), writes its outputs under ``--out`` and prints
a one-line summary.  Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as C
from . import datagen as D
from . import evaluation as E
from . import training as T
from .experiments import loss_grad_errors
from .network import NetConfig
from .prototypes import PrototypeSet, build_prototypes

GRAD_TOL = 1e-5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# -- config handling ------------------------------------------------------------------------
def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config(args):
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError(f"config {args.config}: top level must be an object")
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key.strip()] = _parse_value(value)
    for key in ("ckpt", "data", "teacher", "student", "new_data", "protos", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _need(cfg, key):
    if key not in cfg:
        raise UsageError(f"missing required setting {key!r} (use --{key.replace('_', '-')} or --set)")
    return cfg.pop(key)


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _regime_mix(spec):
    if spec is None:
        return [(D.Regime("partial", subset_size=3), 1.0)]
    return [(D.Regime.from_dict(r), w) for r, w in spec]


# -- subcommands ------------------------------------------------------------------------------
def cmd_gen_data(args, cfg):
    task = cfg.pop("task", None)
    if task is None or isinstance(task, int):
        task = D.toy_task(task or 6)
    else:
        task = D.SynthTask.from_dict(task)
    manifest = D.gen_dataset(task, int(cfg.pop("n_samples", 240)), _regime_mix(cfg.pop("regime_mix", None)),
                             int(cfg.pop("seed", 0)), _out_dir(args),
                             float(cfg.pop("test_fraction", 0.2)))
    _reject_leftovers(cfg)
    n_test = sum(e["split"] == "test" for e in manifest["samples"])
    return f"wrote {len(manifest['samples'])} samples ({n_test} test) to {args.out}"


def _save_protos(path, protos):
    np.save(path, np.asarray(getattr(protos, "matrix", protos)))


def _load_protos(path):
    m = np.load(path)
    try:
        return PrototypeSet(m)
    except ValueError:
        return m  # unorthogonalized ablation prototypes


def cmd_make_protos(args, cfg):
    protos = build_prototypes(int(cfg.pop("n_rows", 7)), seed=int(cfg.pop("seed", 0)),
                              dim=int(cfg.pop("dim", 64)), embed_dim=int(cfg.pop("embed_dim", 512)),
                              orthogonalize=bool(cfg.pop("orthogonalize", True)),
                              embedding_file=cfg.pop("embedding_file", None))
    _reject_leftovers(cfg)
    path = _out_dir(args) / "prototypes.npy"
    _save_protos(path, protos)
    m = np.asarray(getattr(protos, "matrix", protos))
    return f"wrote {m.shape[0]}x{m.shape[1]} prototypes to {path}"


def _stage(cfg, kind):
    keys = {k: cfg.pop(k) for k in list(cfg) if k in T.StageConfig.__dataclass_fields__}
    keys["kind"] = kind
    return T.StageConfig.from_dict(keys)


def cmd_train(args, cfg):
    data = D.load_dataset(_need(cfg, "data"))
    net_cfg = NetConfig.from_dict(cfg.pop("net")) if "net" in cfg else NetConfig()
    stage = _stage(cfg, T.INITIAL)
    if "protos" in cfg:
        protos = _load_protos(cfg.pop("protos"))
    else:
        protos = build_prototypes(stage.n_old + 1, seed=int(cfg.pop("proto_seed", 0)),
                                  dim=net_cfg.feature_dim)
    _reject_leftovers(cfg)
    out = _out_dir(args)
    ckpt = T.train_initial(stage, data, protos, net_cfg, log_path=out / "log.csv")
    C.save_checkpoint(out / "final.pseg", ckpt)
    return f"trained {stage.iterations} iterations, final loss {ckpt.log[-1]['loss_total']:.5f}" \
        if ckpt.log else "trained 0 iterations"


def cmd_train_incr(args, cfg):
    data = D.load_dataset(_need(cfg, "data"))
    teacher = C.load_checkpoint(_need(cfg, "teacher"))
    stage = _stage(cfg, T.INCREMENTAL)
    protos = _load_protos(cfg.pop("protos")) if "protos" in cfg else None
    _reject_leftovers(cfg)
    out = _out_dir(args)
    ckpt = T.train_incremental(stage, data, teacher, protos, log_path=out / "log.csv")
    C.save_checkpoint(out / "final.pseg", ckpt)
    return f"trained incremental stage to {ckpt.n_classes} classes in {stage.iterations} iterations"


def _classes(cfg, key, default):
    value = cfg.pop(key, None)
    return tuple(int(c) for c in value) if value is not None else tuple(default)


def cmd_eval(args, cfg):
    ckpt = C.load_checkpoint(_need(cfg, "ckpt"))
    data = D.load_dataset(_need(cfg, "data"))
    classes = _classes(cfg, "classes", range(1, ckpt.n_classes + 1))
    _reject_leftovers(cfg)
    rep = E.report(ckpt, data.test, classes)
    rep.to_csv(_out_dir(args) / "metrics.csv")
    return rep.summary()


def cmd_forget_report(args, cfg):
    teacher = C.load_checkpoint(_need(cfg, "teacher"))
    student = C.load_checkpoint(_need(cfg, "student"))
    data = D.load_dataset(_need(cfg, "data"))
    new_data = cfg.pop("new_data", None)
    old = _classes(cfg, "old_classes", range(1, teacher.n_classes + 1))
    new = _classes(cfg, "new_classes", range(teacher.n_classes + 1, student.n_classes + 1))
    _reject_leftovers(cfg)
    new_samples = D.load_dataset(new_data).test if new_data else None
    rep = E.forgetting_report(teacher, student, data.test, old, new, new_samples)
    rep.to_csv(_out_dir(args) / "forgetting.csv")
    return f"old {rep.structure_mean(old):.2f} new {rep.structure_mean(new):.2f}"


def cmd_simmap(args, cfg):
    ckpt = C.load_checkpoint(_need(cfg, "ckpt"))
    data = D.load_dataset(_need(cfg, "data"))
    index = int(cfg.pop("sample", 0))
    cls = int(cfg.pop("class", 1))
    _reject_leftovers(cfg)
    if not 0 <= index < len(data.test):
        raise ValueError(f"sample index {index} outside test set of {len(data.test)}")
    sample = data.test[index]
    prefix = _out_dir(args) / f"sim_{sample.subject_id}_c{cls}"
    sim = E.export_similarity(ckpt, sample.image, cls, prefix)
    return f"wrote {prefix}.f32/.pgm (cosine range {sim.min():.3f}..{sim.max():.3f})"


def cmd_grad_check(args, cfg):
    seed = int(cfg.pop("seed", 0))
    _reject_leftovers(cfg)
    errors = loss_grad_errors(seed)
    for name, err in errors.items():
        print(f"{name:18s} {err:.3e}")
    worst = max(errors.values())
    if args.out:
        (_out_dir(args) / "grad_check.json").write_text(json.dumps(errors, indent=1))
    args.failed = worst > GRAD_TOL
    return f"max relative error {worst:.3e} ({'ok' if worst <= GRAD_TOL else 'FAIL'})"


def _reject_leftovers(cfg):
    if cfg:
        raise UsageError(f"unknown settings: {sorted(cfg)}")


COMMANDS = {
    "gen-data": (cmd_gen_data, ()),
    "make-protos": (cmd_make_protos, ()),
    "train": (cmd_train, ("data", "protos")),
    "train-incr": (cmd_train_incr, ("data", "teacher", "protos")),
    "eval": (cmd_eval, ("ckpt", "data")),
    "forget-report": (cmd_forget_report, ("teacher", "student", "data", "new_data")),
    "simmap": (cmd_simmap, ("ckpt", "data")),
    "grad-check": (cmd_grad_check, ()),
}


def build_parser():
    parser = _Parser(prog="protoseg", description="Prototype-based class-incremental segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, paths) in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", required=name != "grad-check", help="output directory")
        for key in paths:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key)
        if name == "grad-check":
            p.add_argument("--seed", type=int)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _load_config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    args.failed = False
    try:
        summary = handler(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return 1
    except (ValueError, OSError, ArithmeticError, KeyError, RuntimeError) as exc:
        print(f"protoseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(summary)
    return 2 if args.failed else 0


if __name__ == "__main__":
    sys.exit(main())
