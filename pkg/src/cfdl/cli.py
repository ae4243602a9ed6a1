"""Command-line entry point: ``cfdl <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .config import AblationFlags, ConfigError
from .experiment import RunConfig, load_data, run_ablation, run_train, write_json
from .gradcore import NonFiniteError
from .synthdata import DatasetFileError, load, save
from .train import CheckpointError, DivergenceError, evaluate, load_checkpoint, model_from_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

log = logging.getLogger("cfdl")


def _run_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig.from_dict({"data": {"synth": {}}})
    flags = AblationFlags.parse(args.flags) if getattr(args, "flags", None) else None
    return cfg.with_overrides(seed=args.seed, out=getattr(args, "out", None),
                              folds=getattr(args, "folds", None), flags=flags)


def cmd_gen_data(args) -> int:
    cfg = _run_config(args)
    if "synth" not in cfg.data:
        raise ConfigError("gen-data needs a data.synth section")
    data = load_data(cfg)
    out = Path(args.out or "dataset.cfdl")
    save(data, out)
    hist = ", ".join(f"{c}:{n}" for c, n in enumerate(data.class_counts()))
    print(f"wrote {out}: M={data.M} n={data.n} in_dim={data.in_dim} classes [{hist}]")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    res = run_train(cfg)
    print(f"{cfg.flags().label()} over {len(res.folds)} fold(s) -> {res.out_dir}")
    for name, (m, s) in res.stats.items():
        print(f"  {name:<16} {m:.4f} ± {s:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    res = run_ablation(cfg)
    if res.notice:
        print(f"notice: {res.notice}")
    print(f"{'dis_ps':<7}{'MoE':<5}{'LinG':<5}{'ACC':>18}{'AUC':>18}")
    for flags, tr in res.rows:
        acc, auc = tr.stats["ACC"], tr.stats["AUC"]
        ling = ("on" if flags.ling else "off") if flags.moe else "-"
        print(f"{'on' if flags.dis_ps else 'off':<7}{'on' if flags.moe else 'off':<5}{ling:<5}"
              f"{acc[0]:>10.4f}±{acc[1]:.4f}{auc[0]:>10.4f}±{auc[1]:.4f}")
    print(f"wrote {Path(cfg.out) / 'ablation.csv'}")
    return EXIT_OK


def _model_and_data(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    data = load(args.dataset)
    mc = model.config
    if (data.M, data.in_dim) != (mc.num_modalities, mc.in_dim) or data.num_cls != mc.num_cls:
        raise ConfigError(f"checkpoint expects M={mc.num_modalities} in_dim={mc.in_dim} classes={mc.num_cls}, "
                          f"dataset has M={data.M} in_dim={data.in_dim} classes={data.num_cls}")
    return model, data


def cmd_export_gates(args) -> int:
    model, data = _model_and_data(args)
    if not model.config.flags.moe:
        raise ConfigError("checkpoint has no gate (MoE off)")
    ev = evaluate(model, data.x, data.y)
    out = Path(args.out or "gates.csv")
    analysis.write_gates_csv(out, model.lattice.final_names(), ev.gates)
    mean = ev.gates.mean(axis=0)
    names = model.lattice.final_names()
    print("  ".join(f"{n}={w:.3f}" for n, w in zip(names, mean)))
    print(f"wrote {out} (argmax {names[int(np.argmax(mean))]})")
    return EXIT_OK


def cmd_export_similarity(args) -> int:
    model, data = _model_and_data(args)
    out = Path(args.out or "similarity")
    out.mkdir(parents=True, exist_ok=True)
    dump = analysis.collect_features(model, data.x)
    analysis.write_matrix_csv(out / "similarity.csv", dump.names, analysis.similarity_matrix(dump))
    analysis.write_features_csv(out / "features.csv", dump, data.y)
    s = analysis.structure_summary(dump, model)
    print(f"shared CS {s.shared_cs:.4f}  partial CS {s.partial_cs:.4f}  final |CS| {s.final_abs_cs:.4f}")
    print(f"wrote {out}/similarity.csv and {out}/features.csv")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, data = _model_and_data(args)
    ev = evaluate(model, data.x, data.y)
    if ev.report is None:
        raise ConfigError(f"metrics undefined: {ev.error}")
    payload = {**ev.report.flat(), "simplex_violations": ev.simplex_violations}
    if args.out:
        write_json(args.out, payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfdl", description="Feature disentanglement + MoE fusion toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_opts(sp, folds=True, flags=True):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override train seed (and synthetic data seed)")
        sp.add_argument("--out", help="output path")
        if folds:
            sp.add_argument("--folds", type=int, help="k for k-fold CV; 0 or 1 for a hold-out split")
        if flags:
            sp.add_argument("--flags", help="dis_ps,moe,ling e.g. on,on,off")

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    run_opts(sp, folds=False, flags=False)
    sp.set_defaults(func=cmd_gen_data)
    sp = sub.add_parser("train", help="train over folds and write run artifacts")
    run_opts(sp)
    sp.set_defaults(func=cmd_train)
    sp = sub.add_parser("ablate", help="run the dis_ps x MoE x LinG grid")
    run_opts(sp, flags=False)
    sp.set_defaults(func=cmd_ablate)
    for name, func, helptext in (("export-gates", cmd_export_gates, "per-sample gate weights CSV"),
                                 ("export-similarity", cmd_export_similarity, "cosine-similarity matrix + features"),
                                 ("eval", cmd_eval, "metrics of a checkpoint on a dataset")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--dataset", required=True, help="dataset file written by gen-data")
        sp.add_argument("--out")
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetFileError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
