"""Command-line driver: ``refactor-kgc {train,eval,inductive,verify,inspect}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import oracles
from .checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .evaluation import EvaluationError, evaluate
from .graph import (
    GraphError,
    KnowledgeGraph,
    VocabularyError,
    load_dataset,
    parse_triples,
)
from .refactor import decoder_model, inductive_infer
from .runner import (
    CompatibilityError,
    build_run,
    check_compatible,
    initial_features,
    restore_run,
    run_header,
)
from .scoring import FactorizationModel

logger = logging.getLogger("refactor_kgc")

EXIT_OK, EXIT_ORACLE, EXIT_CONFIG, EXIT_DATA, EXIT_COMPAT = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@contextmanager
def out_dir_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(EXIT_CONFIG, f"{out} is locked by another run (remove {lock} if stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _load_data(path, reciprocals: bool):
    try:
        return load_dataset(path, reciprocals=reciprocals)
    except (GraphError, OSError, ValueError) as exc:
        raise CliError(EXIT_DATA, f"data error: {exc}") from None


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CliError(EXIT_DATA, f"cannot read checkpoint: {exc}") from None
    except (CheckpointError, ValueError) as exc:
        raise CliError(EXIT_COMPAT, str(exc)) from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _evaluate(model, dataset, split, protocol, seed):
    rng = np.random.default_rng(seed)
    g = dataset.split(split)
    return evaluate(model, g.triples, dataset.filter_index(), dataset.train.num_base_relations, protocol, rng,
                    reciprocal=dataset.train.has_reciprocals)


# --- train -------------------------------------------------------------------------------


def cmd_train(args) -> int:
    resume = None
    if args.resume:
        resume = _load_ckpt(args.resume)
        cfg = RunConfig.from_dict(resume[0]["config"]) if not args.config else None
    if args.config:
        try:
            cfg = load_config(args.config)
        except OSError as exc:
            raise CliError(EXIT_CONFIG, f"cannot read config: {exc}") from None
    elif resume is None:
        raise CliError(EXIT_CONFIG, "train needs --config or --resume")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **overrides})

    dataset = _load_data(args.data, cfg.reciprocals)
    out = Path(args.out)
    with out_dir_lock(out):
        (out / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
        features = None
        if cfg.mode == "refactor":
            try:
                features = initial_features(cfg, dataset.train, args.features)
            except (GraphError, OSError, ValueError) as exc:
                raise CliError(EXIT_DATA, f"features: {exc}") from None
        try:
            if resume is not None:
                run = restore_run(resume[0], resume[1], dataset.train)
                run.cfg = cfg
            else:
                run = build_run(cfg, dataset.train, features)
        except GraphError as exc:
            raise CliError(EXIT_DATA, f"data error: {exc}") from None
        return _train_loop(run, cfg, dataset, out, args)


def _train_loop(run, cfg: RunConfig, dataset, out: Path, args) -> int:
    best_mrr, best_epoch = -1.0, -1
    mode = "a" if args.resume else "w"
    with open(out / "loss.tsv", mode, encoding="utf-8") as loss_log, open(out / "epochs.tsv", mode, encoding="utf-8") as ep_log:

        def on_step(step, loss, flag):
            if loss is None:
                loss_log.write(f"{step}\tclear\t1\n")
            else:
                loss_log.write(f"{step}\t{loss!r}\t{int(flag)}\n")

        def checkpoint(name, metrics=None):
            header = run_header(run)
            if metrics is not None:
                header["metrics"] = metrics
            save_checkpoint(out / name, header, run.arrays(), f32=args.f32)

        def validate():
            nonlocal best_mrr, best_epoch
            report = _evaluate(run.eval_model(), dataset, "valid", "full", cfg.seed)
            if report.mrr > best_mrr:
                best_mrr, best_epoch = report.mrr, run.epoch
                checkpoint("best.ckpt", {"valid": report.to_dict()})
            return report.mrr

        if not args.resume:
            ep_log.write(f"{run.epoch}\tnan\t{validate()!r}\n")
        t0 = time.perf_counter()
        while run.epoch < cfg.epochs:
            loss = run.run_epoch(on_step)
            line = f"{run.epoch}\t{loss!r}"
            if run.epoch % cfg.eval_every == 0 or run.epoch == cfg.epochs:
                line += f"\t{validate()!r}"
            ep_log.write(line + "\n")
            ep_log.flush()
            loss_log.flush()
            logger.info("epoch %d loss %.5f best valid MRR %.4f (%.1fs)", run.epoch, loss, best_mrr, time.perf_counter() - t0)
            checkpoint("last.ckpt")
        if run.epoch == 0 or not (out / "last.ckpt").exists():
            checkpoint("last.ckpt")

    header, arrays = load_checkpoint(out / "best.ckpt")
    best = restore_run(header, arrays, dataset.train)
    model = best.eval_model()
    metrics = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "best_epoch": best_epoch,
        "epochs": run.epoch,
        "valid": _evaluate(model, dataset, "valid", "full", cfg.seed).to_dict(),
        "test": _evaluate(model, dataset, "test", "full", cfg.seed).to_dict(),
    }
    _write_json(out / "metrics.json", metrics)
    print(json.dumps({"best_epoch": best_epoch, "valid_mrr": metrics["valid"]["mrr"], "test_mrr": metrics["test"]["mrr"]}))
    return EXIT_OK


# --- eval / inductive ----------------------------------------------------------------------


def model_from_checkpoint(header: dict, arrays: dict, train: KnowledgeGraph) -> FactorizationModel:
    run = restore_run(header, arrays, train)
    return run.eval_model()


def _emit_report(report, out, per_query_tsv=None, graph=None) -> None:
    text = report.to_json()
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)
    if per_query_tsv:
        report.write_tsv(per_query_tsv, graph)


def cmd_eval(args) -> int:
    header, arrays = _load_ckpt(args.checkpoint)
    cfg = RunConfig.from_dict(header["config"])
    dataset = _load_data(args.data, cfg.reciprocals)
    check_compatible(header, dataset.train)
    model = model_from_checkpoint(header, arrays, dataset.train)
    seed = cfg.seed if args.seed is None else args.seed
    try:
        report = _evaluate(model, dataset, args.split, args.protocol, seed)
    except EvaluationError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    _emit_report(report, args.out, args.per_query, dataset.base_train)
    return EXIT_OK


def cmd_inductive(args) -> int:
    header, arrays = _load_ckpt(args.checkpoint)
    cfg = RunConfig.from_dict(header["config"])
    if cfg.mode != "refactor":
        raise CliError(EXIT_COMPAT, "inductive inference needs a refactor checkpoint")
    if cfg.finite_layers is None and args.layers is None:
        raise CliError(EXIT_CONFIG, "checkpoint was trained with layers=inf; pass --layers")
    try:
        ref = parse_triples(Path(args.data) / "train.txt")
        if ref.relations.names != header["relations"]:
            raise CliError(EXIT_COMPAT, "training data relation vocabulary differs from the checkpoint")
        ind = load_dataset(args.ind_data, reciprocals=cfg.reciprocals, known_relations=ref.relations)
    except VocabularyError as exc:
        raise CliError(EXIT_COMPAT, f"relation vocabulary mismatch: {exc}") from None
    except (GraphError, OSError, ValueError) as exc:
        raise CliError(EXIT_DATA, f"data error: {exc}") from None
    if ind.train.num_relations != header["num_relations"]:
        raise CliError(EXIT_COMPAT, "relation count differs from the checkpoint")
    try:
        x = initial_features(cfg, ind.train, args.features or "random:0")
    except (GraphError, OSError, ValueError) as exc:
        raise CliError(EXIT_DATA, f"features: {exc}") from None
    rcfg = cfg.refactor_config()
    try:
        states = inductive_infer(arrays["relation"], ind.train, x, rcfg, args.layers)
    except GraphError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    model = decoder_model(rcfg.decoder, states, arrays["relation"])
    seed = cfg.seed if args.seed is None else args.seed
    report = _evaluate(model, ind, args.split, args.protocol, seed)
    _emit_report(report, args.out, args.per_query, ind.base_train)
    return EXIT_OK


# --- verify / inspect ----------------------------------------------------------------------------


def cmd_verify(args) -> int:
    t0 = time.perf_counter()
    results = oracles.run_all(seed=args.seed or 0, perturb=args.perturb_gradient)
    for r in results:
        print(r.line())
    total = time.perf_counter() - t0
    budget_ok = total < 60.0
    print(f"{'PASS' if budget_ok else 'WARN'}  {'runtime budget':<28} {total:.1f}s of 60s")
    return EXIT_OK if all(r.passed for r in results) else EXIT_ORACLE


def cmd_inspect(args) -> int:
    try:
        header, _ = read_header(args.checkpoint)
    except OSError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    except (CheckpointError, ValueError) as exc:
        raise CliError(EXIT_COMPAT, str(exc)) from None
    header.pop("rng_state", None)
    print(json.dumps(header, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refactor-kgc", description="Factorization models and ReFactor GNNs for KG completion.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and keep the best-validation checkpoint")
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="directory with train.txt, valid.txt, test.txt")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--features", help="random:SEED or file:PATH (refactor mode)")
    t.add_argument("--resume", help="continue from a checkpoint; its config echo is used unless --config is given")
    t.add_argument("--f32", action="store_true", help="store float32 payloads (breaks bitwise resume)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="filtered ranking of a checkpoint on a split")
    e.add_argument("checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("valid", "test", "train"), default="test")
    e.add_argument("--protocol", choices=("full", "partial-50"), default="full")
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.add_argument("--per-query", help="optional per-query TSV")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inductive", help="run a trained ReFactor GNN on a graph with unseen entities")
    i.add_argument("checkpoint")
    i.add_argument("--data", required=True, help="the training graph directory (for the relation vocabulary)")
    i.add_argument("--ind-data", required=True, help="the inductive graph directory")
    i.add_argument("--features", default="random:0")
    i.add_argument("--layers", type=int)
    i.add_argument("--split", choices=("valid", "test"), default="test")
    i.add_argument("--protocol", choices=("full", "partial-50"), default="full")
    i.add_argument("--seed", type=int)
    i.add_argument("--out")
    i.add_argument("--per-query")
    i.set_defaults(func=cmd_inductive)

    v = sub.add_parser("verify", help="run the built-in oracle suite")
    v.add_argument("--seed", type=int)
    v.add_argument("--perturb-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("inspect", help="print a checkpoint header")
    s.add_argument("checkpoint")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CompatibilityError as exc:
        print(f"compatibility error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except GraphError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
