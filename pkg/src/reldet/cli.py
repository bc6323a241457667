"""Command-line entry point: gen-data, train, eval, gradcheck.

Every command is reproducible: the (command, config, seed) triple determines
all output bytes except the timestamp in log headers. Exit codes: 0 success,
1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck
from .checkpoint import load_checkpoint, save_checkpoint
from .config import NOISE_PRESETS, ConfigError, RunConfig, load_run_config
from .evaluation import ALL_TASKS, evaluate_dataset
from .model import ModelConfig, init_params, train_model
from .scenes import CategoryVocab, GenerationError, default_vocab, \
    generate_synthetic_scene, read_dataset, write_dataset


class UserError(Exception):
    """Bad input from the user (missing files, mismatched data); exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _scene_seed(master: int, split_tag: int, index: int) -> int:
    return int(np.random.SeedSequence((master, split_tag, index)).generate_state(1)[0])


def _load_vocab(data_dir: Path) -> CategoryVocab:
    vocab_path = data_dir / "vocab.json"
    if not vocab_path.exists():
        raise UserError(f"no vocab.json in {data_dir}; is this a dataset directory?")
    return CategoryVocab.load(vocab_path)


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    (out / "config.resolved.ini").write_text(cfg.resolved_text())


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = default_vocab()
    vocab.save(out / "vocab.json")
    counts = dict.fromkeys(vocab.predicates, 0)
    total_relations = 0
    for split, n, tag in (("train", cfg.train_scenes, 0),
                          ("test", cfg.test_scenes, 1)):
        scenes = [generate_synthetic_scene(cfg.generator,
                                           _scene_seed(args.seed, tag, i),
                                           vocab)
                  for i in range(n)]
        write_dataset(out / split, scenes, vocab)
        if split == "train":
            for scene in scenes:
                total_relations += len(scene.relations)
                for _, p, _ in scene.relations:
                    counts[vocab.predicates[p]] += 1
    _write_resolved(cfg, out)
    print(f"wrote {cfg.train_scenes} train + {cfg.test_scenes} test scenes to {out}")
    print(f"train relations: {total_relations}")
    for name, c in counts.items():
        print(f"  {name}: {c}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    data = Path(args.data)
    if not data.is_dir():
        raise UserError(f"data directory not found: {data}")
    vocab = _load_vocab(data)
    scenes = read_dataset(data / "train", vocab)
    if not scenes:
        raise UserError(f"no training scenes under {data / 'train'}")
    model_cfg = cfg.model_config(vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train.log"
    with open(log_path, "w") as log_file:
        log_file.write(f"# reldet train  started={time.strftime('%Y-%m-%dT%H:%M:%S')}"
                       f" seed={args.seed} ablate_sil={args.ablate_sil}\n")

        def log(line: str) -> None:
            log_file.write(line + "\n")
            log_file.flush()
            print(line)

        params, _ = train_model(scenes, vocab, model_cfg, cfg.training,
                                seed=args.seed, ablate_sil=args.ablate_sil, log=log)
    metadata = {
        "model": {
            "input_resolution": model_cfg.input_resolution,
            "vin_channels": list(model_cfg.vin_channels),
            "oln_hidden": model_cfg.oln_hidden,
            "oln_out": model_cfg.oln_out,
            "reduction": model_cfg.reduction,
            "classifier_hidden": list(model_cfg.classifier_hidden),
            "dropout_rate": model_cfg.dropout_rate,
            "num_predicates": model_cfg.num_predicates,
            "num_categories": model_cfg.num_categories,
        },
        "ablate_sil": args.ablate_sil,
        "seed": args.seed,
        "vocab": {"object_categories": list(vocab.objects),
                  "predicates": list(vocab.predicates)},
    }
    save_checkpoint(out / "checkpoint.bin", params, metadata)
    _write_resolved(cfg, out)
    print(f"checkpoint written to {out / 'checkpoint.bin'}")
    return 0


def _restore_model(checkpoint: Path):
    if not checkpoint.exists():
        raise UserError(f"checkpoint not found: {checkpoint}")
    try:
        params, metadata = load_checkpoint(checkpoint)
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    m = metadata["model"]
    model_cfg = ModelConfig(
        input_resolution=m["input_resolution"],
        vin_channels=tuple(m["vin_channels"]),
        oln_hidden=m["oln_hidden"], oln_out=m["oln_out"],
        reduction=m["reduction"],
        classifier_hidden=tuple(m["classifier_hidden"]),
        dropout_rate=m["dropout_rate"],
        num_predicates=m["num_predicates"],
        num_categories=m["num_categories"])
    ablate = bool(metadata["ablate_sil"])
    expected = init_params(model_cfg, seed=0, ablate_sil=ablate)
    if set(expected) != set(params):
        raise UserError("checkpoint parameters do not match its model config")
    for name, t in expected.items():
        if params[name].data.shape != t.data.shape:
            raise UserError(
                f"checkpoint parameter {name} has shape {params[name].data.shape}, "
                f"expected {t.data.shape}")
    return params, model_cfg, ablate, metadata


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    params, model_cfg, ablate, metadata = _restore_model(Path(args.checkpoint))
    data = Path(args.data)
    if not data.is_dir():
        raise UserError(f"data directory not found: {data}")
    vocab = _load_vocab(data)
    ck_vocab = metadata["vocab"]
    if list(vocab.objects) != ck_vocab["object_categories"] \
            or list(vocab.predicates) != ck_vocab["predicates"]:
        raise UserError("checkpoint vocabulary does not match the dataset")
    scenes = read_dataset(data / args.split, vocab)
    if args.noise is not None:
        if args.noise not in NOISE_PRESETS:
            raise UserError(f"unknown noise profile {args.noise!r}; "
                            f"choose from {sorted(NOISE_PRESETS)}")
        noise = NOISE_PRESETS[args.noise]
    else:
        noise = cfg.noise
    tasks = tuple(args.tasks.split(",")) if args.tasks else cfg.eval_tasks
    for t in tasks:
        if t not in ALL_TASKS:
            raise UserError(f"unknown task {t!r}; choose from {ALL_TASKS}")
    ks = tuple(int(k) for k in args.k.split(",")) if args.k else cfg.eval_ks
    report = evaluate_dataset(scenes, vocab, params, model_cfg,
                              noise.with_seed(args.seed),
                              settings=tasks, ks=ks, ablate_sil=ablate)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text())
    _write_resolved(cfg, out)
    print(report.to_text(), end="")
    return 0


def cmd_gradcheck(args) -> int:
    cases = gradcheck.OP_CASES if args.scope == "op" else gradcheck.MODEL_CASES
    results = gradcheck.run_cases(cases, seeds=10, base_seed=args.seed)
    failed = False
    for name, err in results:
        ok = err < gradcheck.TOLERANCE
        failed |= not ok
        print(f"{name:24s} max_rel_err={err:.3e}  {'pass' if ok else 'FAIL'}")
    return 2 if failed else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reldet",
                     description="Synthetic relation-detection benchmark: data "
                                 "generation, training, evaluation, gradient checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the predicate classifier")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--ablate-sil", action="store_true",
                   help="train the controlled framework without the "
                        "semantics-induced block")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--noise", default=None,
                   help=f"noise preset: {', '.join(sorted(NOISE_PRESETS))}")
    p.add_argument("--tasks", default=None, help="comma-separated task list")
    p.add_argument("--k", default=None, help="comma-separated recall cutoffs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scope", choices=("op", "model"), default="op")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UserError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except GenerationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure envelope
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
