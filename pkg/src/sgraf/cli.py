"""``sgraf`` command line: gen-data, train, eval, inspect, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .config import TOY, ConfigError, RunConfig, _coerce, dump_config, load_config
from .data import FeatureBankError, SyntheticSpec, data_dir, generate_synthetic_corpus, read_corpus, write_corpus
from .evaluation import DEFAULT_KS, fold_recall, fuse_scores, inspect_pair, recall_at_k, rsum, write_inspection, write_metrics
from .gradcheck import GRADCHECK_DIMS, NonDeterministicLossError, model_gradcheck
from .model import ModelStateError, SgrafModel
from .training import PairSet, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# config flags -----------------------------------------------------------

_CONFIG_ALIASES = {"m": ["--graph-dim"], "lam": ["--lambda"], "margin": ["--gamma"]}
_SKIP = {"vocab_size", "branches", "strategy"}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (flags override --config)")
    g.add_argument("--config", type=Path, help="key = value config file")
    g.add_argument("--profile", choices=("full", "toy"), default="full", help="base dimensions before --config")
    g.add_argument("--branch", choices=("sgr", "saf", "ave", "joint"), help="head(s) to build; joint = sgr + saf")
    g.add_argument("--strategy", choices=("joint", "split", "independent"), help="split is an alias of independent")
    for f in dataclasses.fields(RunConfig):
        if f.name in _SKIP:
            continue
        names = [f"--{f.name.replace('_', '-')}"] + _CONFIG_ALIASES.get(f.name, [])
        if "_" in f.name:
            names.append(f"--{f.name}")  # the config-file spelling
        g.add_argument(*names, dest=f"cfg_{f.name}", metavar=f.name.upper(), default=None)


def _build_config(args, **fixed) -> RunConfig:
    base = RunConfig(**TOY) if args.profile == "toy" else RunConfig()
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file {args.config} not found")
        base = load_config(args.config, base=base)
    values = base.to_dict()
    explicit = set()
    for name, default in values.items():
        raw = getattr(args, f"cfg_{name}", None)
        if raw is not None:
            values[name] = _coerce(name, raw, default)
            explicit.add(name)
    if args.branch is not None:
        values["branches"] = ("sgr", "saf") if args.branch == "joint" else (args.branch,)
    if args.strategy is not None:
        values["strategy"] = "independent" if args.strategy == "split" else args.strategy
    for name, value in fixed.items():
        if name in explicit and values[name] != value:
            raise DataError(f"--{name.replace('_', '-')}={values[name]} contradicts the data ({value})")
        values[name] = value
    return RunConfig(**values)


def _image_range(text: Optional[str], n: int):
    if text is None:
        return 0, n
    try:
        a, b = text.split(":")
        start = int(a) if a else 0
        stop = int(b) if b else n
    except ValueError as exc:
        raise UsageError(f"image range must look like START:STOP, got {text!r}") from exc
    if not 0 <= start < stop <= n:
        raise UsageError(f"image range {start}:{stop} outside 0:{n}")
    return start, stop


def _load_corpus(directory: Path):
    if not (directory / "features.sgrf").exists():
        raise DataError(f"no corpus at {directory} (features.sgrf missing)")
    return read_corpus(directory)


# commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(**{f.name: getattr(args, f.name) for f in dataclasses.fields(SyntheticSpec)})
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    corpus = generate_synthetic_corpus(spec)
    out = write_corpus(corpus, args.out if args.out is not None else data_dir())
    print(f"wrote {spec.pairs} pairs ({len(corpus.vocab)} tokens) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    bank, captions, vocab = _load_corpus(args.data)
    if vocab is None:
        raise DataError(f"{args.data} has no vocab.txt")
    config = _build_config(args, vocab_size=len(vocab), regions=bank.regions, d_raw=bank.d_raw)
    start, stop = _image_range(args.train_images, bank.n_images)
    data = PairSet.from_bank(bank, captions, start, stop)
    validation = None
    if args.val_images is not None:
        v0, v1 = _image_range(args.val_images, bank.n_images)
        validation = PairSet.from_bank(bank, captions, v0, v1)
    result = train(data, config, validation)
    args.out.mkdir(parents=True, exist_ok=True)
    for name, model in result.models.items():
        model.save(args.out / f"model-{name}.npz")
    result.write_log(args.out / "train_log.csv")
    (args.out / "config.txt").write_text(dump_config(config))
    last = result.log[-1]
    print(f"trained {', '.join(result.models)} for {last.epoch + 1} epochs, final loss {last.loss:.5f}; outputs in {args.out}")
    return EXIT_OK


def _model_scores(model: SgrafModel, data: PairSet, branch: Optional[str]) -> np.ndarray:
    if branch in (None, "joint"):
        return np.mean([model.score_array(data.features, data.captions, b) for b in model.branches], axis=0)
    if branch not in model.branches:
        raise UsageError(f"model has no {branch} head (has {', '.join(model.branches)})")
    return model.score_array(data.features, data.captions, branch)


def _format_table(title: str, recall) -> str:
    ks = [int(k.split("_r")[1]) for k in recall if k.startswith("i2t_r")]
    head = "".join(f"{'R@' + str(k):>8}" for k in ks)
    lines = [title, f"{'':<6}{head}"]
    for d in ("i2t", "t2i"):
        lines.append(f"{d:<6}" + "".join(f"{100 * recall[f'{d}_r{k}']:8.1f}" for k in ks))
    lines.append(f"rsum  {rsum(recall):8.1f}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    if args.fuse and len(args.models) != 2:
        raise UsageError("--fuse needs exactly two model paths (an SGR model and a SAF model)")
    if len(args.models) > 2:
        raise UsageError("eval takes one or two model paths")
    bank, captions, _ = _load_corpus(args.data)
    start, stop = _image_range(args.images, bank.n_images)
    data = PairSet.from_bank(bank, captions, start, stop)
    models = [_load_model(p) for p in args.models]
    runs = []
    if args.fuse:
        a, b = (_model_scores(m, data, None) for m in models)
        runs.append(("fused", fuse_scores(a, b)))
    else:
        for path, m in zip(args.models, models):
            runs.append((Path(path).stem, _model_scores(m, data, args.branch)))

    rows = []
    truth = data.captions_per_image()
    for title, scores in runs:
        if args.folds:
            size = len(truth) // args.folds
            if size < 1:
                raise UsageError(f"{args.folds} folds over {len(truth)} images leaves empty folds")
            recall, _ = fold_recall(scores, truth, args.folds, size, DEFAULT_KS)
            title = f"{title} ({args.folds}-fold mean, {size} images each)"
        else:
            recall = recall_at_k(scores, truth, DEFAULT_KS)
        print(_format_table(title, recall))
        rows.append({"epoch": "", "branch": title, "loss": "", **recall})
    if args.metrics is not None:
        write_metrics(rows, args.metrics)
    return EXIT_OK


def _load_model(path) -> SgrafModel:
    try:
        return SgrafModel.load(path)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load model {path}: {exc}") from exc


def cmd_inspect(args) -> int:
    bank, captions, vocab = _load_corpus(args.data)
    model = _load_model(args.model)
    image_of = bank.image_of_caption()
    records = []
    for pair in args.pairs:
        if not 0 <= pair < len(captions):
            raise UsageError(f"pair {pair} outside 0:{len(captions)}")
        records.append(inspect_pair(bank.features[image_of[pair]], captions[pair], model, vocab, pair))
    if args.out is None:
        for rec in records:
            print(rec.to_json())
    else:
        write_inspection(records, args.out)
        print(f"wrote {len(records)} inspection records to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = model_gradcheck(
        seed=args.seed, dims=args.dims, step=args.step, tolerance=args.tolerance, max_entries=args.max_entries
    )
    print(report.format())
    if not report.passed:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sgraf", description="Similarity graph reasoning and attention filtration for image-text matching.")
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1 keeps runs bit-reproducible)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    p.add_argument("--out", type=Path, default=None, help="corpus directory (default $SGRAF_DATA_DIR or .)")
    defaults = SyntheticSpec()
    for f in dataclasses.fields(SyntheticSpec):
        default = getattr(defaults, f.name)
        kind = {int: int, float: float}.get(type(default), int)
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind, default=default)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write it with its epoch log")
    p.add_argument("--data", type=Path, default=None, help="corpus directory (default $SGRAF_DATA_DIR or .)")
    p.add_argument("--out", type=Path, default=Path("run"), help="output directory")
    p.add_argument("--train-images", metavar="START:STOP", help="image range to train on (default all)")
    p.add_argument("--val-images", metavar="START:STOP", help="image range for snapshot selection")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print bidirectional Recall@K")
    p.add_argument("models", nargs="+", type=Path, help="one model, or two with --fuse")
    p.add_argument("--data", type=Path, default=None, help="corpus directory (default $SGRAF_DATA_DIR or .)")
    p.add_argument("--images", metavar="START:STOP", help="image range to evaluate (default all)")
    p.add_argument("--branch", choices=("sgr", "saf", "ave", "joint"), help="head of a joint model (default: average)")
    p.add_argument("--fuse", action="store_true", help="average the scores of two models")
    p.add_argument("--folds", type=int, default=0, help="average over F consecutive image folds")
    p.add_argument("--metrics", type=Path, help="also write the table as CSV")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; evaluation is deterministic")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="per-node SAF weights and SGR influence for chosen pairs")
    p.add_argument("model", type=Path)
    p.add_argument("--data", type=Path, default=None, help="corpus directory (default $SGRAF_DATA_DIR or .)")
    p.add_argument("--pairs", type=int, nargs="+", required=True, help="caption indices")
    p.add_argument("--out", type=Path, help="JSON-lines output (default stdout)")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; inspection is deterministic")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference check of the joint loss on a toy model")
    p.add_argument("--dims", choices=sorted(GRADCHECK_DIMS), default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--max-entries", type=int, default=None, help="sample at most this many entries per parameter")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "data", "") is None:
        args.data = data_dir()
    if args.threads < 1:
        print("sgraf: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"sgraf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FeatureBankError, ModelStateError, OSError, IndexError) as exc:
        print(f"sgraf: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonDeterministicLossError, FloatingPointError) as exc:
        print(f"sgraf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(run(argv))
