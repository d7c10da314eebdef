"""Command-line driver: synthesize data, extract features, train, evaluate.

Every subcommand accepts ``--config FILE`` holding a JSON object whose keys
are the subcommand's long option names (dashes or underscores).  Explicit
flags win over the file, which wins over built-in defaults.  Failures print
one tab-separated line ``error<TAB>subcommand<TAB>CODE<TAB>message`` to
stderr and exit with status 1.
"""

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import labels as lab
from .errors import ConfigError, GluCtcError
from .features import FeatureConfig, log_mel, read_fmat, read_wav, write_fmat
from .metrics import EvalRecord, dump_frame_trace, report
from .synth import PRESETS, class_table, generate_dataset
from .trainer import TrainConfig, TrainedModel, labels_for_head, predict_tags, train

log = logging.getLogger("glu_ctc")

CLASSES_FILE = "classes.txt"
DATASET_FILE = "dataset.json"
FEATURES_FILE = "features.json"


class _Options:
    """Registers options with a ``None`` default and remembers the real one."""

    def __init__(self, parser):
        self.parser = parser
        self.defaults = {}
        self.required = {}

    def add(self, *flags, default=None, required=False, **kw):
        action = self.parser.add_argument(*flags, default=None, **kw)
        self.defaults[action.dest] = default
        if required:
            self.required[action.dest] = flags[0]
            action.help = f"{kw['help']} (required, flag or config)"
        elif default is not None:
            action.help = f"{kw['help']} (default: {default})"
        return action


def _resolve(args, defaults):
    config = {}
    if args.config:
        try:
            config = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(config, dict):
            raise ConfigError("config file must hold a JSON object")
        config = {k.replace("-", "_"): v for k, v in config.items()}
        unknown = sorted(set(config) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for dest, default in defaults.items():
        if getattr(args, dest) is None:
            setattr(args, dest, config.get(dest, default))
    return args


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise ConfigError(f"path does not exist: {p}")


def _split_dirs(data, splits):
    data = Path(data)
    if splits:
        return [data / s for s in splits]
    return [d for d in (data / "train", data / "test") if d.is_dir()]


def _feature_config(data_dir):
    path = Path(data_dir) / DATASET_FILE
    if not path.exists():
        return FeatureConfig()
    meta = json.loads(path.read_text(encoding="utf-8"))
    return FeatureConfig(**meta.get("features", {}))


def _features_for(wav_path, cfg):
    samples, rate = read_wav(wav_path)
    if rate != cfg.sample_rate:
        cfg = replace(cfg, sample_rate=rate)
    return log_mel(samples, cfg).astype(np.float32)


def _extract_one(job):
    wav_path, out_path, cfg = job
    write_fmat(out_path, _features_for(wav_path, cfg))
    return out_path


def load_split(split_dir, table, cfg):
    """``(clip_ids, features, sequential labels)`` for one split, in label-file order.

    Cached FMAT features are used when present; otherwise features are
    computed from the WAVs.
    """
    split_dir = Path(split_dir)
    records = lab.read_sequential_file(split_dir / "sequential.tsv", table)
    ids, feats, seqs = [], [], []
    for clip_id, seq in records:
        cached = split_dir / "features" / f"{clip_id}.fmat"
        if cached.exists():
            x = read_fmat(cached)
        else:
            x = _features_for(split_dir / "audio" / f"{clip_id}.wav", cfg)
        ids.append(clip_id)
        feats.append(x)
        seqs.append(seq)
    return ids, feats, seqs


# -- subcommands --------------------------------------------------------------

def cmd_synth(args):
    spec, templates = PRESETS[args.preset]
    spec = replace(spec, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = class_table(templates)
    table.to_file(out / CLASSES_FILE)
    meta = {"preset": args.preset, "seed": args.seed,
            "features": {"sample_rate": spec.sample_rate}}
    (out / DATASET_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")
    for split, n in (("train", args.n_train), ("test", args.n_test)):
        if n > 0:
            generate_dataset(out / split, spec, templates, n, args.seed, prefix=split,
                             workers=args.workers)
    print(f"wrote {args.n_train} train and {args.n_test} test clips to {out}")


def cmd_features(args):
    _require(args.data)
    cfg = _feature_config(args.data)
    jobs = []
    for split_dir in _split_dirs(args.data, args.splits):
        _require(split_dir / "audio")
        (split_dir / "features").mkdir(exist_ok=True)
        for wav in sorted((split_dir / "audio").glob("*.wav")):
            jobs.append((wav, split_dir / "features" / f"{wav.stem}.fmat", cfg))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            list(pool.map(_extract_one, jobs))
    else:
        for job in jobs:
            _extract_one(job)
    print(f"wrote {len(jobs)} feature files")


def cmd_train(args):
    split_dir = Path(args.data) / args.split
    _require(args.data, split_dir, Path(args.data) / CLASSES_FILE)
    table = lab.ClassTable.from_file(Path(args.data) / CLASSES_FILE)
    fcfg = _feature_config(args.data)
    _, feats, seqs = load_split(split_dir, table, fcfg)
    cfg = TrainConfig(head=args.head, gating=args.gating, max_epochs=args.max_epochs, lr=args.lr,
                      batch_size=args.batch_size, patience=args.patience,
                      val_fraction=args.val_fraction, seed=args.seed)
    model, history = train(list(zip(feats, labels_for_head(seqs, args.head))), len(table), cfg)
    out = Path(args.out)
    model.save(out)
    table.to_file(out / CLASSES_FILE)
    (out / FEATURES_FILE).write_text(json.dumps(fcfg.to_dict(), sort_keys=True) + "\n",
                                     encoding="utf-8")
    history.to_csv(out / "train_log.csv")
    print(f"stopped at epoch {history.stop_epoch} ({history.stop_reason}); "
          f"best epoch {history.best_epoch}; checkpoint in {out}")


def _load_model(checkpoint):
    _require(checkpoint, Path(checkpoint) / CLASSES_FILE)
    model = TrainedModel.load(checkpoint)
    table = lab.ClassTable.from_file(Path(checkpoint) / CLASSES_FILE)
    return model, table


def cmd_evaluate(args):
    split_dir = Path(args.data) / args.split
    _require(split_dir)
    model, table = _load_model(args.checkpoint)
    ids, feats, seqs = load_split(split_dir, table, _feature_config(args.data))
    preds = predict_tags(feats, model)
    records = [EvalRecord(i, p.scores, p.tags, lab.weak_from_sequential(s))
               for i, p, s in zip(ids, preds, seqs)]
    rep = report(records, table)
    title = f"{model.config.gating.upper()}-{model.config.head.upper()} on {args.split} " \
            f"({len(records)} clips), macro-averaged over classes"
    text = rep.to_text(title)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.with_suffix(".csv").write_text(rep.to_csv(), encoding="utf-8")
        out.with_suffix(".txt").write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_decode(args):
    split_dir = Path(args.data) / args.split
    _require(split_dir)
    model, table = _load_model(args.checkpoint)
    ids, feats, _ = load_split(split_dir, table, _feature_config(args.data))
    preds = predict_tags(feats, model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if model.config.head == "ctc":
        lab.write_sequential_file(out, [(i, p.decode) for i, p in zip(ids, preds)], table)
    else:
        # pooled heads have no token order; write their tag sets instead
        lab.write_weak_file(out, [(i, p.tags) for i, p in zip(ids, preds)], table)
    print(f"wrote {len(ids)} predictions to {out}")


def cmd_convert_labels(args):
    _require(args.input, args.classes)
    table = lab.ClassTable.from_file(args.classes)
    if args.from_ == "strong":
        records = [(cid, lab.sequential_from_strong(strong, table))
                   for cid, strong in lab.read_strong_file(args.input, table)]
    elif args.from_ == "sequential":
        if args.to == "sequential":
            raise ConfigError("sequential labels carry no timestamps; cannot convert to themselves")
        records = lab.read_sequential_file(args.input, table)
        for cid, seq in records:
            problems = lab.validate(seq, table)
            if problems:
                raise lab.LabelParseError(0, f"{cid}: {problems[0]}")
    else:
        raise ConfigError(f"cannot convert from {args.from_!r}")
    if args.to == "sequential":
        lab.write_sequential_file(args.out, records, table)
    else:
        lab.write_weak_file(args.out, [(cid, lab.weak_from_sequential(s)) for cid, s in records],
                            table)
    print(f"wrote {len(records)} {args.to} labels to {args.out}")


def cmd_dump_trace(args):
    _require(args.input)
    model, table = _load_model(args.checkpoint)
    path = Path(args.input)
    if path.suffix == ".fmat":
        x = read_fmat(path)
    else:
        feat_path = Path(args.checkpoint) / FEATURES_FILE
        cfg = FeatureConfig(**json.loads(feat_path.read_text())) if feat_path.exists() \
            else FeatureConfig()
        x = _features_for(path, cfg)
    pred = predict_tags(x, model)
    names = table.token_names() if model.config.head == "ctc" else table.names
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    csv_path, spark_path = dump_frame_trace(pred.trace, out.with_suffix(".csv"), names)
    print(spark_path.read_text(encoding="utf-8"), end="")
    if model.config.head == "ctc":
        print("decode:", lab.format_tokens(pred.decode, table) or "(empty)")
    print("tags:", " ".join(table.names[k] for k in sorted(pred.tags)) or "(none)")


# -- parser -------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="glu-ctc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    subs = parser.add_subparsers(dest="command", required=True)
    registry = {}

    def sub(name, func, help_):
        p = subs.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="JSON file of option values")
        p.set_defaults(func=func)
        opts = _Options(p)
        registry[name] = opts
        return opts

    o = sub("synth", cmd_synth, "generate a synthetic train/test dataset")
    o.add("--out", required=True, help="dataset directory to create")
    o.add("--preset", choices=sorted(PRESETS), default="desk", help="class and clip preset")
    o.add("--seed", type=int, default=0, help="generation seed")
    o.add("--n-train", type=int, default=400, help="training clips")
    o.add("--n-test", type=int, default=100, help="test clips")
    o.add("--workers", type=int, default=1, help="parallel generation processes")

    o = sub("features", cmd_features, "extract log-mel FMAT features for each split")
    o.add("--data", required=True, help="dataset directory")
    o.add("--splits", nargs="*", help="splits to process (default: train and test)")
    o.add("--workers", type=int, default=1, help="parallel extraction processes")

    o = sub("train", cmd_train, "train one tagger and write a checkpoint")
    o.add("--data", required=True, help="dataset directory")
    o.add("--split", default="train", help="split to train on")
    o.add("--out", required=True, help="checkpoint directory")
    o.add("--head", choices=["ctc", "gmp", "gap"], default="ctc", help="output head")
    o.add("--gating", choices=["glu", "relu"], default="glu", help="conv activation")
    o.add("--max-epochs", type=int, default=200, help="epoch limit")
    o.add("--patience", type=int, default=10, help="early-stopping patience in epochs")
    o.add("--batch-size", type=int, default=16, help="clips per update")
    o.add("--lr", type=float, default=0.001, help="Adam learning rate")
    o.add("--val-fraction", type=float, default=0.2, help="share of clips held out")
    o.add("--seed", type=int, default=0, help="initialization/shuffle seed")

    o = sub("evaluate", cmd_evaluate, "score a checkpoint on a split (per-class and average)")
    o.add("--data", required=True, help="dataset directory")
    o.add("--split", default="test", help="split to evaluate")
    o.add("--checkpoint", required=True, help="checkpoint directory")
    o.add("--out", help="report path prefix; writes .csv and .txt")

    o = sub("decode", cmd_decode, "write predicted label sequences for a split")
    o.add("--data", required=True, help="dataset directory")
    o.add("--split", default="test", help="split to decode")
    o.add("--checkpoint", required=True, help="checkpoint directory")
    o.add("--out", required=True, help="output label file")

    o = sub("convert-labels", cmd_convert_labels, "convert strong -> sequential -> weak labels")
    o.add("--input", required=True, help="input label file")
    o.add("--from", dest="from_", choices=["strong", "sequential"], default="strong",
          help="input label kind")
    o.add("--to", choices=["sequential", "weak"], default="sequential", help="output label kind")
    o.add("--classes", required=True, help="class list file, one name per line")
    o.add("--out", required=True, help="output label file")

    o = sub("dump-trace", cmd_dump_trace, "dump a clip's frame-level predictions as CSV + sparklines")
    o.add("--checkpoint", required=True, help="checkpoint directory")
    o.add("--input", required=True, help="WAV or FMAT file")
    o.add("--out", required=True, help="output path prefix")

    return parser, registry


def main(argv=None):
    parser, registry = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    opts = registry[args.command]
    try:
        _resolve(args, opts.defaults)
        missing = [flag for dest, flag in opts.required.items() if getattr(args, dest) is None]
        if missing:
            raise ConfigError(f"missing required option(s): {', '.join(missing)}")
        args.func(args)
    except GluCtcError as exc:
        return _fail(args.command, exc.code, exc)
    except (OSError, ValueError) as exc:
        code = "IO" if isinstance(exc, OSError) else "INVALID"
        return _fail(args.command, code, exc)
    return 0


def _fail(command, code, exc):
    message = " ".join(str(exc).split())
    print(f"error\t{command}\t{code}\t{message}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
