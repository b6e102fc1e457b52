"""``fnfm`` command-line entry point.

Every subcommand resolves its configuration (defaults < ``--profile`` <
``--seed`` < ``--set``), writes it to ``<out>/resolved_config.json`` and then
calls one harness or model-store operation. Exit codes: 0 success, 2
configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import store
from .data import (DATA_MAGIC, Dataset, encode_features, encode_rows, infer_schema, load_dataset,
                   read_csv, read_header, save_dataset, split_by_day, subsample)
from .errors import ConfigError, DataError, NumericError, SchemaError
from .harness import (GRAD_TOLERANCE, ablate_batchnorm, ablate_interaction_layer,
                      check_model_gradients, compare_models, evaluate, gen_synthetic,
                      save_leaderboard, std_spread, toy_twin, train, write_curves_csv, write_std_csv)
from .models import KINDS, ModelSpec
from .nn import sigmoid

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUTPUT_ENV = "FNFM_OUTPUT_DIR"
DEFAULT_OUTPUT = "fnfm_out"


# -- data plumbing --------------------------------------------------------------

def _is_cache(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(len(DATA_MAGIC)) == DATA_MAGIC


def _csv_schema(cfg, path):
    d = cfg["data"]
    return infer_schema(read_header(path), d["kind_hints"], d["hash_buckets"], label_column=d["label_column"],
                        ignore_columns=d["ignore_columns"], hash_seed=d["hash_seed"])


def load_split(path, schema=None, split="") -> Dataset:
    """A labelled dataset from an encoded cache or a CSV (encoded with ``schema``)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if _is_cache(path):
        ds = load_dataset(path)
        if schema is not None and ds.schema != schema:
            raise SchemaError(f"{path}: encoded with a different schema")
        return ds
    if schema is None:
        raise ConfigError(f"{path}: a CSV needs a schema (from the training data or the model)")
    return encode_rows(schema, read_csv(path), source=str(path), split=split or path.stem)


def _labelled_splits(cfg, need_test=False):
    d = cfg["data"]
    if not d["train"] or not d["validation"]:
        raise ConfigError("training needs --train and --validation (or --synthetic)")
    train_path = Path(d["train"])
    if not train_path.exists():
        raise DataError(f"{train_path}: no such file")
    schema = None if _is_cache(train_path) else _csv_schema(cfg, train_path)
    train_ds = load_split(train_path, schema, "train")
    val_ds = load_split(d["validation"], train_ds.schema, "validation")
    test_ds = load_split(d["test"], train_ds.schema, "test") if d["test"] else None
    if need_test and test_ds is None:
        raise ConfigError("this command needs --test")
    return train_ds, val_ds, test_ds


def _splits(cfg, args, need_test=False):
    if getattr(args, "synthetic", False):
        data = gen_synthetic(cfgmod.synthetic_spec(cfg))
        return data.train, data.validation, data.test
    return _labelled_splits(cfg, need_test)


# -- subcommands ----------------------------------------------------------------

def cmd_prep(cfg, args, out):
    d = cfg["data"]
    if not d["train"]:
        raise ConfigError("prep needs --train pointing at the raw CSV")
    path = Path(d["train"])
    if not path.exists():
        raise DataError(f"{path}: no such file")
    schema = _csv_schema(cfg, path)
    rows = subsample(read_csv(path), d["subsample"], cfg["train"]["seed"])
    splits = split_by_day(rows, schema, d["day_column"], d["last_day_val_fraction"],
                          seed=cfg["train"]["seed"], source=str(path))
    summary = {"schema": schema.to_dict(), "rejected": splits[0].rejected, "splits": {}}
    for ds in splits:
        save_dataset(ds, out / f"{ds.split}.fnfmdata")
        summary["splits"][ds.split] = {"rows": len(ds), "positives": ds.n_pos, "days": ds.meta.get("days")}
    (out / "prep_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary["splits"]))


def cmd_synth(cfg, args, out):
    spec = cfgmod.synthetic_spec(cfg)
    data = gen_synthetic(spec)
    for ds in data.splits:
        save_dataset(ds, out / f"{ds.split}.fnfmdata")
    summary = {"splits": {ds.split: {"rows": len(ds), "positives": ds.n_pos} for ds in data.splits},
               "bayes_logloss": data.truth.bayes_logloss}
    (out / "synth_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


def cmd_train(cfg, args, out):
    tc = cfgmod.train_config(cfg)
    train_ds, val_ds, test_ds = _splits(cfg, args)
    report, model = train(tc, train_ds, val_ds, test_ds)
    report.write(out)
    write_curves_csv(out / "curves.csv", [report])
    store.save(model, out / "model.fnfm")
    print(json.dumps({"best_epoch": report.best_epoch, "best_val_logloss": report.best_val_loss,
                      "test": report.test}))


def _model_arg(args):
    if not args.model:
        raise ConfigError("--model is required")
    if not Path(args.model).exists():
        raise DataError(f"{args.model}: no such model file")
    return store.load(args.model)


def cmd_eval(cfg, args, out):
    model = _model_arg(args)
    path = args.data or cfg["data"]["test"]
    if not path:
        raise ConfigError("eval needs --data (or --test)")
    ds = load_split(path, model.schema)
    report = evaluate(model, ds, model.spec.kind)
    text = report.to_json()
    (out / f"eval_{ds.split or 'data'}.json").write_text(text + "\n")
    print(text)


def cmd_predict(cfg, args, out):
    model = _model_arg(args)
    if not args.input:
        raise ConfigError("predict needs --input")
    path = Path(args.input)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    feats = []
    for lineno, raw in enumerate(read_csv(path), start=2):
        try:
            feats.append(encode_features(model.schema, raw))
        except DataError as exc:
            raise type(exc)(f"{path}:{lineno}: {exc}") from None
    f = model.schema.num_fields
    idx = np.array([[s.feature_index for s in row] for row in feats], dtype=np.int64).reshape(-1, f)
    val = np.array([[s.value for s in row] for row in feats], dtype=np.float64).reshape(-1, f)
    probs = sigmoid(model.forward(idx, val)) if len(feats) else np.empty(0)
    target = Path(args.output) if args.output else out / "predictions.txt"
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text("".join(f"{p!r}\n" for p in np.atleast_1d(probs).tolist()))
    print(f"wrote {len(feats)} predictions to {target}")


def gradcheck_specs(base: ModelSpec, kinds):
    """Toy-size spec per requested kind; neural kinds are checked with and without BN."""
    for kind in kinds:
        spec = toy_twin(replace(base, kind=kind, hidden_layout=base.hidden_layout or (4,)))
        if spec.has_mlp:
            yield f"{kind}-bn", replace(spec, use_batchnorm=True)
            yield f"{kind}-nobn", replace(spec, use_batchnorm=False)
        else:
            yield kind, spec


def cmd_gradcheck(cfg, args, out):
    base = cfgmod.train_config(cfg).model
    kinds = args.kinds.split(",") if args.kinds else KINDS
    results, ok = {}, True
    for label, spec in gradcheck_specs(base, kinds):
        rep = check_model_gradients(spec, seed=cfg["train"]["seed"])
        passed = rep.passed(args.tolerance)
        ok &= passed
        results[label] = {"passed": passed, "max_error": rep.max_error, "errors": rep.errors,
                          "failure": rep.failure}
        print(f"{label:<12} {'PASS' if passed else 'FAIL'}  max rel err {rep.max_error:.3e}")
        if not passed:
            print(rep.format())
    (out / "gradcheck.json").write_text(json.dumps(results, indent=2) + "\n")
    if not ok:
        raise NumericError(f"gradient check exceeded tolerance {args.tolerance:g}")


def cmd_ablate_concat(cfg, args, out):
    tc = cfgmod.train_config(cfg)
    concat, pool = ablate_interaction_layer(tc, *_splits(cfg, args))
    for rep, stem in ((concat, "concat"), (pool, "pool")):
        rep.write(out, stem)
    write_curves_csv(out / "curves.csv", [concat, pool])
    summary = {"concat_best_val_logloss": concat.best_val_loss, "pool_best_val_logloss": pool.best_val_loss,
               "concat_wins": concat.best_val_loss <= pool.best_val_loss}
    (out / "ablate_concat.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


def cmd_ablate_bn(cfg, args, out):
    tc = cfgmod.train_config(cfg)
    bn, nobn = ablate_batchnorm(tc, *_splits(cfg, args))
    for rep, stem in ((bn, "bn"), (nobn, "nobn")):
        rep.write(out, stem)
    write_curves_csv(out / "curves.csv", [bn, nobn])
    write_std_csv(out / "std.csv", [bn, nobn])
    last_bn, last_nobn = bn.epochs[-1], nobn.epochs[-1]
    summary = {
        "bn_train_loss": bn.curve("train_loss").tolist(),
        "nobn_train_loss": nobn.curve("train_loss").tolist(),
        "bn_std_spread_last_epoch": std_spread(last_bn.mlp_input_std_bn),
        "nobn_std_spread_last_epoch": std_spread(last_nobn.mlp_input_std),
    }
    (out / "ablate_bn.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


def cmd_compare(cfg, args, out):
    grid = cfgmod.grid_config(cfg)
    board = compare_models(grid, cfgmod.train_config(cfg), *_splits(cfg, args, need_test=True))
    save_leaderboard(board, out / "leaderboard.json")
    with open(out / "leaderboard.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "embedding_dim", "hidden_layout", "val_logloss", "test_logloss", "test_auc"])
        for row in board["leaderboard"]:
            hp = row["hyperparams"]
            w.writerow([row["model"], hp["embedding_dim"], "x".join(map(str, hp["hidden_layout"])),
                        repr(row["val_logloss"]), repr(row["test_logloss"]), repr(row["test_auc"])])
    for row in board["leaderboard"]:
        print(f"{row['model']:<7} val {row['val_logloss']:.5f}  test {row['test_logloss']:.5f}  "
              f"auc {row['test_auc']:.4f}")


COMMANDS = {
    "prep": (cmd_prep, "encode and split a raw CSV into train/validation/test caches"),
    "synth": (cmd_synth, "write seeded synthetic field-aware data as encoded caches"),
    "train": (cmd_train, "train one model; writes the model file and per-epoch report"),
    "eval": (cmd_eval, "score a labelled dataset with a saved model"),
    "predict": (cmd_predict, "write one click probability per CSV row"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient check on a toy schema"),
    "ablate-concat": (cmd_ablate_concat, "FNFM with concatenated vs pooled pair products"),
    "ablate-bn": (cmd_ablate_bn, "FNFM with vs without batch normalization"),
    "compare": (cmd_compare, "grid-search every model kind and write a leaderboard"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--profile", "--config", dest="profile",
                        help="shipped profile name (ablation, comparison, desk) or path to a profile file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, e.g. train.batch_size=1024 (repeatable)")
    common.add_argument("--seed", type=int, help="sets train.seed, train.shuffle_seed and synthetic.seed")
    common.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
    common.add_argument("--train", help="training data: raw CSV or encoded cache")
    common.add_argument("--validation", help="validation data: CSV or encoded cache")
    common.add_argument("--test", help="test data: CSV or encoded cache")
    common.add_argument("--synthetic", action="store_true", help="use synthetic data from the 'synthetic' section")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fnfm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name in ("eval", "predict"):
            p.add_argument("--model", help="model file written by `train`")
        if name == "eval":
            p.add_argument("--data", help="labelled CSV or encoded cache to score")
        if name == "predict":
            p.add_argument("--input", help="CSV to score (label column optional)")
            p.add_argument("--output", help="destination file (default <out>/predictions.txt)")
        if name == "gradcheck":
            p.add_argument("--kinds", help="comma-separated model kinds (default: all)")
            p.add_argument("--tolerance", type=float, default=GRAD_TOLERANCE)
    return parser


def _overrides(args) -> list:
    items = []
    if args.seed is not None:
        items += [f"train.seed={args.seed}", f"train.shuffle_seed={args.seed}", f"synthetic.seed={args.seed}"]
    for key in ("train", "validation", "test"):
        value = getattr(args, key)
        if value:
            items.append(f"data.{key}={json.dumps(value)}")
    return items + list(args.overrides)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler, _ = COMMANDS[args.command]
    try:
        cfg = cfgmod.resolve(args.profile, _overrides(args))
        out = Path(args.out or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)
        cfgmod.write_resolved({"command": args.command, **cfg}, out)
        handler(cfg, args, out)
    except ConfigError as exc:
        print(f"fnfm: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"fnfm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"fnfm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
