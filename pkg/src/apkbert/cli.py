"""Command-line entry point: ``apkbert <command> ...``.

Failures print a single ``error: <ErrorName>: <message>`` line on stderr and
exit 1; argument errors print usage and exit 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import clients
from .apk import decode_axml, read_manifest
from .errors import ApkBertError, BadConfig, NotManifestData
from .model import init_model, load_model, save_model
from .preprocess import (
    CATEGORIES,
    DatasetRecord,
    clean_text,
    default_config,
    read_dataset,
    split_train_test,
    synthesize_corpus,
    write_dataset,
)
from .tokenizer import Vocab, build_vocab
from .train import (
    TrainConfig,
    carve_validation,
    class_names,
    config_snapshot,
    evaluate,
    make_encoder_config,
    mlm_pretrain,
    predict,
    task_records,
    train,
)

MODEL_KEYS = {"n_layers": int, "hidden": int, "n_heads": int, "d_ff": int, "dropout": float}


def warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


# ---------------------------------------------------------------- config files

def _scalar(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text.strip("'\"")


def parse_keyvalue(text: str) -> dict:
    """``key = value`` lines; ``#`` comments and ``[section]`` headers are ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise BadConfig(f"config line {n}: expected key = value")
        out[key.strip()] = _scalar(value.strip())
    return out


def split_config(values: dict, task: str):
    """Separate TrainConfig fields from encoder-shape overrides."""
    train_kw, model_kw = {"task": task}, {}
    for key, value in values.items():
        if key == "lr":
            key = "learning_rate"
        if key in MODEL_KEYS:
            model_kw[key] = MODEL_KEYS[key](value)
        elif key in TrainConfig.field_names() and key != "task":
            train_kw[key] = value
        else:
            raise BadConfig(f"unknown config key {key!r}")
    try:
        return TrainConfig(**train_kw), model_kw
    except (TypeError, ValueError) as exc:
        raise BadConfig(str(exc)) from None


# ---------------------------------------------------------------- commands

def cmd_ingest(args):
    labels = {}
    with open(args.labels, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            labels[(row.get("hash") or row.get("sha256") or "").strip().lower()] = (
                row.get("verdict") or "",
                row.get("category") or None,
            )
    records = []
    files = sorted(p for p in Path(args.apk_dir).iterdir() if p.is_file())
    cleaning = default_config()
    for path in files:
        try:
            doc = read_manifest(path)
        except ApkBertError as exc:
            warn(f"skip {path.name}: {type(exc).__name__}: {exc}")
            continue
        verdict, category = labels.get(doc.apk_hash, (None, None))
        if verdict not in clients.VERDICTS:
            warn(f"skip {path.name}: no verdict for {doc.apk_hash}")
            continue
        label = int(verdict == "malware")
        records.append(DatasetRecord(doc.apk_hash, clean_text(doc.xml_text, cleaning), label,
                                     category if label else None))
    write_dataset(args.out, records)
    print(f"wrote {len(records)} records to {args.out} ({len(files) - len(records)} skipped)")


def cmd_synth(args):
    records = synthesize_corpus(args.per_class, noise_rate=args.noise, seed=args.seed)
    write_dataset(args.out, records)
    print(f"wrote {len(records)} records to {args.out}")


def cmd_split(args):
    tr, te = split_train_test(read_dataset(args.dataset), args.test_fraction, args.seed)
    write_dataset(args.train_out, tr)
    write_dataset(args.test_out, te)
    print(f"train {len(tr)} -> {args.train_out}, test {len(te)} -> {args.test_out}")


def cmd_build_vocab(args):
    vocab = build_vocab([r.text for r in read_dataset(args.dataset)], args.max_size, args.min_freq)
    vocab.save(args.out)
    print(f"wrote {len(vocab)} tokens to {args.out}")


def cmd_train(args):
    values = parse_keyvalue(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    for item in args.set or []:
        values.update(parse_keyvalue(item))
    config, model_kw = split_config(values, args.task)
    records = task_records(read_dataset(args.dataset), config.task)
    tr, va = carve_validation(records, config.val_fraction, config.seed)
    vocab = Vocab.load(args.vocab) if args.vocab else build_vocab([r.text for r in tr])
    mlm = config.mlm_pretrain_steps > 0
    model = init_model(make_encoder_config(vocab, config.task, config.max_seq_len, mlm_head=mlm, **model_kw),
                       config.seed)
    if mlm:
        mlm_pretrain(model, [r.text for r in tr], vocab, config.mlm_pretrain_steps, config.mask_rate,
                     batch_size=config.batch_size, max_seq_len=config.max_seq_len, seed=config.seed)
    model, history = train(model, tr, va, vocab, config)
    extra = {"task": config.task, "classes": list(class_names(config.task)), "train_config": config_snapshot(config)}
    save_model(args.out, model, vocab, args.vocab or "vocab.tsv", extra)
    if args.history:
        history.save(args.history)
    best = history.epochs[history.best_epoch - 1]
    print(f"{history.stopping_reason} after {len(history.epochs)} epochs; best epoch {history.best_epoch} "
          f"val_loss={best.val_loss:.4f} val_acc={best.val_acc:.4f}; saved {args.out}")


def _checkpoint_task(meta, requested):
    task = meta.get("task", requested)
    if requested and requested != task:
        raise BadConfig(f"checkpoint was trained for task {task!r}, not {requested!r}")
    return task


def cmd_eval(args):
    model, vocab, meta = load_model(args.model)
    task = _checkpoint_task(meta, args.task)
    records = task_records(read_dataset(args.dataset), task)
    report = evaluate(model, records, vocab, task)
    if args.report:
        Path(args.report).write_text(report.to_keyvalue(), encoding="utf-8")
    print(report.to_table(args.name))


def _manifest_text(arg: str, literal: bool) -> str:
    if literal:
        return arg
    raw = Path(arg).read_bytes()
    if raw[:4] == b"PK\x03\x04":
        return read_manifest(raw).xml_text
    try:
        return decode_axml(raw).xml_text
    except NotManifestData:
        return raw.decode("utf-8", errors="replace")


def cmd_predict(args):
    model, vocab, meta = load_model(args.model)
    task = _checkpoint_task(meta, args.task)
    names = meta.get("classes") or list(class_names(task))
    label, probs = predict(model, _manifest_text(args.input, args.text), vocab, task)
    print(f"label={label} ({names[label]})")
    for name, p in zip(names, probs):
        print(f"p[{name}]={p:.6f}")


def cmd_fetch(args):
    offline = args.offline_fixtures is not None
    config = clients.ClientConfig(
        base_url=args.base_url,
        credential_env=args.credential_env,
        rate_limit=args.rate_limit,
        offline=offline,
        fixture_dir=args.offline_fixtures,
        store_dir=args.store,
        workers=args.workers,
    )
    repo = clients.RepositoryClient(config)
    found = clients.fetch_sample_list(repo, clients.SampleFilter.parse(args.filter))
    rows = []
    if args.download:
        results = clients.download_many(repo, found)
    else:
        results = [(d, None, None) for d in found]
    scanner = clients.ScannerClient(config) if args.label else None
    aliases = clients.parse_aliases(Path(args.aliases).read_text(encoding="utf-8")) if args.aliases else None
    for d, path, err in results:
        if err is not None:
            warn(f"{d.sha256}: {type(err).__name__}: {err}")
        verdict, category = d.verdict, d.category
        if scanner is not None:
            try:
                verdict, category = clients.label_sample(scanner, d.sha256, aliases)
            except ApkBertError as exc:
                warn(f"{d.sha256}: {type(exc).__name__}: {exc}")
                verdict, category = None, None
        rows.append({"hash": d.sha256, "verdict": verdict or "", "category": category or "",
                     "filename": str(path) if path else (d.filename or ""), "date": d.date or ""})
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["hash", "verdict", "category", "filename", "date"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    print(f"listed {len(found)} samples -> {args.out}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="apkbert", description="Manifest-based Android malware classification")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="APK directory -> 4-column dataset CSV")
    s.add_argument("apk_dir")
    s.add_argument("--out", required=True)
    s.add_argument("--labels", required=True, help="CSV with hash,verdict,category")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", help="write the synthetic separable corpus")
    s.add_argument("--per-class", type=int, required=True)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="stratified train/test split")
    s.add_argument("dataset")
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train-out", required=True)
    s.add_argument("--test-out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("build-vocab", help="word-level vocabulary from a dataset")
    s.add_argument("dataset")
    s.add_argument("--max-size", type=int, default=30000)
    s.add_argument("--min-freq", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_vocab)

    s = sub.add_parser("train", help="fine-tune a classifier")
    s.add_argument("dataset")
    s.add_argument("--task", choices=["binary", "multi"], required=True)
    s.add_argument("--config", help="key = value file (TrainConfig fields and encoder shape)")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    s.add_argument("--vocab", help="vocabulary file; built from the training split if omitted")
    s.add_argument("--out", required=True)
    s.add_argument("--history")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    s.add_argument("dataset")
    s.add_argument("model")
    s.add_argument("--task", choices=["binary", "multi"])
    s.add_argument("--report", help="write the key-value report here")
    s.add_argument("--name", default="BERT", help="row label in the printed table")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="classify one APK, manifest or text")
    s.add_argument("input")
    s.add_argument("model")
    s.add_argument("--task", choices=["binary", "multi"])
    s.add_argument("--text", action="store_true", help="treat INPUT as literal manifest text")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("fetch", help="list (and optionally download and label) corpus samples")
    s.add_argument("--filter", help="e.g. verdict=malware,date_from=2021-01-01")
    s.add_argument("--offline-fixtures", metavar="DIR")
    s.add_argument("--base-url")
    s.add_argument("--credential-env", metavar="VAR", help="environment variable holding the API key")
    s.add_argument("--rate-limit", type=float, default=240.0, help="requests per minute")
    s.add_argument("--workers", type=int, default=4)
    s.add_argument("--store", default="samples")
    s.add_argument("--download", action="store_true")
    s.add_argument("--label", action="store_true", help="re-label every sample with the scanner")
    s.add_argument("--aliases", help="category alias table (default: the bundled one)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fetch)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ApkBertError, OSError, ValueError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
