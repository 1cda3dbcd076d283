"""Command line interface.

Subcommands: tokenize (train/encode/decode), synth, train, forecast,
embed, probe, eval.  Every run takes --seed, emits machine-readable
JSON-lines (human tables only with --pretty), and writes a run manifest
next to its primary output.  Exit codes: 0 ok, 2 config error, 3 data
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

import numpy as np

from . import bpe, checkpoint, codec, config as cfgmod, data, inference, losses, metrics
from . import model as M
from . import synth, training
from .errors import ConfigError, DataError, NumericError
from .optim import Schedule


def _read_jsonl(path: str) -> list[dict]:
    records = []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: invalid JSON") from exc
    except FileNotFoundError as exc:
        raise DataError(f"input not found: {path}") from exc
    return records


def _write_jsonl(path: str, records) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


def _maybe_echo(args, payload: dict) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload))
    elif getattr(args, "pretty", False):
        for key, value in payload.items():
            print(f"{key:>24}: {value}")


# -- tokenize ----------------------------------------------------------------

def cmd_tokenize_train(args) -> int:
    docs = []
    for path in args.input:
        try:
            with open(path, "rb") as fh:
                docs.append(fh.read())
        except FileNotFoundError as exc:
            raise DataError(f"input not found: {path}") from exc
    manifest = cfgmod.ManifestWriter("tokenize train",
                                     {"input": args.input, "vocab_size": args.vocab_size},
                                     args.seed)
    vocab = bpe.bpe_train(docs, args.vocab_size)
    bpe.save_vocab(vocab, args.out)
    manifest.add_output(args.out)
    manifest.finish()
    _maybe_echo(args, {"vocab_size": vocab.size, "merges": len(vocab.merges), "out": args.out})
    return 0


def cmd_tokenize_encode(args) -> int:
    vocab = bpe.load_vocab(args.vocab)
    with open(args.input, "rb") as fh:
        ids = bpe.encode(fh.read(), vocab)
    manifest = cfgmod.ManifestWriter("tokenize encode", {"vocab": args.vocab}, args.seed)
    with open(args.out, "w") as fh:
        json.dump({"ids": ids}, fh)
    manifest.add_output(args.out)
    manifest.finish()
    _maybe_echo(args, {"n_tokens": len(ids), "out": args.out})
    return 0


def cmd_tokenize_decode(args) -> int:
    vocab = bpe.load_vocab(args.vocab)
    with open(args.input) as fh:
        ids = json.load(fh)["ids"]
    manifest = cfgmod.ManifestWriter("tokenize decode", {"vocab": args.vocab}, args.seed)
    with open(args.out, "wb") as fh:
        fh.write(bpe.decode(ids, vocab))
    manifest.add_output(args.out)
    manifest.finish()
    _maybe_echo(args, {"n_tokens": len(ids), "out": args.out})
    return 0


# -- synth ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    manifest = cfgmod.ManifestWriter(
        "synth generate",
        {"n": args.n, "len": args.len, "force_kernel": args.force_kernel}, args.seed)
    rng = np.random.default_rng(args.seed)
    series_list = []
    for i in range(args.n):
        values = synth.sample_series(args.len, rng, force_kernel=args.force_kernel)
        series_list.append(codec.RawSeries(values, series_id=f"synth-{i:05d}"))
    codec.write_series_jsonl(args.out, series_list)
    manifest.add_output(args.out)
    manifest.finish()
    _maybe_echo(args, {"n": args.n, "len": args.len, "out": args.out})
    return 0


# -- train -------------------------------------------------------------------------

def _text_stream_from(paths, vocab) -> data.TokenStream:
    docs = []
    for path in paths:
        try:
            with open(path, "rb") as fh:
                docs.append(fh.read())
        except FileNotFoundError as exc:
            raise DataError(f"text corpus not found: {path}") from exc
    return data.TokenStream(data.pack_documents(docs, vocab))


def _build_sources(run: cfgmod.RunConfig) -> training.DataSources:
    if not run.data.vocab:
        raise ConfigError("[data] vocab path is required for training")
    vocab = bpe.load_vocab(run.data.vocab)
    text_stream = _text_stream_from(run.data.text, vocab) if run.data.text else None
    if run.data.series:
        file_series = list(codec.read_series_jsonl(run.data.series))
        ts_source = training.mixed_ts_source(file_series, run.data.synth_length,
                                             run.data.synthetic_batch_prob)
    else:
        ts_source = training.synthetic_ts_source(run.data.synth_length)
    return training.DataSources(
        text_stream=text_stream,
        ts_source=ts_source,
        alignment_source=training.synthetic_alignment_source(run.data.align_length),
        vocab=vocab,
    )


def cmd_train(args) -> int:
    run = cfgmod.load_run_config(args.config)
    manifest = cfgmod.ManifestWriter("train", run, args.seed)
    sources = _build_sources(run)
    os.makedirs(run.data.out_dir, exist_ok=True)

    total = run.stage1.total_steps + (run.stage2.total_steps if run.stage2 else 0)
    schedule = Schedule(total_steps=total)

    if args.resume:
        trainer = training.Trainer.load(args.resume, sources)
        if trainer.config != run.model:
            raise ConfigError("checkpoint model config does not match the run config")
    else:
        trainer = training.Trainer(run.model, seed=args.seed)

    metrics_path = os.path.join(run.data.out_dir, "metrics.jsonl")
    sink = training.jsonl_sink(metrics_path)
    outputs = [metrics_path]
    try:
        if args.stage in ("1", "all") and trainer.step < run.stage1.total_steps:
            ckpt_path = os.path.join(run.data.out_dir, "stage1.ckpt")
            trainer.run_stage(run.stage1, sources, schedule, sink, ckpt_path)
            outputs.append(ckpt_path)
        if run.stage2 and args.stage in ("2", "all"):
            ckpt_path = os.path.join(run.data.out_dir, "stage2.ckpt")
            trainer.run_stage(run.stage2, sources, schedule, sink, ckpt_path)
            outputs.append(ckpt_path)
    finally:
        sink.close()
    for path in outputs:
        manifest.add_output(path)
    manifest.finish(os.path.join(run.data.out_dir, "manifest.json"))
    _maybe_echo(args, {"steps": trainer.step, "out_dir": run.data.out_dir})
    return 0


# -- forecast / embed --------------------------------------------------------------

def _load_model(path: str):
    try:
        config, tensors, extra = checkpoint.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    params = checkpoint.tensors_to_params(
        {k: v for k, v in tensors.items() if k.startswith("param.")}, "param.")
    missing = set(M.param_shapes(config)) - set(params)
    if missing:
        raise DataError(f"checkpoint missing tensors: {sorted(missing)[:4]}")
    return config, params


def cmd_forecast(args) -> int:
    config, params = _load_model(args.ckpt)
    text_ids: list[int] = []
    if args.text:
        if not args.vocab:
            raise ConfigError("--text requires --vocab for tokenization")
        vocab = bpe.load_vocab(args.vocab)
        with open(args.text, "rb") as fh:
            text_ids = bpe.encode(fh.read(), vocab) + [vocab.specials["<|ts_begin|>"]]
    manifest = cfgmod.ManifestWriter(
        "forecast", {"ckpt": args.ckpt, "horizon": args.horizon}, args.seed)
    records = []
    for series in codec.read_series_jsonl(args.input):
        results = inference.forecast_series(params, config, series, args.horizon, text_ids)
        for channel, result in enumerate(results):
            records.append({
                "id": series.series_id,
                "channel": channel,
                "quantiles": result.quantiles.tolist(),
                "median": result.median.tolist(),
            })
    _write_jsonl(args.out, records)
    manifest.add_output(args.out)
    manifest.finish()
    _maybe_echo(args, {"n_series": len(records), "out": args.out})
    return 0


def cmd_embed(args) -> int:
    config, params = _load_model(args.ckpt)
    manifest = cfgmod.ManifestWriter(
        "embed", {"ckpt": args.ckpt, "repeat": args.repeat}, args.seed)
    records = []
    for series in codec.read_series_jsonl(args.input):
        emb = inference.extract_embedding(params, config, series=series, repeat=args.repeat)
        records.append({"id": series.series_id, "embedding": emb.tolist()})
    _write_jsonl(args.out, records)
    manifest.add_output(args.out)
    manifest.finish()
    _maybe_echo(args, {"n_series": len(records), "out": args.out})
    return 0


# -- probe ---------------------------------------------------------------------------

def _join_by_id(embeddings_path: str, labels_path: str):
    embs = {r["id"]: np.asarray(r["embedding"], dtype=np.float64)
            for r in _read_jsonl(embeddings_path)}
    labels = {r["id"]: int(r["label"]) for r in _read_jsonl(labels_path)}
    ids = sorted(set(embs) & set(labels))
    if not ids:
        raise DataError("no overlapping ids between embeddings and labels")
    x = np.stack([embs[i] for i in ids])
    y = np.asarray([labels[i] for i in ids])
    return x, y


def cmd_probe(args) -> int:
    x, y = _join_by_id(args.embeddings, args.labels)
    n_classes = int(y.max()) + 1
    manifest = cfgmod.ManifestWriter(
        "probe", {"head": args.head, "epochs": args.epochs}, args.seed)
    if args.head == "linear":
        probe_cfg = inference.ProbeConfig(epochs=args.epochs, seed=args.seed,
                                          class_balanced=args.class_balanced)
        head = inference.train_linear_probe(x, y, n_classes, probe_cfg)
    else:
        head_cfg = inference.MlpHeadConfig(epochs=args.epochs, seed=args.seed,
                                           class_balanced=args.class_balanced)
        head = inference.train_mlp_head(x, y, n_classes, head_cfg)
    if args.test_embeddings and args.test_labels:
        x_eval, y_eval = _join_by_id(args.test_embeddings, args.test_labels)
    else:
        x_eval, y_eval = x, y
    preds = head.predict(x_eval)
    scores = head.scores(x_eval)
    auc_scores = scores[:, 1] if n_classes == 2 else scores
    payload = {
        "accuracy": metrics.accuracy(preds, y_eval),
        "macro_f1": metrics.macro_f1(preds, y_eval),
        "auc": metrics.auc(auc_scores, y_eval),
        "n": int(len(y_eval)),
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2)
    manifest.add_output(args.out)
    manifest.finish()
    _maybe_echo(args, payload)
    return 0


# -- eval -----------------------------------------------------------------------------

def cmd_eval_forecast(args) -> int:
    preds = {(r["id"], r.get("channel", 0)): r for r in _read_jsonl(args.pred)}
    manifest = cfgmod.ManifestWriter(
        "eval forecast", {"baseline": args.baseline, "season": args.season}, args.seed)
    tasks = []
    for record in _read_jsonl(args.truth):
        key = (record["id"], record.get("channel", 0))
        if key not in preds:
            raise DataError(f"missing prediction for series {key}")
        pred = preds[key]
        quantiles = np.asarray(pred["quantiles"], dtype=np.float64)
        levels = losses.quantile_levels(quantiles.shape[1])
        season = args.season if args.season > 0 else metrics.season_for_freq(record.get("freq"))
        tasks.append(metrics.ForecastTask(
            task_id=str(record["id"]),
            context=np.asarray(record["context"], dtype=np.float64),
            target=np.asarray(record["target"], dtype=np.float64),
            quantiles=quantiles,
            median=np.asarray(pred["median"], dtype=np.float64),
            levels=levels,
            season=season,
        ))
    report = metrics.evaluate_forecast_tasks(tasks)
    with open(args.out, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    manifest.add_output(args.out)
    manifest.finish()
    _maybe_echo(args, {"geomean_mase_ratio": report.geomean_mase_ratio,
                       "geomean_wql_ratio": report.geomean_wql_ratio,
                       "n_tasks": len(report.per_task), "n_skipped": len(report.skipped)})
    return 0


def cmd_eval_cls(args) -> int:
    preds = {r["id"]: r for r in _read_jsonl(args.pred)}
    manifest = cfgmod.ManifestWriter("eval cls", {}, args.seed)
    y_true, y_pred, scores = [], [], []
    for record in _read_jsonl(args.truth):
        rid = record["id"]
        if rid not in preds:
            raise DataError(f"missing prediction for id {rid}")
        pred = preds[rid]
        y_true.append(int(record["label"]))
        if "scores" in pred:
            s = np.asarray(pred["scores"], dtype=np.float64)
            scores.append(s)
            y_pred.append(int(np.argmax(s)))
        else:
            y_pred.append(int(pred["label"]))
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    payload = {
        "accuracy": metrics.accuracy(y_pred, y_true),
        "macro_f1": metrics.macro_f1(y_pred, y_true),
    }
    if scores:
        mat = np.stack(scores)
        payload["auc"] = metrics.auc(mat[:, 1] if mat.shape[1] == 2 else mat, y_true)
    else:
        payload["auc"] = None
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2)
    manifest.add_output(args.out)
    manifest.finish()
    _maybe_echo(args, payload)
    return 0


# -- parser ---------------------------------------------------------------------------

def _common_flags(sub_parser: argparse.ArgumentParser) -> None:
    # SUPPRESS keeps the top-level values when the flag is absent after
    # the subcommand (a subparser default would overwrite them)
    sub_parser.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    sub_parser.add_argument("--json", action="store_true", default=argparse.SUPPRESS)
    sub_parser.add_argument("--pretty", action="store_true", default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchlm")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--json", action="store_true", help="machine-readable stdout")
    parser.add_argument("--pretty", action="store_true", help="human-readable tables")
    sub = parser.add_subparsers(dest="command", required=True)

    tok = sub.add_parser("tokenize").add_subparsers(dest="tok_command", required=True)
    tok_train = tok.add_parser("train")
    tok_train.add_argument("--input", nargs="+", required=True)
    tok_train.add_argument("--vocab-size", type=int, required=True)
    tok_train.add_argument("--out", required=True)
    _common_flags(tok_train)
    tok_train.set_defaults(fn=cmd_tokenize_train)
    tok_encode = tok.add_parser("encode")
    tok_encode.add_argument("--vocab", required=True)
    tok_encode.add_argument("--input", required=True)
    tok_encode.add_argument("--out", required=True)
    _common_flags(tok_encode)
    tok_encode.set_defaults(fn=cmd_tokenize_encode)
    tok_decode = tok.add_parser("decode")
    tok_decode.add_argument("--vocab", required=True)
    tok_decode.add_argument("--input", required=True)
    tok_decode.add_argument("--out", required=True)
    _common_flags(tok_decode)
    tok_decode.set_defaults(fn=cmd_tokenize_decode)

    syn = sub.add_parser("synth")
    syn_sub = syn.add_subparsers(dest="synth_command", required=True)
    syn_gen = syn_sub.add_parser("generate")
    syn_gen.add_argument("--n", type=int, required=True)
    syn_gen.add_argument("--len", type=int, required=True)
    syn_gen.add_argument("--out", required=True)
    syn_gen.add_argument("--force-kernel", default=None)
    _common_flags(syn_gen)
    syn_gen.set_defaults(fn=cmd_synth)

    train = sub.add_parser("train")
    train.add_argument("--config", required=True)
    train.add_argument("--resume", default=None)
    train.add_argument("--stage", choices=("1", "2", "all"), default="all")
    _common_flags(train)
    train.set_defaults(fn=cmd_train)

    fc = sub.add_parser("forecast")
    fc.add_argument("--ckpt", required=True)
    fc.add_argument("--input", required=True)
    fc.add_argument("--horizon", type=int, required=True)
    fc.add_argument("--text", default=None)
    fc.add_argument("--vocab", default=None)
    fc.add_argument("--out", required=True)
    _common_flags(fc)
    fc.set_defaults(fn=cmd_forecast)

    emb = sub.add_parser("embed")
    emb.add_argument("--ckpt", required=True)
    emb.add_argument("--input", required=True)
    emb.add_argument("--repeat", type=int, default=1)
    emb.add_argument("--out", required=True)
    _common_flags(emb)
    emb.set_defaults(fn=cmd_embed)

    probe = sub.add_parser("probe")
    probe.add_argument("--embeddings", required=True)
    probe.add_argument("--labels", required=True)
    probe.add_argument("--test-embeddings", default=None)
    probe.add_argument("--test-labels", default=None)
    probe.add_argument("--head", choices=("linear", "mlp"), default="linear")
    probe.add_argument("--epochs", type=int, default=200)
    probe.add_argument("--class-balanced", action="store_true")
    probe.add_argument("--out", required=True)
    _common_flags(probe)
    probe.set_defaults(fn=cmd_probe)

    ev = sub.add_parser("eval").add_subparsers(dest="eval_command", required=True)
    ev_fc = ev.add_parser("forecast")
    ev_fc.add_argument("--pred", required=True)
    ev_fc.add_argument("--truth", required=True)
    ev_fc.add_argument("--baseline", choices=("seasonal-naive",), default="seasonal-naive")
    ev_fc.add_argument("--season", type=int, default=0, help="0 = derive from freq tag")
    ev_fc.add_argument("--out", required=True)
    _common_flags(ev_fc)
    ev_fc.set_defaults(fn=cmd_eval_forecast)
    ev_cls = ev.add_parser("cls")
    ev_cls.add_argument("--pred", required=True)
    ev_cls.add_argument("--truth", required=True)
    ev_cls.add_argument("--out", required=True)
    _common_flags(ev_cls)
    ev_cls.set_defaults(fn=cmd_eval_cls)

    return parser


def dispatch(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(dispatch())
