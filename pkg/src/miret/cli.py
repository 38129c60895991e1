"""Operator commands: generate data, train, evaluate, retrieve, ablate.

Every command takes one JSON config (``--set dot.path=value`` overrides)
and stamps its artifacts with the resolved config hash.  Exit codes:
0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as C
from . import data as D
from . import reporting as R
from .checkpoint import load_arrays
from .errors import ConfigError, ContractError, DataError, NumericError
from .model import MultiInterestModel
from .retrieval import EvalRequest, RetrievalIndex, evaluate, retrieve
from .training import Trainer, read_metrics


def _load(args) -> tuple[dict, str]:
    cfg = C.load_config(args.config, args.set or [])
    return cfg, C.config_hash(cfg)


def cmd_gen_data(args) -> int:
    cfg, h = _load(args)
    spec = C.world_spec(cfg)
    traces = D.generate(spec)
    path = os.path.join(args.out, "dataset.ndjson")
    D.save_dataset(path, traces, spec, config_hash=h)
    print(f"wrote {len(traces)} traces to {path} (config {h})")
    return 0


def _build_model(cfg: dict) -> MultiInterestModel:
    return MultiInterestModel(C.model_config(cfg), seed=cfg["seed"])


def _load_examples(cfg: dict, data_path: str):
    traces, _manifest = D.load_dataset(data_path)
    examples, skipped = D.split_dataset(traces, C.model_config(cfg).max_seq_len)
    if skipped:
        print(f"skipped {skipped} too-short traces", file=sys.stderr)
    if not examples:
        raise DataError(f"dataset {data_path} produced no usable examples")
    return examples


def cmd_train(args) -> int:
    cfg, h = _load(args)
    examples = _load_examples(cfg, args.data)
    model = _build_model(cfg)
    settings = C.train_settings(cfg)
    if args.steps is not None:
        settings = type(settings)(**{**settings.__dict__, "steps": args.steps})
    trainer = Trainer(model, examples, settings, args.out, seed=cfg["seed"], config_hash=h)
    if args.resume:
        trainer.load_checkpoint(args.resume)
    records = trainer.run(log_every=args.log_every)
    metrics_path = os.path.join(args.out, "metrics.ndjson")
    all_metrics = read_metrics(metrics_path)
    R.write_csv(
        os.path.join(args.out, "metrics.csv"),
        ["step", "loss", "accuracy"],
        [[m["step"], m["loss"], m["accuracy"]] for m in all_metrics],
    )
    R.plot_training_curves(all_metrics, os.path.join(args.out, "training_curves.png"))
    summary = {
        "config_hash": h,
        "steps": trainer.step,
        "final_loss": records[-1]["loss"] if records else None,
        "final_accuracy": records[-1]["accuracy"] if records else None,
        "checkpoint": trainer._ckpt_prefix(None),
    }
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=1)
    print(json.dumps(summary, indent=1))
    return 0


def _restore_model(cfg: dict, h: str, checkpoint: str) -> MultiInterestModel:
    arrays, extra = load_arrays(checkpoint)
    stored = extra.get("config_hash", "")
    if stored and stored != h:
        raise ConfigError(
            f"checkpoint {checkpoint} was trained with config {stored}, current config hashes to {h}; refusing"
        )
    model = _build_model(cfg)
    model.load_state_arrays(arrays)
    return model


def cmd_eval(args) -> int:
    cfg, h = _load(args)
    model = _restore_model(cfg, h, args.checkpoint)
    examples = _load_examples(cfg, args.data)
    requests = [EvalRequest.from_example(ex) for ex in examples]
    cutoffs = [int(k) for k in args.cutoffs.split(",")] if args.cutoffs else cfg["eval"]["cutoffs"]
    report = evaluate(model, RetrievalIndex.from_model(model), requests, cutoffs, cfg["eval"]["filter_history"])
    report["config_hash"] = h
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w") as f:
        json.dump(report, f, indent=1)
    rows = [[f"HR@{k}", report["hit_rate"][str(k)]] for k in report["cutoffs"]]
    R.write_csv(os.path.join(args.out, "report.csv"), ["metric", "value"], rows)
    R.plot_hit_rate(report, os.path.join(args.out, "hit_rate.png"))
    print(R.fixed_width_table(["metric", "value"], rows))
    return 0


def cmd_retrieve(args) -> int:
    cfg, h = _load(args)
    model = _restore_model(cfg, h, args.checkpoint)
    try:
        with open(args.history) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read history {args.history!r}: {e}") from e
    from .embedding import InteractionRecord

    records = [
        InteractionRecord(
            item_id=r["item_id"],
            watch_time=r.get("watch_time", 0.0),
            duration=r.get("duration", 0.0),
            tag_id=r.get("tag_id", 0),
            labels=tuple(r.get("labels", ())),
        )
        for r in raw
    ]
    interests = model.forward(records)
    results = retrieve(model, interests, RetrievalIndex.from_model(model), args.k)
    rows = [[rank + 1, item_id, score] for rank, (item_id, score) in enumerate(results)]
    print(R.fixed_width_table(["rank", "item_id", "score"], rows))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        R.write_csv(os.path.join(args.out, "retrieved.csv"), ["rank", "item_id", "score"], rows)
        with open(os.path.join(args.out, "retrieved.json"), "w") as f:
            json.dump({"config_hash": h, "results": results}, f, indent=1)
    return 0


ABLATION_AXES = ("seq_len", "query_tokens", "layers", "compression")
PAPER_WINDOWS = ((64, 2), (16, 5))


def _variant_config(cfg: dict, axis: str, value) -> dict:
    out = json.loads(json.dumps(cfg))  # deep copy
    if axis == "seq_len":
        n = int(value)
        out["model"]["max_seq_len"] = n
        out["model"]["windows"] = []
        out["model"]["raw_tail"] = n
        out["world"]["trace_len_min"] = n + 1
        out["world"]["trace_len_max"] = n + 1
    elif axis == "query_tokens":
        out["model"]["interests"] = int(value)
    elif axis == "layers":
        out["model"]["layers"] = int(value)
    elif axis == "compression":
        n = 64 if value == "64-raw" else 256
        out["model"]["max_seq_len"] = n
        out["world"]["trace_len_min"] = n + 1
        out["world"]["trace_len_max"] = n + 1
        if value == "256-compressed":
            out["model"]["windows"] = [list(w) for w in PAPER_WINDOWS]
            out["model"]["raw_tail"] = 48
        else:
            out["model"]["windows"] = []
            out["model"]["raw_tail"] = n
    else:
        raise ConfigError(f"unknown ablation axis {axis!r} (choose from {ABLATION_AXES})")
    return out


def cmd_ablate(args) -> int:
    cfg, _ = _load(args)
    axis = args.axis
    if axis == "compression":
        values = ["64-raw", "256-raw", "256-compressed"]
    elif args.values:
        values = [v for v in args.values.split(",") if v]
    else:
        raise ConfigError(f"--values is required for axis {axis!r}")
    steps = args.steps if args.steps is not None else cfg["train"]["steps"]
    cutoffs = cfg["eval"]["cutoffs"]
    rows = []
    for value in values:
        vcfg = _variant_config(cfg, axis, value)
        vcfg["train"]["steps"] = steps
        vhash = C.config_hash(vcfg)
        vdir = os.path.join(args.out, f"{axis}-{value}")
        spec = C.world_spec(vcfg)
        train_traces = D.generate(spec)
        eval_spec = D.WorldSpec(**{**spec.__dict__, "seed": spec.seed + 1, "user_count": vcfg["eval"]["request_count"]})
        eval_traces = D.generate(eval_spec)
        mcfg = C.model_config(vcfg)
        train_examples, _ = D.split_dataset(train_traces, mcfg.max_seq_len)
        eval_examples, _ = D.split_dataset(eval_traces, mcfg.max_seq_len)

        model = MultiInterestModel(mcfg, seed=vcfg["seed"])
        trainer = Trainer(model, train_examples, C.train_settings(vcfg), vdir, seed=vcfg["seed"], config_hash=vhash)
        records = trainer.run(log_every=args.log_every)
        tail = records[-min(50, len(records)) :]
        accuracy = float(np.mean([m["accuracy"] for m in tail]))
        final_loss = float(np.mean([m["loss"] for m in tail]))
        requests = [EvalRequest.from_example(ex) for ex in eval_examples]
        report = evaluate(model, RetrievalIndex.from_model(model), requests, cutoffs)
        rows.append([value, steps, final_loss, accuracy] + [report["hit_rate"][str(k)] for k in cutoffs])

    headers = [axis, "steps", "loss", "accuracy"] + [f"hr@{k}" for k in cutoffs]
    os.makedirs(args.out, exist_ok=True)
    R.write_csv(os.path.join(args.out, "sweep.csv"), headers, rows)
    with open(os.path.join(args.out, "sweep.json"), "w") as f:
        json.dump({"axis": axis, "headers": headers, "rows": rows}, f, indent=1)
    series = {"accuracy": [r[3] for r in rows], f"hr@{cutoffs[0]}": [r[4] for r in rows]}
    R.plot_sweep(axis, values, series, os.path.join(args.out, "sweep.png"))
    print(R.fixed_width_table(headers, rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="miret", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="path to the JSON run config")
        sp.add_argument("--set", action="append", metavar="PATH=VALUE", help="override a config value by dot path")

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model on a dataset")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", help="checkpoint prefix to resume from")
    sp.add_argument("--steps", type=int, help="override train.steps")
    sp.add_argument("--log-every", type=int, default=0)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="hit-rate evaluation by request replay")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--cutoffs", help="comma-separated K values")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("retrieve", help="top-K retrieval for one request")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--history", required=True, help="JSON file with a list of interaction records")
    sp.add_argument("--k", type=int, default=50)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_retrieve)

    sp = sub.add_parser("ablate", help="train/eval a sweep along one axis")
    common(sp)
    sp.add_argument("--axis", required=True, choices=ABLATION_AXES)
    sp.add_argument("--values", help="comma-separated values (ignored for axis=compression)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, help="override train.steps for every variant")
    sp.add_argument("--log-every", type=int, default=0)
    sp.set_defaults(fn=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ContractError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
