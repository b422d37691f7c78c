"""Command-line entry point: ``proxyid <subcommand> [flags]``.

Every subcommand writes into a run directory (``--out``, or a fresh
``<timestamp>_seed<seed>_<subcommand>`` folder under ``$PROXYID_RUN_ROOT``,
default ``./runs``). Errors go to stderr as one JSON object, and the exit
code is 1 for user errors, 2 for internal failures, 3 for corrupt artifacts.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import evaluation, numerics, pipeline, proxy
from .aggregate import aggregate_verify
from .classify import EmbeddingCollection, load_collection, make_classifier, save_collection
from .config import RunConfig, load_config
from .encoder import load_checkpoint, save_checkpoint
from .errors import MissingArtifactError, ProxyIdError, UsageError
from .loss import PALParams, make_loss
from .synthgen import generate_dataset

RUN_ROOT_ENV = "PROXYID_RUN_ROOT"
CHECKPOINT = "encoder.ckpt"
PROXIES = "proxies.bin"
COLLECTION = "collection.bin"

log = logging.getLogger("proxyid")


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# flag name -> (config field, type)
OVERRIDES = {
    "seed": int,
    "epochs": int,
    "lr": float,
    "batch_size": int,
    "dim": int,
    "hidden": int,
    "poses": int,
    "crop_side": int,
    "scene_size": int,
    "classifier": str,
    "knn_k": int,
    "background": str,
    "grouping": str,
    "threshold_min": float,
    "threshold_gap": float,
    "window": int,
    "pieces": int,
    "alpha": float,
    "delta": float,
}


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", help="JSON run config (default: bundled demo config)")
    common.add_argument("--out", help="run directory (default: a fresh folder under $%s)" % RUN_ROOT_ENV)
    common.add_argument("--set", action="append", default=[], metavar="FIELD=JSON", help="override any config field")
    common.add_argument("--weighted", type=_bool, default=None)
    common.add_argument("--decompose", type=_bool, default=None)
    common.add_argument("-v", "--verbose", action="store_true")
    for name, kind in OVERRIDES.items():
        common.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None)

    parser = Parser(prog="proxyid", description="Proxy-based pill identification toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text)

    add("gen-data", "generate the synthetic vial dataset")
    p = add("train", "train encoder and proxies on the train split")
    p.add_argument("--data", required=True)
    p = add("embed", "embed a dataset split into a collection")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="train")
    add("proxy-demo", "2-D proxy creation, addition and enhancement demo")
    p = add("proxy-add", "add proxies for new classes from their embeddings")
    p.add_argument("--proxies", required=True)
    p.add_argument("--collection", required=True)
    p = add("proxy-enhance", "re-decompose a whole proxy set")
    p.add_argument("--proxies", required=True)
    p = add("classify", "predict a class and confidence for every test crop")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--collection", help="reference collection (default: the model's)")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p = add("verify", "aggregate and verify predictions per request id")
    p.add_argument("--predictions", required=True)
    for name in ("eval-single", "eval-multi"):
        p = add(name, f"vial test, {name.split('-')[1]} grouping")
        p.add_argument("--data", required=True)
        p.add_argument("--model", required=True)
    p = add("eval-continual", "proxy-addition continual-learning protocol")
    p.add_argument("--data", required=True)
    p = add("eval-unknown", "unknown-class protocol")
    p.add_argument("--data", required=True)
    return parser


def effective_config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {name: getattr(args, name) for name in OVERRIDES}
    overrides["weighted"] = args.weighted
    overrides["decompose"] = args.decompose
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects FIELD=JSON, got {item!r}")
        try:
            overrides[key] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key] = value
    return cfg.with_overrides(overrides)


def run_dir(args, cfg: RunConfig) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        out = root / f"{time.strftime('%Y%m%d-%H%M%S')}_seed{cfg.seed}_{args.command}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    return path


def _crops(data, cfg: RunConfig) -> tuple[pipeline.CropSet, dict]:
    root = _require(data)
    manifest = pipeline.read_manifest(root)
    return pipeline.load_crops(root, manifest, cfg.background, cfg.crop_side), manifest


def _select(crops: pipeline.CropSet, split: str) -> pipeline.CropSet:
    return crops if split == "all" else crops.split(split)


def save_model(out: Path, model: pipeline.Model, cfg: RunConfig, collection: EmbeddingCollection) -> None:
    header = {"config": cfg.to_dict(), "loss": model.loss.params.to_dict(), "loss_state": model.loss.state()}
    save_checkpoint(out / CHECKPOINT, model.params, header)
    proxy.save_proxy_set(out / PROXIES, model.proxies, {"config": cfg.to_dict()})
    save_collection(out / COLLECTION, collection, {"config": cfg.to_dict()})


def load_model(model_dir) -> tuple[pipeline.Model, EmbeddingCollection]:
    root = _require(model_dir)
    params, header = load_checkpoint(_require(root / CHECKPOINT))
    loss = make_loss(PALParams(**header["loss"]), (header.get("loss_state") or {}).get("weights"))
    pset = proxy.load_proxy_set(_require(root / PROXIES))
    collection = load_collection(_require(root / COLLECTION))
    return pipeline.Model(params, pset, loss, []), collection


def cmd_gen_data(args, cfg, out):
    manifest = generate_dataset(cfg.dataset_config(), out / "dataset", {"config": cfg.to_dict()})
    return {"dataset": str(out / "dataset"), "scenes": len(manifest["scenes"])}


def cmd_train(args, cfg, out):
    crops, _ = _crops(args.data, cfg)
    train = crops.split("train")
    model = pipeline.train_model(cfg, train)
    collection = pipeline.build_collection(model, train, pipeline.class_names(cfg))
    save_model(out, model, cfg, collection)
    report = {"config": cfg.to_dict(), "loss_history": model.history, "train_crops": len(train)}
    write_json(out / "train.json", report)
    return {"model": str(out), "final_loss": model.history[-1]}


def cmd_embed(args, cfg, out):
    model, _ = load_model(args.model)
    crops, _ = _crops(args.data, cfg)
    part = _select(crops, args.split)
    collection = pipeline.build_collection(model, part, pipeline.class_names(cfg))
    save_collection(out / COLLECTION, collection, {"config": cfg.to_dict()})
    return {"collection": str(out / COLLECTION), "count": len(collection)}


def cmd_proxy_demo(args, cfg, out):
    rng = numerics.make_rng(cfg.seed)
    report = proxy.demo_2d(rng, steps=cfg.proxy_steps, lr=cfg.proxy_lr, restarts=cfg.proxy_restarts)
    write_json(out / "proxy_demo.json", {"config": cfg.to_dict(), "max_similarity": report})
    return report


def cmd_proxy_add(args, cfg, out):
    pset = proxy.load_proxy_set(_require(args.proxies))
    new = load_collection(_require(args.collection))
    grown = proxy.add_proxies(pset, new, steps=cfg.proxy_steps, lr=cfg.proxy_lr)
    proxy.save_proxy_set(out / PROXIES, grown, {"config": cfg.to_dict()})
    return {
        "proxies": str(out / PROXIES),
        "count": grown.count,
        "before": grown.meta["before_max_similarity"],
        "after": proxy.max_abs_similarity(grown.proxies),
    }


def cmd_proxy_enhance(args, cfg, out):
    pset = proxy.load_proxy_set(_require(args.proxies))
    enhanced = proxy.enhance_proxies(pset, steps=cfg.proxy_steps, lr=cfg.proxy_lr)
    proxy.save_proxy_set(out / PROXIES, enhanced, {"config": cfg.to_dict()})
    return {
        "proxies": str(out / PROXIES),
        "before": proxy.max_abs_similarity(pset.proxies),
        "after": proxy.max_abs_similarity(enhanced.proxies),
    }


def cmd_classify(args, cfg, out):
    model, collection = load_model(args.model)
    if args.collection:
        collection = load_collection(_require(args.collection))
    crops, _ = _crops(args.data, cfg)
    part = _select(crops, args.split)
    classifier = make_classifier(cfg.classifier, collection, cfg.knn_k)
    records = classifier.predict(model.embed(part.images))
    keys = evaluation.group_keys(part, cfg.grouping)
    rows = [
        {"request_id": str(k), "true_label": int(t), "label": r.label, "confidence": r.confidence}
        for k, t, r in zip(keys, part.labels, records)
    ]
    write_json(out / "predictions.json", {"config": cfg.to_dict(), "predictions": rows})
    return {"predictions": str(out / "predictions.json"), "count": len(rows)}


def cmd_verify(args, cfg, out):
    path = _require(args.predictions)
    try:
        data = json.loads(path.read_text())
        rows = data["predictions"] if isinstance(data, dict) else data
        grouped: dict[str, list] = {}
        for row in rows:
            grouped.setdefault(str(row.get("request_id", "")), []).append((int(row["label"]), float(row["confidence"])))
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{path}: expected a list of {{request_id, label, confidence}} records: {exc}") from exc
    results = [
        aggregate_verify(preds, cfg.threshold_min, cfg.threshold_gap, cfg.window).to_record(rid)
        for rid, preds in sorted(grouped.items())
    ]
    write_json(out / "verification.json", {"config": cfg.to_dict(), "results": results})
    return {"verification": str(out / "verification.json"), "requests": len(results)}


def _vial_eval(args, cfg, out, grouping):
    model, collection = load_model(args.model)
    crops, manifest = _crops(args.data, cfg)
    test = crops.split("test")
    classifier = make_classifier(cfg.classifier, collection, cfg.knn_k)
    groups = evaluation.expected_groups(manifest, grouping, "test")
    report = evaluation.vial_test(model, classifier, test, groups, grouping, cfg, collection)
    body = {"config": cfg.to_dict(), "grouping": grouping, **report.to_dict(with_groups=True)}
    write_json(out / f"report_{grouping}.json", body)
    (out / f"report_{grouping}.csv").write_text(evaluation.to_csv("vial", [{"grouping": grouping, **report.to_dict()}]))
    return report.to_dict()


def cmd_eval_single(args, cfg, out):
    return _vial_eval(args, cfg, out, "single")


def cmd_eval_multi(args, cfg, out):
    return _vial_eval(args, cfg, out, "multiple")


def cmd_eval_continual(args, cfg, out):
    crops, manifest = _crops(args.data, cfg)
    report = evaluation.continual_protocol(cfg, crops, manifest)
    write_json(out / "continual.json", {"config": cfg.to_dict(), **report})
    (out / "continual.csv").write_text(evaluation.to_csv("continual", report["rows"]))
    return {"rows": [{k: r[k] for k in ("train", "collection", "test", "accuracy_all")} for r in report["rows"]]}


def cmd_eval_unknown(args, cfg, out):
    crops, manifest = _crops(args.data, cfg)
    report = evaluation.unknown_class_protocol(cfg, crops, manifest)
    write_json(out / "unknown.json", {"config": cfg.to_dict(), **report})
    extra = {"average_ratio_verified": report["average_ratio_verified"]}
    (out / "unknown.csv").write_text(evaluation.to_csv("unknown", report["rows"], extra))
    return {"ratio_verified": [r["ratio_verified"] for r in report["rows"]], **extra}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "embed": cmd_embed,
    "proxy-demo": cmd_proxy_demo,
    "proxy-add": cmd_proxy_add,
    "proxy-enhance": cmd_proxy_enhance,
    "classify": cmd_classify,
    "verify": cmd_verify,
    "eval-single": cmd_eval_single,
    "eval-multi": cmd_eval_multi,
    "eval-continual": cmd_eval_continual,
    "eval-unknown": cmd_eval_unknown,
}


def _fail(exc: BaseException, code: int) -> int:
    kind = type(exc).__name__
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc), "exit_code": code}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
        cfg = effective_config(args)
        out = run_dir(args, cfg)
        summary = COMMANDS[args.command](args, cfg, out)
    except ProxyIdError as exc:
        return _fail(exc, exc.exit_code)
    except Exception as exc:  # anything unforeseen is an internal error
        log.debug("internal error", exc_info=True)
        return _fail(exc, 2)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
