"""Command-line surface.

Subcommands: train, eval, embed, retrieve, gradcheck. Exit codes: 0 success,
1 usage, 2 data/config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .checkpoint import load_checkpoint, restore_model
from .config import TrainConfig
from .data import ingest_manifest, load_image_file
from .encoders import encode_text
from .errors import EndoclipError, NumericError
from .retrieval import (
    ClassificationReport,
    cosine_sim_matrix,
    load_index,
    rank_queries,
    save_index,
    text_image_scores,
)
from .train import embed_manifest, evaluate, gradcheck_suite, train

GRADCHECK_TOLERANCE = 1e-4

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="endoclip",
                     description="Train and evaluate the endoscopy vision-language model.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_train = sub.add_parser("train", help="run the joint training loop")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--data", required=True, help="JSONL manifest")
    p_train.add_argument("--out", required=True, help="checkpoint path")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--task", required=True,
                        choices=["classification", "i2i", "t2i"])
    p_eval.add_argument("--json", action="store_true")

    p_embed = sub.add_parser("embed", help="export an embedding index")
    p_embed.add_argument("--ckpt", required=True)
    p_embed.add_argument("--data", required=True)
    p_embed.add_argument("--out", required=True)

    p_ret = sub.add_parser("retrieve", help="query an embedding index")
    p_ret.add_argument("--index", required=True)
    group = p_ret.add_mutually_exclusive_group(required=True)
    group.add_argument("--image", help="query image path (or an id stored in the index)")
    group.add_argument("--text", help="query prompt")
    p_ret.add_argument("--k", type=int, default=5)
    p_ret.add_argument("--ckpt", help="checkpoint for embedding fresh queries")

    p_grad = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p_grad.add_argument("--config", required=True)
    return parser


def _cmd_train(args) -> int:
    config = TrainConfig.load(args.config)
    manifest = ingest_manifest(args.data)
    train(config, manifest, out_path=args.out, log_fn=lambda log: print(log.line()))
    print(f"wrote {args.out} (and {args.out}.best)")
    return EXIT_OK


def _cmd_eval(args) -> int:
    manifest = ingest_manifest(args.data)
    model = restore_model(load_checkpoint(args.ckpt))
    report = evaluate(model, manifest, args.task)
    if isinstance(report, ClassificationReport):
        payload = {
            "accuracy": report.accuracy,
            "precision": report.precision,
            "recall": report.recall,
            "f1": report.f1,
            "confusion": report.confusion.tolist(),
        }
        if args.json:
            print(json.dumps(payload))
        else:
            for key in ("accuracy", "precision", "recall", "f1"):
                print(f"{key}: {payload[key]:.4f}")
            print("confusion (rows = truth):")
            for line in report.confusion:
                print("  " + " ".join(f"{v:4d}" for v in line))
    else:
        payload = {"task": report.task, "recall_at_1": report.recall_at_1,
                   "mrr": report.mrr, "num_queries": report.num_queries}
        if args.json:
            print(json.dumps(payload))
        else:
            print(f"{report.task}: recall@1 {report.recall_at_1:.4f}  "
                  f"mrr {report.mrr:.4f}  queries {report.num_queries}")
    return EXIT_OK


def _cmd_embed(args) -> int:
    manifest = ingest_manifest(args.data)
    model = restore_model(load_checkpoint(args.ckpt))
    index = embed_manifest(model, manifest)
    save_index(index, args.out)
    print(f"wrote {args.out}: {len(index)} embeddings of width {index.embeddings.shape[1]}")
    return EXIT_OK


def _cmd_retrieve(args) -> int:
    index = load_index(args.index)
    model = None
    if args.ckpt:
        model = restore_model(load_checkpoint(args.ckpt))
    if args.text is not None:
        if model is None:
            raise EndoclipError("--text queries need --ckpt for the text encoder")
        query = encode_text(args.text, model.text).data[None, :]
        scores = text_image_scores(query, index.embeddings)
        results = rank_queries(scores, candidate_ids=index.ids)
    else:
        if args.image in index.ids:
            pos = index.ids.index(args.image)
            query = index.embeddings[pos][None, :]
            scores = cosine_sim_matrix(query, index.embeddings)
            scores[0, pos] = -np.inf  # leave-self-out
        elif model is not None:
            pixels = load_image_file(args.image, model.config.model.image_size)
            query = model.embed_image(pixels).data[None, :]
            scores = cosine_sim_matrix(query, index.embeddings)
        else:
            raise EndoclipError(
                f"{args.image!r} is not in the index; pass --ckpt to embed it")
        results = rank_queries(scores, candidate_ids=index.ids)
    top = results[0]
    for cid, score in list(zip(top.candidate_ids, top.scores))[:args.k]:
        print(f"{cid}\t{score:.6f}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    config = TrainConfig.load(args.config)
    results = gradcheck_suite(config)
    failed = False
    for name, err in results.items():
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:16s} max rel err {err:.3e}  {status}")
        failed = failed or err >= GRADCHECK_TOLERANCE
    if failed:
        raise NumericError("gradient check failed")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "train": _cmd_train,
        "eval": _cmd_eval,
        "embed": _cmd_embed,
        "retrieve": _cmd_retrieve,
        "gradcheck": _cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except NumericError as exc:
        sys.stderr.write(f"numeric failure: {exc}\n")
        return EXIT_NUMERIC
    except EndoclipError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA
    except OSError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
