"""``fous`` command line: gen-data | train | label | eval | bench.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Outputs default to subdirectories of ``$FOUS_OUT`` (or the config's
``output_dir``).
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from fous import bench, prototypes
from fous.config import ConfigError, load_config, save_config
from fous.data import generate_synthetic_domain_pair, load_dataset, save_dataset
from fous.evaluation import evaluate_person_search
from fous.model import detect, embed_boxes
from fous.storage import load_checkpoint, write_embeddings, write_label_file
from fous.training import TrainingDiverged, source_identity_features, state_from_checkpoint, train_adaptation

log = logging.getLogger("fous")

OUT_ENV = "FOUS_OUT"


class UsageError(Exception):
    pass


def _root(config):
    return Path(os.environ.get(OUT_ENV) or config.output_dir)


def _config(args):
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    return config


def _dataset(path):
    path = Path(path)
    if not (path / "source" / "index.jsonl").exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return load_dataset(path)


def _checkpoint(args, config):
    path = Path(args.checkpoint) if args.checkpoint else _root(config) / "run" / "checkpoint.pt"
    payload = load_checkpoint(path)
    if args.config is None:
        return state_from_checkpoint(payload)
    try:
        return state_from_checkpoint(payload, config)
    except RuntimeError as err:
        raise ConfigError(f"dimension mismatch between checkpoint and config: {err}") from None


def cmd_gen_data(args):
    config = _config(args)
    out = Path(args.out) if args.out else _root(config) / "data"
    source, target = generate_synthetic_domain_pair(config.data, config.seed)
    save_dataset(source, target, out)
    save_config(config, out / "config.yaml")
    n_src = sum(len(s.boxes) for s in source)
    n_tgt = sum(len(s.boxes) for s in target)
    print(f"wrote {out}: {len(source)} source scenes ({n_src} persons), "
          f"{len(target)} target scenes ({n_tgt} persons)")
    return 0


def cmd_train(args):
    config = _config(args)
    data = Path(args.data) if args.data else _root(config) / "data"
    out = Path(args.out) if args.out else _root(config) / "run"
    source, target = _dataset(data)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.yaml")

    def report(state, record):
        if "phase" in record:
            print(f"pretrain {record['epoch']}: l_det {record['l_det']:.4f} l_reid {record['l_reid']:.4f}")
        else:
            print(f"adapt {record['epoch']}: total {record['total']:.3f} pseudo_acc {record['pseudo_acc']:.3f}")

    state = train_adaptation(config, source, target, out_dir=out, resume=args.checkpoint, on_epoch_end=report)
    print(f"checkpoint {out / 'checkpoint.pt'} ({state.pretrain_done} pretrain, {state.adapt_done} adaptation epochs)")
    return 0


def label_dataset(state, source, target):
    """Offline labelling of the target split against the checkpoint's prototype banks.

    Returns ``(labels, features, image_ids, box_ids, evaluations)``.
    """
    cfg = state.config
    net = state.net
    if state.target_boxes is not None and len(state.target_boxes) == len(target):
        boxes = state.target_boxes
    else:
        boxes = [b for b, _ in detect(net, target, cfg.adapt.score_threshold)]
    feats = embed_boxes(net, target, boxes)
    image_ids = np.concatenate([np.full(len(b), i) for i, b in enumerate(boxes)]) if boxes else np.zeros(0, int)
    box_ids = np.concatenate([np.arange(len(b)) for b in boxes]) if boxes else np.zeros(0, int)
    counter = prototypes.DistanceCounter()
    if len(feats) == 0:
        empty = prototypes.PseudoLabelSet(*(np.zeros(0) for _ in range(4)))
        return empty, feats, image_ids, box_ids, 0
    source_bank = state.source_bank
    if source_bank is None:
        src_feats, src_ids = source_identity_features(net, source)
        source_bank = prototypes.init_source_prototypes(src_feats, src_ids)
    random_bank = state.random_bank
    if random_bank is None:
        random_bank = prototypes.sample_random_prototypes(feats, min(cfg.adapt.n_random, len(feats)), cfg.seed)
    for bank in (source_bank, random_bank):
        if bank.dim != feats.shape[1]:
            raise ConfigError(f"dimension mismatch: features {feats.shape[1]} vs prototypes {bank.dim}")
    labels = prototypes.label_with_banks(feats, source_bank, random_bank, counter)
    return labels, feats, image_ids, box_ids, counter.evaluations


def cmd_label(args):
    config = _config(args)
    state = _checkpoint(args, config)
    data = Path(args.data) if args.data else _root(config) / "data"
    out = Path(args.out) if args.out else _root(config) / "labels"
    source, target = _dataset(data)
    if not target:
        log.warning("target split is empty; writing an empty label file")
    labels, feats, image_ids, box_ids, evals = label_dataset(state, source, target)
    out.mkdir(parents=True, exist_ok=True)
    write_label_file(out / "labels.tsv", labels)
    write_embeddings(out / "embeddings.bin", image_ids, box_ids, feats)
    summary = {"n_instances": len(labels), "distance_evaluations": int(evals)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"labelled {summary['n_instances']} instances, {evals} distance evaluations -> {out / 'labels.tsv'}")
    return 0


def cmd_eval(args):
    config = _config(args)
    state = _checkpoint(args, config)
    data = Path(args.data) if args.data else _root(config) / "data"
    out = Path(args.out) if args.out else _root(config) / "eval"
    _, target = _dataset(data)
    report = evaluate_person_search(state.net, target, state.config.adapt.score_threshold)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    print(f"mAP {report.map:.4f}  top-1 {report.top1:.4f}  det AP {report.det_ap:.4f}  "
          f"det recall {report.det_recall:.4f}  ({report.n_queries} queries)")
    return 0


def _sizes(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"invalid size list: {text!r}") from None


def cmd_bench(args):
    seed = args.seed if args.seed is not None else 0
    rows, skipped = bench.bench_sizes(_sizes(args.sizes), k=args.k, dim=args.dim, seed=seed)
    for n in skipped:
        print(f"# skipped N={n}: need at least 2 features")
    table = bench.format_table(rows)
    print(table)
    if len(rows) >= 2:
        ns = [r["n"] for r in rows]
        for key in ("label_evals", "pairwise_evals", "label_seconds", "pairwise_seconds"):
            print(f"# slope {key} {bench.loglog_slope(ns, [max(r[key], 1e-9) for r in rows]):.3f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.tsv").write_text(table + "\n")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="fous", description="Desk-scale unsupervised domain-adaptive person search.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False, data=False):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        if checkpoint:
            sp.add_argument("--checkpoint", help="checkpoint path")
        if data:
            sp.add_argument("--data", help="dataset directory (from gen-data)")

    common(sub.add_parser("gen-data", help="write a synthetic source/target dataset"))
    common(sub.add_parser("train", help="pre-train and adapt; --checkpoint resumes"), checkpoint=True, data=True)
    common(sub.add_parser("label", help="pseudo-label the target split offline"), checkpoint=True, data=True)
    common(sub.add_parser("eval", help="person-search metrics on the target split"), checkpoint=True, data=True)
    b = sub.add_parser("bench", help="labelling cost vs. all-pairs reference")
    b.add_argument("--sizes", default="500,1000,2000,4000")
    b.add_argument("--k", type=int, default=320, help="prototypes per labelling pass")
    b.add_argument("--dim", type=int, default=64)
    b.add_argument("--seed", type=int)
    b.add_argument("--out")
    b.add_argument("--config", help=argparse.SUPPRESS)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "label": cmd_label, "eval": cmd_eval, "bench": cmd_bench}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (FileNotFoundError, PermissionError, NotADirectoryError, TrainingDiverged, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
