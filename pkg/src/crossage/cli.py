"""Command-line entry point wiring the pipeline together.

Subcommands: synth-data, label-age, build-protocol, stats, train, extract,
score, evaluate. A single ``--seed`` flag overrides every configured seed so
runs are reproducible end to end. Subcommands that produce multiple files
write into a run directory named from a hash of their effective
configuration and refuse to reuse a non-empty one unless ``--force``.
"""

import argparse
import hashlib
import json
import os
import sys

import torch
import yaml

from . import evaluation, metadata, protocol
from . import features as feats_mod
from .model import extract_embedding, load_checkpoint, read_embeddings, \
    write_embeddings
from .model import ModelConfig
from .training import AudioCropDataset, TrainConfig, build_model, \
    speaker_index, train


class CliError(RuntimeError):
    pass


def _load_config(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as f:
        cfg = yaml.safe_load(f) or {}
    if not isinstance(cfg, dict):
        raise CliError(f"{path}: config must be a mapping")
    return cfg


def _run_dir(out, payload, force):
    digest = hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()
    path = os.path.join(out, f"run-{digest[:12]}")
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise CliError(f"run directory {path} already exists; "
                       "pass --force to reuse it")
    os.makedirs(path, exist_ok=True)
    return path


def cmd_synth_data(args):
    records = metadata.generate_synthetic_metadata(
        seed=args.seed, n_speakers=args.n_speakers,
        segments_per_speaker=args.segments, utterances_per_segment=args.utterances)
    metadata.write_metadata(records, args.out)
    print(f"wrote {len(records)} utterance records to {args.out}")
    return 0


def cmd_label_age(args):
    records = metadata.load_metadata(args.metadata)
    segages = metadata.compute_segment_ages(records)
    metadata.write_segment_ages(records, segages, args.out)
    print(f"wrote segment ages for {len(segages)} segments to {args.out}")
    return 0


def cmd_build_protocol(args):
    records = metadata.load_metadata(args.metadata)
    segages = metadata.compute_segment_ages(records)
    proto = protocol.build_preset(records, segages, args.preset, seed=args.seed)
    run = _run_dir(args.out, {"cmd": "build-protocol", "preset": args.preset,
                              "metadata": args.metadata, "seed": args.seed},
                   args.force)
    protocol.write_trials(proto, os.path.join(run, "trials.txt"))
    stats = protocol.protocol_stats(proto)
    with open(os.path.join(run, "stats.txt"), "w", encoding="utf-8") as f:
        f.write(protocol.format_stats(stats, args.preset))
    with open(os.path.join(run, "stats.kv"), "w", encoding="utf-8") as f:
        for k, v in protocol.stats_keyvalues(stats).items():
            f.write(f"{k} {v}\n")
    print(f"{args.preset}: {stats.n_trials} trials over "
          f"{stats.n_speakers} speakers -> {run}")
    return 0


def cmd_stats(args):
    records = metadata.load_metadata(args.metadata)
    segages = metadata.compute_segment_ages(records)
    proto = protocol.read_trials(args.trials, segages)
    stats = protocol.protocol_stats(proto)
    sys.stdout.write(protocol.format_stats(stats, args.trials))
    return 0


def cmd_train(args):
    cfg = _load_config(args.config)
    records = metadata.load_metadata(cfg["metadata"])
    segages = metadata.compute_segment_ages(records)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    train_keys = {f.name for f in TrainConfig.__dataclass_fields__.values()}
    train_cfg = TrainConfig(seed=seed, **{
        k: v for k, v in cfg.get("train", {}).items() if k in train_keys})
    model_cfg = ModelConfig(
        n_speakers=len(speaker_index(records)),
        variant=cfg.get("variant", "adal"),
        **{k: v for k, v in cfg.get("model", {}).items()})
    dataset = AudioCropDataset(records, segages, cfg["audio_root"],
                               chunk_seconds=train_cfg.chunk_seconds,
                               seed=seed)
    model = build_model(model_cfg, seed=seed)
    run = _run_dir(args.out, {"cmd": "train", "config": cfg, "seed": seed},
                   args.force)
    losses = train(model, dataset, train_cfg, out_dir=run)
    print(f"trained {model_cfg.variant} for {len(losses)} epochs -> {run}")
    return 0


def cmd_extract(args):
    model, _ = load_checkpoint(args.checkpoint)
    records = metadata.load_metadata(args.metadata)
    embeddings = {}
    for rec in sorted(records, key=lambda r: r.key):
        wav = feats_mod.read_wav(os.path.join(args.audio_root,
                                              rec.key + ".wav"))
        feats = torch.tensor(feats_mod.compute_logmel(wav),
                             dtype=torch.float32).unsqueeze(0)
        embeddings[rec.key] = extract_embedding(model, feats,
                                                args.embedding)[0].numpy()
    write_embeddings(args.out, embeddings)
    print(f"wrote {len(embeddings)} embeddings to {args.out}")
    return 0


def cmd_score(args):
    proto = protocol.read_trials(args.trials)
    embeddings = read_embeddings(args.embeddings)
    scores, _ = evaluation.score_protocol(proto, embeddings)
    evaluation.write_scores(proto, scores, args.out)
    print(f"scored {len(scores)} trials -> {args.out}")
    return 0


def cmd_evaluate(args):
    proto = protocol.read_trials(args.trials)
    embeddings = read_embeddings(args.embeddings)
    scores, labels = evaluation.score_protocol(proto, embeddings)
    result = evaluation.evaluate_protocol(proto, embeddings)
    run = _run_dir(args.out, {"cmd": "evaluate", "trials": args.trials,
                              "embeddings": args.embeddings}, args.force)
    evaluation.write_scores(proto, scores, os.path.join(run, "scores.txt"))
    evaluation.write_result(result, os.path.join(run, "result.kv"),
                            extra={"protocol": args.trials,
                                   "checkpoint": args.embeddings})
    print(f"EER {result.eer:.3f}%  minDCF {result.min_dcf:.3f} -> {run}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="crossage",
        description="Cross-age speaker verification: protocol mining, "
                    "age-decoupled embedding training, and scoring.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate synthetic metadata")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-speakers", type=int, default=50)
    p.add_argument("--segments", type=int, default=4)
    p.add_argument("--utterances", type=int, default=3)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("label-age", help="derive and export segment ages")
    p.add_argument("--metadata", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_label_age)

    p = sub.add_parser("build-protocol", help="build a named trial protocol")
    p.add_argument("--metadata", required=True)
    p.add_argument("--preset", required=True,
                   help=f"one of {sorted(protocol.PRESETS)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_build_protocol)

    p = sub.add_parser("stats", help="report statistics for a trial list")
    p.add_argument("--metadata", required=True)
    p.add_argument("--trials", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train an embedding model")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="extract utterance embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metadata", required=True)
    p.add_argument("--audio-root", required=True)
    p.add_argument("--embedding", default="z_id",
                   choices=["z", "z_id", "z_age"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("score", help="cosine-score a trial list")
    p.add_argument("--trials", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="score and compute EER/minDCF")
    p.add_argument("--trials", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
