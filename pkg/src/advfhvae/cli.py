"""Command-line entry point.

Subcommands: prepare, synth, pretrain, finetune, extract, eval,
reproduce-synth. Every run writes a resolved config snapshot into its
output directory before doing any work. Exit codes: 0 success, 1 failure
(one machine-parsable ``ERROR <class>: message`` line on stderr), 2 usage.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import seeding
from .arrayio import save_blob, write_feature_file
from .config import RunSettings, resolve_settings, write_config_file
from .corpus import (
    CorpusManifest,
    ManifestEntry,
    SynthConfig,
    fit_norm_stats,
    load_corpus,
    read_manifest,
    synth_generate,
    write_manifest,
)
from .errors import ConfigurationError
from .evalharness import INPUT_KINDS, SplitSpec, format_report_grid, run_eval_suite
from .extract import export_features, extract_corpus
from .pipeline import SynthExperimentConfig, reproduce_synthetic_table
from .trainer import MetricsLog, finetune, load_checkpoint, pretrain, save_checkpoint

log = logging.getLogger(__name__)

OUT_ROOT_ENV = "ADVFHVAE_OUT_ROOT"


def _out_dir(args) -> Path:
    root = Path(args.out_dir or os.environ.get(OUT_ROOT_ENV, "runs"))
    root.mkdir(parents=True, exist_ok=True)
    return root


def _settings(args) -> RunSettings:
    settings = resolve_settings(getattr(args, "config", None), getattr(args, "set", []) or [])
    if getattr(args, "seed", None) is not None:
        settings = RunSettings(settings.model, replace(settings.training, seed=args.seed))
    return settings


def _snapshot(settings: RunSettings, out: Path):
    write_config_file(settings, out / "resolved.cfg")


def cmd_prepare(args) -> int:
    out = _out_dir(args)
    manifest = read_manifest(args.manifest)
    corpus = load_corpus(manifest, root=args.audio_root)
    stats = fit_norm_stats([u.features for u in corpus])
    save_blob(out / "norm.stats", {"kind": "norm_stats"},
              {"mean": stats.mean, "std": stats.std})
    entries = []
    for utt in corpus:
        name = f"{utt.utterance_id}.fea"
        write_feature_file(out / name, utt.features)
        entries.append(ManifestEntry(utt.utterance_id, name, utt.speaker.speaker_id, utt.labels))
    write_manifest(CorpusManifest(entries, corpus.speakers()), out / "manifest.tsv")
    print(f"prepared {len(entries)} utterances -> {out}")
    return 0


def cmd_synth(args) -> int:
    out = _out_dir(args)
    cfg = SynthConfig(
        n_sequences=args.n_sequences,
        segments_per_sequence=args.segments_per_sequence,
        n_speakers=args.n_speakers,
        domain_shift_strength=args.domain_shift_strength,
        noise_std=args.noise_std,
        obs_dim=args.obs_dim,
        n_labels=args.n_labels,
        seed=args.seed if args.seed is not None else 0,
    )
    manifest, feats = synth_generate(cfg)
    digest = hashlib.sha256()
    entries = []
    for e in manifest.entries:
        name = f"{e.utterance_id}.fea"
        write_feature_file(out / name, feats[e.utterance_id])
        digest.update((out / name).read_bytes())
        entries.append(ManifestEntry(e.utterance_id, name, e.speaker_id, e.labels))
    write_manifest(CorpusManifest(entries, manifest.speakers), out / "manifest.tsv")
    print(f"synth corpus digest {digest.hexdigest()}")
    return 0


def cmd_pretrain(args) -> int:
    out = _out_dir(args)
    settings = _settings(args)
    _snapshot(settings, out)
    corpus = load_corpus(read_manifest(args.manifest), root=Path(args.manifest).parent)
    model_cfg = replace(settings.model, feat_dim=corpus.feat_dim)
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt = pretrain(corpus.control_only() if args.control_only else corpus,
                    settings.training, model_cfg, run_dir=out,
                    metrics=MetricsLog(out / "metrics.tsv"), resume_from=resume)
    save_checkpoint(out / "best.ckpt", ckpt)
    print(f"pretrained model -> {out / 'best.ckpt'} (best val {ckpt.best_val:.4f})")
    return 0


def cmd_finetune(args) -> int:
    out = _out_dir(args)
    settings = _settings(args)
    flag_names = set((args.flags or "").split(",")) - {""}
    known = {"adversarial", "reference", "gen_dys_only", "disentangle"}
    if flag_names - known:
        raise ConfigurationError(f"unknown flags: {sorted(flag_names - known)}")
    from .losses import LossFlags

    training = replace(settings.training, flags=LossFlags(**{n: True for n in flag_names}))
    settings = RunSettings(settings.model, training)
    _snapshot(settings, out)
    corpus = load_corpus(read_manifest(args.manifest), root=Path(args.manifest).parent)
    ckpt = load_checkpoint(args.ckpt)
    resume = load_checkpoint(args.resume) if args.resume else None
    tuned = finetune(ckpt, corpus, training, run_dir=out,
                     metrics=MetricsLog(out / "metrics.tsv"), resume_from=resume)
    save_checkpoint(out / "best.ckpt", tuned)
    print(f"finetuned model -> {out / 'best.ckpt'}")
    return 0


def cmd_extract(args) -> int:
    out = _out_dir(args)
    corpus = load_corpus(read_manifest(args.manifest), root=Path(args.manifest).parent)
    ckpt = load_checkpoint(args.ckpt)
    features = extract_corpus(ckpt, corpus, shift=args.shift)
    manifest = export_features(features, out, which=args.which)
    print(f"extracted {len(features)} utterances -> {manifest}")
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    corpus = load_corpus(read_manifest(args.manifest), root=Path(args.manifest).parent)
    mode = {"ood": "out_of_domain", "indomain": "in_domain", "kfold": "kfold"}[args.protocol]
    spec = SplitSpec(mode=mode, repeats=args.repeats)
    ckpt = load_checkpoint(args.ckpt) if args.ckpt else None
    kinds = INPUT_KINDS if args.input == "all" else (args.input,)
    n_labels = args.n_labels
    if n_labels is None and mode != "kfold":
        n_labels = max((max(e.labels) for e in read_manifest(args.manifest).entries if e.labels),
                       default=-1) + 1
    reports = run_eval_suite(corpus, spec, kinds, ckpt=ckpt, n_labels=n_labels,
                             seed=args.seed if args.seed is not None else 0)
    grid = format_report_grid(reports)
    (out / "report.tsv").write_text(grid)
    print(grid, end="")
    return 0


def cmd_reproduce_synth(args) -> int:
    out = _out_dir(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    grid = reproduce_synthetic_table(out, seeds, SynthExperimentConfig())
    print(grid, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advfhvae",
        description="Two-scale disentangled speech representations with adversarial "
                    "domain-invariance: training, extraction and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--out-dir", help=f"output directory (default ${OUT_ROOT_ENV} or ./runs)")
        p.add_argument("--seed", type=int, default=None)
        if config:
            p.add_argument("--config", help="key = value config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="config override (repeatable)")

    p = sub.add_parser("prepare", help="compute features for a manifest of audio/feature files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--audio-root", default=None)
    common(p, config=False)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate a synthetic two-factor corpus")
    p.add_argument("--n-sequences", type=int, default=320)
    p.add_argument("--segments-per-sequence", type=int, default=10)
    p.add_argument("--n-speakers", type=int, default=40)
    p.add_argument("--domain-shift-strength", type=float, default=3.0)
    p.add_argument("--noise-std", type=float, default=0.4)
    p.add_argument("--obs-dim", type=int, default=32)
    p.add_argument("--n-labels", type=int, default=6)
    common(p, config=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="pretrain on control data")
    p.add_argument("--manifest", required=True)
    p.add_argument("--control-only", action="store_true", default=True)
    p.add_argument("--resume", default=None)
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="finetune a pretrained model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--flags", default="", help="comma list: adversarial,reference,gen_dys_only,disentangle")
    p.add_argument("--resume", default=None)
    common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("extract", help="extract latent features for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--shift", type=int, default=1)
    p.add_argument("--which", choices=["z1", "z2", "both", "fbank"], default="both")
    common(p, config=False)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    p.add_argument("--manifest", required=True)
    p.add_argument("--protocol", choices=["ood", "indomain", "kfold"], required=True)
    p.add_argument("--input", choices=list(INPUT_KINDS) + ["all"], default="all")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--n-labels", type=int, default=None)
    common(p, config=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reproduce-synth", help="full synthetic method-comparison grid")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    common(p, config=False)
    p.set_defaults(func=cmd_reproduce_synth)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("ADVFHVAE_LOGLEVEL", "WARNING"))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # single machine-parsable error line, exit 1
        print(f"ERROR {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
