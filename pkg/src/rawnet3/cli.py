"""Command-line entry point: synth, train, trials, score, metrics, config."""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from .audio import AudioError, load_corpus, read_wav, synth_corpus, write_corpus
from .checkpoint import Checkpoint, CheckpointError
from .config import PROFILES, RunConfig, describe_keys
from .evaluation import (
    compute_eer,
    compute_min_dcf,
    cosine_score,
    encoder_from_checkpoint,
    extract_embedding,
    make_trials,
    read_trials,
    scoreset_from_files,
    write_scores,
    write_trials,
)
from .numerics import ConfigError, ContractError, NumericalError

log = logging.getLogger("rawnet3")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_ECHO = "config.txt"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- helpers


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _parse_sets(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(args) -> RunConfig:
    """Profile, then ``--config`` file, then ``--set`` overrides, then ``--seed``."""
    cfg = RunConfig.from_profile(args.profile)
    if args.config:
        cfg.apply_file(args.config)
    cfg.update(_parse_sets(args.set))
    if getattr(args, "seed", None) is not None:
        cfg.set("run.seed", args.seed)
    # materialise every section so invalid values fail before any work starts
    for name in ("frontend", "model", "dino_head", "aam", "dino", "views", "supervised", "dino_train"):
        getattr(cfg, name)
    return cfg


# --------------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    out = _prepare_out(Path(args.out), args.force)
    corpus = synth_corpus(args.speakers, args.utts, args.seconds, args.seed, labeled=not args.unlabeled)
    manifest = write_corpus(corpus, out, labeled=not args.unlabeled)
    print(f"wrote {len(corpus)} utterances to {out}; manifest {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import training

    cfg = resolve_config(args)
    out = _prepare_out(Path(args.out), args.force)
    (out / CONFIG_ECHO).write_text(cfg.to_text())
    if args.dry_run:
        print(f"config written to {out / CONFIG_ECHO}")
        return EXIT_OK
    if args.manifest is None:
        raise UsageError("--manifest is required")
    labeled = args.flow != "dino"
    corpus = load_corpus(args.manifest, labeled=labeled)
    log_path = out / "train.log"
    log_path.write_text("")
    if args.flow == "supervised":
        result = training.train_supervised(corpus, cfg, log_path=log_path)
    elif args.flow == "finetune":
        if not args.init:
            raise UsageError("train finetune needs --init <dino checkpoint>")
        result = training.finetune(Checkpoint.load(args.init), corpus, cfg, log_path=log_path)
    else:
        result = training.train_dino(corpus, cfg, log_path=log_path)
    ckpt_path = out / "model.ckpt"
    result.checkpoint.save(ckpt_path)
    print(f"{args.flow}: {len(result.step_losses)} steps, final epoch loss {result.epoch_losses[-1]:.4f}")
    if result.epoch_entropy:
        print("teacher entropy per epoch: " + " ".join(f"{e:.4f}" for e in result.epoch_entropy))
    print(f"checkpoint {ckpt_path}")
    return EXIT_OK


def cmd_trials(args) -> int:
    corpus = load_corpus(args.manifest, labeled=True)
    trials = make_trials(corpus, args.targets, args.nontargets, np.random.default_rng(args.seed))
    write_trials(args.out, trials)
    print(f"wrote {len(trials)} trials to {args.out}")
    return EXIT_OK


class EmbeddingCache:
    """On-disk embeddings keyed by (checkpoint digest, file path, file mtime)."""

    def __init__(self, root: Path | None, digest: str):
        self.root = root
        self.digest = digest
        if root is not None:
            root.mkdir(parents=True, exist_ok=True)
        self.hits = 0

    def _file(self, path: Path) -> Path:
        mtime = path.stat().st_mtime_ns
        key = hashlib.sha256(f"{self.digest}\0{path.resolve()}\0{mtime}".encode()).hexdigest()[:24]
        return self.root / f"{key}.npy"

    def get(self, path: Path):
        if self.root is None:
            return None
        f = self._file(path)
        if f.exists():
            self.hits += 1
            return np.load(f)
        return None

    def put(self, path: Path, emb: np.ndarray) -> None:
        if self.root is not None:
            np.save(self._file(path), emb)


def cmd_score(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    model = encoder_from_checkpoint(ckpt)
    trials = read_trials(args.trials)
    root = Path(args.root)
    cache = EmbeddingCache(Path(args.cache) if args.cache else None, ckpt.digest())
    embs: dict[str, np.ndarray] = {}
    for name in sorted({p for t in trials for p in (t.enroll, t.test)}):
        path = root / name
        if not path.exists():
            raise AudioError(f"missing audio file: {path}")
        e = cache.get(path)
        if e is None:
            e = extract_embedding(model, read_wav(path))
            cache.put(path, e)
        embs[name] = e
    scores = [cosine_score(embs[t.enroll], embs[t.test]) for t in trials]
    write_scores(args.out, trials, scores)
    print(f"scored {len(trials)} trials ({len(embs)} embeddings, {cache.hits} cached) -> {args.out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    s = scoreset_from_files(args.trials, args.scores)
    eer = compute_eer(s)
    dcf = compute_min_dcf(s, p_target=args.p_target)
    print(f"EER {eer:.2f}%  minDCF {dcf:.4f}")
    print(f"eer={eer:.6f}")
    print(f"min_dcf={dcf:.6f}")
    print(f"p_target={args.p_target}")
    print(f"n_target={s.targets.size}")
    print(f"n_nontarget={s.nontargets.size}")
    return EXIT_OK


def cmd_config(args) -> int:
    sys.stdout.write(resolve_config(args).to_text())
    return EXIT_OK


# --------------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", default="desk", choices=sorted(PROFILES), help="base profile (default desk)")
    p.add_argument("--config", help="file of 'section.key = value' lines")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join("  " + line for line in describe_keys())
    parser = _Parser(
        prog="rawnet3",
        description="RawNet3 raw-waveform speaker verification: training, scoring and metrics.",
        epilog="configuration keys (default  [module]):\n" + keys,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic speaker corpus")
    p.add_argument("--speakers", type=int, required=True)
    p.add_argument("--utts", type=int, required=True)
    p.add_argument("--seconds", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unlabeled", action="store_true", help="omit speaker labels from the manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser(
        "train",
        help="supervised, dino or finetune training",
        epilog="configuration keys (default  [module]):\n" + keys,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("flow", choices=["supervised", "dino", "finetune"])
    p.add_argument("--manifest")
    p.add_argument("--init", help="DINO checkpoint to fine-tune from")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--dry-run", action="store_true", help="resolve and echo the config, then stop")
    _config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("trials", help="draw a target/non-target trial list from a labelled manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--targets", type=int, default=500)
    p.add_argument("--nontargets", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trials)

    p = sub.add_parser("score", help="cosine-score a trial list with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--root", default=".", help="directory trial paths are relative to")
    p.add_argument("--cache", help="embedding cache directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("metrics", help="EER and minDCF of a score file")
    p.add_argument("--trials", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--p-target", type=float, default=0.05)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("config", help="print the resolved configuration")
    _config_args(p)
    p.set_defaults(func=cmd_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AudioError, CheckpointError, ContractError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
