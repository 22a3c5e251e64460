"""Command-line surface for the staged pipeline.

One JSON run-config file drives every command; a handful of flags override
individual fields. All randomness fans out from the config's single seed
by fixed offsets (synth data +0, stage1 +1, stage2 +2, stage3 +3,
baseline +4, eval split +5), so one number reproduces a whole run.

Exit codes: 0 success, 2 config error, 3 data error, 4 empty pseudo-label
pool, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import corpus, net, pipeline, train
from .corpus import ManifestError, SynthConfig, Vocabulary, build_vocabulary, load_manifest, save_manifest
from .metrics import relative_improvement
from .optim import StageConfig, preset
from .pipeline import EmptyPseudoLabelPoolError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_EMPTY_POOL = 4

OUT_DIR_ENV = "CPTASR_OUT_DIR"

SEED_OFFSETS = {"synth": 0, "stage1": 1, "stage2-cpt": 2, "stage3-finetune": 3, "baseline": 4, "split": 5}

STAGE_NAMES = ("stage1", "stage2-cpt", "stage3-finetune", "baseline")


class ConfigError(ValueError):
    """Raised for unusable run configuration."""


class RunConfig:
    """Parsed run-config file with preset-backed stage configs.

    Relative paths resolve against the working directory.
    """

    def __init__(self, raw: dict):
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a JSON object")
        self.seed = int(raw.get("seed", 0))
        self.threshold = float(raw.get("threshold", 0.75))
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold {self.threshold} outside [0, 1]")
        out_dir = os.environ.get(OUT_DIR_ENV) or raw.get("out_dir", "runs")
        self.out_dir = Path(out_dir)
        self.net_raw = raw.get("net", {})
        self.synth_raw = raw.get("synth", {})
        stages = raw.get("stages", {})
        unknown = set(stages) - set(STAGE_NAMES)
        if unknown:
            raise ConfigError(f"unknown stage names {sorted(unknown)}; expected {STAGE_NAMES}")
        self.stage_raw = stages
        self.paths = {k: Path(v) for k, v in raw.get("paths", {}).items()}

    def stage(self, name: str) -> StageConfig:
        overrides = dict(self.stage_raw.get(name, {}))
        overrides.setdefault("seed", self.seed + SEED_OFFSETS[name])
        try:
            return preset(name, **overrides)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad stage config for {name!r}: {exc}") from None

    def synth_config(self) -> SynthConfig:
        raw = dict(self.synth_raw)
        raw.setdefault("seed", self.seed + SEED_OFFSETS["synth"])
        if "chars_per_utterance" in raw:
            raw["chars_per_utterance"] = tuple(raw["chars_per_utterance"])
        if "frames_per_char" in raw:
            raw["frames_per_char"] = tuple(raw["frames_per_char"])
        try:
            return SynthConfig(**raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad synth config: {exc}") from None

    def net_config(self, vocab: Vocabulary) -> net.NetConfig:
        raw = dict(self.net_raw)
        raw.setdefault("vocab_size", vocab.size)
        if raw["vocab_size"] != vocab.size:
            raise ConfigError(f"net vocab_size {raw['vocab_size']} != vocabulary size {vocab.size}")
        try:
            return net.NetConfig(**raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad net config: {exc}") from None

    def path(self, key: str) -> Path:
        if key not in self.paths:
            raise ConfigError(f"run config is missing paths.{key}")
        return self.paths[key]


def load_run_config(path: str | Path, overrides: argparse.Namespace | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc.msg}") from None
    cfg = RunConfig(raw)
    if overrides is not None:
        if getattr(overrides, "seed", None) is not None:
            cfg.seed = overrides.seed
        if getattr(overrides, "threshold", None) is not None:
            cfg.threshold = overrides.threshold
        if getattr(overrides, "out_dir", None) is not None:
            cfg.out_dir = Path(overrides.out_dir)
    return cfg


def _save_vocab(vocab: Vocabulary, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"symbols": list(vocab.symbols)}) + "\n", encoding="utf-8")


def _load_vocab(path: Path) -> Vocabulary:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        return Vocabulary(symbols=tuple(data["symbols"]))
    except FileNotFoundError:
        raise ManifestError(f"vocabulary file {path} does not exist; run train-labeler first") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ManifestError(f"vocabulary file {path} is unreadable: {exc}") from None


def _write_json(data: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args)
    synth = cfg.synth_config()
    labeled, unlabeled, truth = corpus.generate_synthetic_corpus(synth)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    save_manifest(labeled, cfg.out_dir / "labeled.jsonl")
    save_manifest(unlabeled, cfg.out_dir / "unlabeled.jsonl")
    _write_json(truth, cfg.out_dir / "truth.json")
    print(f"wrote {len(labeled)} labeled and {len(unlabeled)} unlabeled utterances to {cfg.out_dir}")
    if len(unlabeled) == 0:
        print("warning: labeled_fraction leaves the unlabeled manifest empty", file=sys.stderr)
    return EXIT_OK


def cmd_split(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args)
    ds = load_manifest(Path(args.manifest))
    seed = args.seed if args.seed is not None else cfg.seed + SEED_OFFSETS["split"]
    train_ds, eval_ds = corpus.speaker_disjoint_split(ds, args.eval_count, seed)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    save_manifest(train_ds, cfg.out_dir / "train.jsonl")
    save_manifest(eval_ds, cfg.out_dir / "eval.jsonl")
    print(f"train: {len(train_ds)} utterances / {len(train_ds.speakers())} speakers; "
          f"eval: {len(eval_ds)} utterances / {len(eval_ds.speakers())} speakers")
    return EXIT_OK


def cmd_train_labeler(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args)
    labeled = load_manifest(cfg.path("labeled"))
    vocab = build_vocabulary(labeled.transcripts())
    net_cfg = cfg.net_config(vocab)
    stage = cfg.stage("stage1")
    train_ds, val_ds = pipeline._carve_validation(labeled, stage.seed + pipeline.VAL_SPLIT_SEED_OFFSET)
    params = net.init_parameters(net_cfg, stage.seed)
    params, history = train.train_stage(params, net_cfg, train_ds, val_ds, stage, vocab)
    _save_vocab(vocab, cfg.out_dir / "vocab.json")
    net.save_checkpoint(params, net_cfg, cfg.out_dir / "labeler.ckpt")
    train.save_history(history, cfg.out_dir / "labeler_history.jsonl")
    print(f"labeler: best val WER {history.best_val_wer:.4f} at epoch {history.best_epoch}; "
          f"checkpoint at {cfg.out_dir / 'labeler.ckpt'}")
    return EXIT_OK


def cmd_pseudolabel(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args)
    vocab = _load_vocab(cfg.out_dir / "vocab.json")
    params, net_cfg = net.load_checkpoint(cfg.out_dir / "labeler.ckpt")
    pool = load_manifest(cfg.path("unlabeled"))
    pseudo_ds, stats = pipeline.generate_pseudo_labels(
        params, net_cfg, pool, cfg.threshold, vocab, threads=args.threads
    )
    save_manifest(pseudo_ds, cfg.out_dir / "pseudo.jsonl")
    _write_json(stats.to_dict(), cfg.out_dir / "pseudo_stats.json")
    print(f"kept {stats.kept} of {stats.total} pseudo-labels "
          f"({stats.empty_dropped} empty, {stats.below_threshold} below threshold {cfg.threshold})")
    if stats.kept == 0:
        raise EmptyPseudoLabelPoolError(f"no pseudo-labels survived threshold {cfg.threshold}")
    return EXIT_OK


def cmd_cpt(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args)
    vocab = _load_vocab(cfg.out_dir / "vocab.json")
    pseudo_ds = load_manifest(cfg.out_dir / "pseudo.jsonl", kind="pseudo_labeled")
    if len(pseudo_ds) == 0:
        raise EmptyPseudoLabelPoolError("pseudo-label manifest is empty")
    labeled = load_manifest(cfg.path("labeled"))
    stage1 = cfg.stage("stage1")
    stage = cfg.stage("stage2-cpt")
    net_cfg = cfg.net_config(vocab)
    _, val_ds = pipeline._carve_validation(labeled, stage1.seed + pipeline.VAL_SPLIT_SEED_OFFSET)
    if args.from_labeler:
        start, _ = net.load_checkpoint(cfg.out_dir / "labeler.ckpt", expect_cfg=net_cfg)
    else:
        start = net.init_parameters(net_cfg, stage.seed)
    params, history = train.train_stage(start, net_cfg, pseudo_ds, val_ds, stage, vocab)
    net.save_checkpoint(params, net_cfg, cfg.out_dir / "cpt.ckpt")
    train.save_history(history, cfg.out_dir / "cpt_history.jsonl")
    print(f"cpt: best val WER {history.best_val_wer:.4f}; checkpoint at {cfg.out_dir / 'cpt.ckpt'}")
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args)
    vocab = _load_vocab(cfg.out_dir / "vocab.json")
    labeled = load_manifest(cfg.path("labeled"))
    stage1 = cfg.stage("stage1")
    stage = cfg.stage("stage3-finetune")
    net_cfg = cfg.net_config(vocab)
    start, _ = net.load_checkpoint(cfg.out_dir / "cpt.ckpt", expect_cfg=net_cfg)
    train_ds, val_ds = pipeline._carve_validation(labeled, stage1.seed + pipeline.VAL_SPLIT_SEED_OFFSET)
    params, history = train.train_stage(start, net_cfg, train_ds, val_ds, stage, vocab)
    net.save_checkpoint(params, net_cfg, cfg.out_dir / "final.ckpt")
    train.save_history(history, cfg.out_dir / "finetune_history.jsonl")
    print(f"finetune: best val WER {history.best_val_wer:.4f}; checkpoint at {cfg.out_dir / 'final.ckpt'}")
    return EXIT_OK


def cmd_baseline(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args)
    labeled = load_manifest(cfg.path("labeled"))
    eval_ds = load_manifest(cfg.path("eval"))
    vocab = build_vocabulary(labeled.transcripts())
    net_cfg = cfg.net_config(vocab)
    stage = cfg.stage("baseline")
    params, report, history = pipeline.run_baseline(labeled, eval_ds, stage, net_cfg, vocab)
    _save_vocab(vocab, cfg.out_dir / "vocab.json")
    net.save_checkpoint(params, net_cfg, cfg.out_dir / "baseline.ckpt")
    train.save_history(history, cfg.out_dir / "baseline_history.jsonl")
    _write_json(report.to_dict(), cfg.out_dir / "baseline_wer.json")
    print(f"baseline eval WER {report.wer:.4f}; report at {cfg.out_dir / 'baseline_wer.json'}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args)
    ds = load_manifest(Path(args.manifest))
    params, net_cfg = net.load_checkpoint(Path(args.checkpoint))
    vocab_path = Path(args.vocab) if args.vocab else cfg.out_dir / "vocab.json"
    vocab = _load_vocab(vocab_path) if vocab_path.exists() else build_vocabulary(ds.transcripts())
    if vocab.size != net_cfg.vocab_size:
        raise ManifestError(f"vocabulary size {vocab.size} does not match checkpoint vocab_size {net_cfg.vocab_size}")
    report = train.evaluate_wer(params, net_cfg, ds, vocab)
    out_path = Path(args.out) if args.out else cfg.out_dir / "eval_wer.json"
    _write_json(report.to_dict(), out_path)
    print(f"WER {report.wer:.4f} (S={report.substitutions} I={report.insertions} "
          f"D={report.deletions} / {report.ref_words} ref words); report at {out_path}")
    return EXIT_OK


def cmd_pipeline(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args)
    labeled = load_manifest(cfg.path("labeled"))
    pool = load_manifest(cfg.path("unlabeled"))
    eval_ds = load_manifest(cfg.path("eval"))
    vocab = build_vocabulary(labeled.transcripts())
    net_cfg = cfg.net_config(vocab)
    _save_vocab(vocab, cfg.out_dir / "vocab.json")
    final_params, report = pipeline.run_cpt_pipeline(
        labeled, pool, eval_ds,
        cfg.stage("stage1"), cfg.stage("stage2-cpt"), cfg.stage("stage3-finetune"),
        net_cfg, cfg.threshold, vocab,
        out_dir=cfg.out_dir,
        cpt_init="labeler" if args.cpt_from_labeler else "fresh",
        include_labeled_in_cpt=args.mix_labeled,
        threads=args.threads,
    )
    if args.with_baseline:
        _, baseline_report, _ = pipeline.run_baseline(labeled, eval_ds, cfg.stage("baseline"), net_cfg, vocab)
        pipeline.attach_baseline(report, baseline_report)
        _write_json(baseline_report.to_dict(), cfg.out_dir / "baseline_wer.json")
    report_path = cfg.out_dir / "report.json"
    _write_json(report.to_dict(), report_path)
    _write_json(report.final_eval_wer.to_dict(), cfg.out_dir / "final_wer.json")
    print(f"final eval WER {report.final_eval_wer.wer:.4f}; report at {report_path}")
    return EXIT_OK


def _read_wer(path: Path) -> float:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        return float(data["wer"])
    except FileNotFoundError:
        raise ManifestError(f"report file {path} does not exist") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"report file {path} is unreadable: {exc}") from None


def cmd_report(args: argparse.Namespace) -> int:
    baseline_wer = _read_wer(Path(args.baseline))
    rows = []
    for entry in args.run:
        name, _, path = entry.partition("=")
        if not path:
            raise ConfigError(f"--run expects NAME=PATH, got {entry!r}")
        run_wer = _read_wer(Path(path))
        delta = relative_improvement(baseline_wer, run_wer)
        rows.append((name, run_wer, delta))
    print(f"{'Config':<20} {'Baseline':>10} {'Final WER':>10} {'Delta':>8}")
    for name, run_wer, delta in rows:
        print(f"{name:<20} {baseline_wer:>10.2%} {run_wer:>10.2%} {delta:>+8.1%}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cptasr", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--verbose", action="store_true", help="enable info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON run-config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threshold", type=float, default=None, help="override the confidence threshold")
        p.add_argument("--out-dir", default=None, help=f"override the output directory (or set {OUT_DIR_ENV})")
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "generate the synthetic corpus manifests")

    p = add("split", cmd_split, "speaker-disjoint train/eval split of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--eval-count", type=int, required=True)

    add("train-labeler", cmd_train_labeler, "stage 1: train the labeling model")

    p = add("pseudolabel", cmd_pseudolabel, "stage 2a: decode the unlabeled pool with confidence filtering")
    p.add_argument("--threads", type=int, default=1, help="worker threads for the decode pass")

    p = add("cpt", cmd_cpt, "stage 2b: continued pretraining on pseudo-labels")
    p.add_argument("--from-labeler", action="store_true", help="start CPT from the labeling model instead of fresh")

    add("finetune", cmd_finetune, "stage 3: supervised finetune from the CPT checkpoint")
    add("baseline", cmd_baseline, "train the no-CPT comparison baseline")

    p = add("eval", cmd_eval, "score a checkpoint against a labeled manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab", default=None)
    p.add_argument("--out", default=None)

    p = add("pipeline", cmd_pipeline, "run the full staged pipeline")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--with-baseline", action="store_true", help="also train the no-CPT baseline and report the delta")
    p.add_argument("--cpt-from-labeler", action="store_true")
    p.add_argument("--mix-labeled", action="store_true", help="include labeled data during CPT")

    p = sub.add_parser("report", help="merge saved WER reports into a relative-improvement table")
    p.add_argument("--baseline", required=True, help="baseline WerReport JSON")
    p.add_argument("--run", action="append", required=True, metavar="NAME=PATH",
                   help="final WerReport JSON to compare (repeatable)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EmptyPseudoLabelPoolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY_POOL
    except (ManifestError, FileNotFoundError, net.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
