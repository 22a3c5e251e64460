"""Staged semi-supervised recipe: labeling model, confidence-filtered pseudo-labels,
continued pretraining, supervised finetuning, and the no-CPT comparison baseline."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import net as net_mod
from . import train as train_mod
from .corpus import Dataset, Utterance, Vocabulary, build_vocabulary, speaker_disjoint_split
from .ctc import greedy_decode
from .metrics import WerReport, relative_improvement
from .net import NetConfig, Parameters
from .optim import StageConfig
from .train import TrainHistory

logger = logging.getLogger(__name__)

# Deployment guidance: a labeling model at or above this validation WER is
# unlikely to produce useful pseudo-labels. A warning, never an abort.
LABELER_WER_GATE = 0.25

# Fixed offset for the internal validation carve so it never collides with
# a stage seed.
VAL_SPLIT_SEED_OFFSET = 9973
VAL_FRACTION = 0.10


class EmptyPseudoLabelPoolError(RuntimeError):
    """No pseudo-labels survived the confidence threshold."""


@dataclass
class PseudoLabel:
    utterance_id: str
    hypothesis: str
    confidence: float


@dataclass
class PseudoLabelStats:
    total: int
    kept: int
    empty_dropped: int
    below_threshold: int
    labels: list[PseudoLabel] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "kept": self.kept,
            "empty_dropped": self.empty_dropped,
            "below_threshold": self.below_threshold,
        }


@dataclass
class PipelineReport:
    """Everything the staged run produced, ready for side-by-side comparison."""

    labeler_val_wer: float
    pool_total: int
    pool_kept: int
    retained_fraction: float
    pseudo_label_stats: PseudoLabelStats
    cpt_history: TrainHistory
    finetune_history: TrainHistory
    labeler_history: TrainHistory
    final_eval_wer: WerReport
    baseline_eval_wer: WerReport | None = None
    relative_improvement: float | None = None

    def to_dict(self) -> dict:
        # wall-clock timings are excluded so identical runs serialize identically
        out = {
            "labeler_val_wer": self.labeler_val_wer,
            "pool_total": self.pool_total,
            "pool_kept": self.pool_kept,
            "retained_fraction": self.retained_fraction,
            "pseudo_label_stats": self.pseudo_label_stats.to_dict(),
            "cpt_history": self.cpt_history.to_dict(with_timing=False),
            "finetune_history": self.finetune_history.to_dict(with_timing=False),
            "labeler_history": self.labeler_history.to_dict(with_timing=False),
            "final_eval_wer": self.final_eval_wer.to_dict(),
        }
        out["baseline_eval_wer"] = self.baseline_eval_wer.to_dict() if self.baseline_eval_wer else None
        out["relative_improvement"] = self.relative_improvement
        return out


def attach_baseline(report: PipelineReport, baseline: WerReport) -> PipelineReport:
    """Record the no-CPT arm's score and the relative improvement over it."""
    report.baseline_eval_wer = baseline
    report.relative_improvement = relative_improvement(baseline.wer, report.final_eval_wer.wer)
    return report


def filter_pseudo_labels(labels: list[PseudoLabel], threshold: float) -> tuple[list[PseudoLabel], PseudoLabelStats]:
    """Keep labels whose confidence strictly exceeds the threshold.

    Empty hypotheses are dropped regardless of confidence; they carry no
    training signal.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    kept: list[PseudoLabel] = []
    empty_dropped = below_threshold = 0
    for label in labels:
        if not label.hypothesis:
            empty_dropped += 1
        elif label.confidence > threshold:
            kept.append(label)
        else:
            below_threshold += 1
    stats = PseudoLabelStats(
        total=len(labels),
        kept=len(kept),
        empty_dropped=empty_dropped,
        below_threshold=below_threshold,
        labels=labels,
    )
    return kept, stats


def generate_pseudo_labels(
    params: Parameters,
    cfg: NetConfig,
    pool: Dataset,
    threshold: float,
    vocab: Vocabulary,
    threads: int = 1,
) -> tuple[Dataset, PseudoLabelStats]:
    """Greedy-decode the unlabeled pool and keep confident, non-empty hypotheses.

    Output utterances are ordered by id, so the decode may run on any
    number of threads without changing the result.
    """
    if pool.kind != "unlabeled":
        raise ValueError("pseudo-labeling expects an unlabeled pool")

    utts = sorted(pool, key=lambda u: u.id)

    def decode(utt: Utterance) -> PseudoLabel:
        logits, _ = net_mod.forward(params, cfg, utt.features, train_mode=False)
        result = greedy_decode(logits, vocab)
        return PseudoLabel(utt.id, result.hypothesis, result.confidence)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool_exec:
            labels = list(pool_exec.map(decode, utts))
    else:
        labels = [decode(u) for u in utts]

    kept_labels, stats = filter_pseudo_labels(labels, threshold)
    by_id = {u.id: u for u in utts}
    kept = [
        Utterance(label.utterance_id, by_id[label.utterance_id].speaker_id,
                  by_id[label.utterance_id].features, label.hypothesis)
        for label in kept_labels
    ]
    return Dataset(kept, "pseudo_labeled"), stats


def _carve_validation(labeled: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out ~10% of the labeled data, speaker-disjoint, for early stopping."""
    val_count = max(1, round(VAL_FRACTION * len(labeled)))
    return speaker_disjoint_split(labeled, val_count, seed)


def run_baseline(
    labeled: Dataset,
    eval_ds: Dataset,
    cfg: StageConfig,
    net: NetConfig,
    vocab: Vocabulary,
) -> tuple[Parameters, WerReport, TrainHistory]:
    """Single supervised stage from a fresh initialization, scored on ``eval_ds``.

    Shares the code path and seed derivation of the pipeline's labeling
    stage, so with identical data and config it reproduces stage A exactly.
    """
    train_ds, val_ds = _carve_validation(labeled, cfg.seed + VAL_SPLIT_SEED_OFFSET)
    params = net_mod.init_parameters(net, cfg.seed)
    params, history = train_mod.train_stage(params, net, train_ds, val_ds, cfg, vocab)
    report = train_mod.evaluate_wer(params, net, eval_ds, vocab)
    return params, report, history


def run_cpt_pipeline(
    labeled: Dataset,
    pool: Dataset,
    eval_ds: Dataset,
    stage1: StageConfig,
    stage2: StageConfig,
    stage3: StageConfig,
    net: NetConfig,
    threshold: float,
    vocab: Vocabulary | None = None,
    out_dir: str | Path | None = None,
    cpt_init: str = "fresh",
    include_labeled_in_cpt: bool = False,
    threads: int = 1,
) -> tuple[Parameters, PipelineReport]:
    """Run the full staged recipe and return the finetuned model plus a report.

    Stage A trains the labeling model on the labeled data from a fresh
    initialization. Stage B pseudo-labels the unlabeled pool with greedy
    decoding and the confidence filter. Stage C continues pretraining on
    the retained pseudo-labels, by default from a fresh initialization of
    the same architecture (``cpt_init="labeler"`` starts from the labeling
    model instead; ``include_labeled_in_cpt`` mixes the labeled data into
    stage C). Stage D finetunes from the CPT checkpoint on the labeled
    data. When ``out_dir`` is set, "labeler", "cpt" and "final" checkpoints
    are written there, and the finetune stage starts from the cpt file it
    just wrote.
    """
    if cpt_init not in ("fresh", "labeler"):
        raise ValueError("cpt_init must be 'fresh' or 'labeler'")
    labeled_ids = {u.id for u in labeled}
    for other in (pool, eval_ds):
        overlap = labeled_ids & {u.id for u in other}
        if overlap:
            raise ValueError(f"datasets share utterance ids: {sorted(overlap)[:3]}...")
    if labeled.speakers() & eval_ds.speakers():
        raise ValueError("evaluation speakers leak into the labeled training data")
    if vocab is None:
        vocab = build_vocabulary(labeled.transcripts())

    out_path = Path(out_dir) if out_dir is not None else None

    # Stage A: labeling model
    train_ds, val_ds = _carve_validation(labeled, stage1.seed + VAL_SPLIT_SEED_OFFSET)
    labeler = net_mod.init_parameters(net, stage1.seed)
    labeler, labeler_history = train_mod.train_stage(labeler, net, train_ds, val_ds, stage1, vocab)
    labeler_wer = labeler_history.best_val_wer
    if labeler_wer >= LABELER_WER_GATE:
        logger.warning(
            "labeling model validation WER %.3f is at or above the %.0f%% quality gate; "
            "pseudo-labels may be too noisy to help", labeler_wer, 100 * LABELER_WER_GATE,
        )
    if out_path is not None:
        net_mod.save_checkpoint(labeler, net, out_path / "labeler.ckpt")

    # Stage B: pseudo-label the pool
    pseudo_ds, stats = generate_pseudo_labels(labeler, net, pool, threshold, vocab, threads=threads)
    logger.info("pseudo-labels: kept %d of %d (%d empty, %d below threshold)",
                stats.kept, stats.total, stats.empty_dropped, stats.below_threshold)
    if stats.kept == 0:
        raise EmptyPseudoLabelPoolError(
            f"no pseudo-labels survived threshold {threshold}; lower it or improve the labeling model"
        )

    # Stage C: continued pretraining on pseudo-labels
    cpt_data = pseudo_ds
    if include_labeled_in_cpt:
        mixed = list(pseudo_ds) + [Utterance(u.id, u.speaker_id, u.features, u.transcript) for u in train_ds]
        cpt_data = Dataset(mixed, "pseudo_labeled")
    cpt_start = labeler if cpt_init == "labeler" else net_mod.init_parameters(net, stage2.seed)
    cpt_params, cpt_history = train_mod.train_stage(cpt_start, net, cpt_data, val_ds, stage2, vocab)
    if out_path is not None:
        net_mod.save_checkpoint(cpt_params, net, out_path / "cpt.ckpt")
        cpt_params, _ = net_mod.load_checkpoint(out_path / "cpt.ckpt", expect_cfg=net)

    # Stage D: supervised finetune from the CPT checkpoint
    final_params, finetune_history = train_mod.train_stage(cpt_params, net, train_ds, val_ds, stage3, vocab)
    if out_path is not None:
        net_mod.save_checkpoint(final_params, net, out_path / "final.ckpt")

    final_report = train_mod.evaluate_wer(final_params, net, eval_ds, vocab)
    report = PipelineReport(
        labeler_val_wer=labeler_wer,
        pool_total=stats.total,
        pool_kept=stats.kept,
        retained_fraction=stats.kept / stats.total if stats.total else 0.0,
        pseudo_label_stats=stats,
        cpt_history=cpt_history,
        finetune_history=finetune_history,
        labeler_history=labeler_history,
        final_eval_wer=final_report,
    )
    return final_params, report
