"""The synthetic speech-like corpus: generation, splits, and manifest round-trips.

Each character has an orthogonal prototype vector; an utterance emits each
transcript character for a few frames, plus a constant per-speaker shift
and i.i.d. noise. The speaker shift is the nuisance a model must learn to
ignore, which is what makes held-out-speaker evaluation meaningful.

Run with: python demos/02_synthetic_corpus.py
"""

import tempfile
from pathlib import Path

import numpy as np

from cptasr import SynthConfig, build_vocabulary, generate_synthetic_corpus, load_manifest, save_manifest, speaker_disjoint_split

cfg = SynthConfig(n_speakers=10, n_utterances=300, labeled_fraction=0.4, seed=7)
labeled, unlabeled, truth = generate_synthetic_corpus(cfg)
vocab = build_vocabulary(labeled.transcripts())

print(f"labeled: {len(labeled)} utterances, unlabeled: {len(unlabeled)}, "
      f"speakers: {len(labeled.speakers() | unlabeled.speakers())}")
print(f"vocabulary: {''.join(vocab.symbols)!r} ({vocab.size} symbols + blank)")

utt = labeled.utterances[0]
print(f"\nfirst utterance: id={utt.id} speaker={utt.speaker_id} "
      f"frames={utt.duration_frames} dim={utt.features.shape[1]}")
print(f"transcript: {utt.transcript!r}")

# ground truth for the unlabeled pool is returned separately, for scoring only
some_id = next(iter(truth))
print(f"\nheld-back truth example: {some_id} -> {truth[some_id]!r}")

# --- speaker-disjoint split --------------------------------------------------
# Whole speakers move into the eval side until the requested count is met,
# so the count can overshoot but speakers never straddle the boundary.
train_ds, eval_ds = speaker_disjoint_split(labeled, 20, seed=1)
print(f"\nsplit: train {len(train_ds)} utts / {sorted(train_ds.speakers())}")
print(f"       eval  {len(eval_ds)} utts / {sorted(eval_ds.speakers())}")
assert train_ds.speakers().isdisjoint(eval_ds.speakers())

# --- manifests ---------------------------------------------------------------
# One JSON record per line; features inline as base64 or in sidecar binary
# files. Round-trips are exact.
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "labeled.jsonl"
    save_manifest(labeled, path)
    reloaded = load_manifest(path)
    same = all(np.array_equal(x.features, y.features) for x, y in zip(labeled, reloaded))
    print(f"\nmanifest round-trip exact: {same}")
    print("first manifest line:", path.read_text().splitlines()[0][:100], "...")
