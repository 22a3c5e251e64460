"""Word/character error rate via Levenshtein alignment, plus report arithmetic."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class WerReport:
    """Corpus-level error counts pooled over utterances.

    ``wer`` may exceed 1.0 when hypotheses contain many insertions.
    """

    substitutions: int
    insertions: int
    deletions: int
    ref_words: int
    wer: float
    per_utterance: list[dict] | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "substitutions": self.substitutions,
            "insertions": self.insertions,
            "deletions": self.deletions,
            "ref_words": self.ref_words,
            "wer": self.wer,
        }


def normalize_text(text: str) -> str:
    """Trim and collapse whitespace runs to single spaces. No case folding."""
    return " ".join(text.split())


def edit_distance(ref: list[str], hyp: list[str]) -> tuple[int, int, int]:
    """Minimal unit-cost alignment of ``hyp`` against ``ref``.

    Returns (substitutions, insertions, deletions). When the minimal cost
    admits several decompositions, the backtrace prefers substitution over
    insertion over deletion, so the counts are deterministic.
    """
    n, m = len(ref), len(hyp)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dp[i][0] = i
    for j in range(1, m + 1):
        dp[0][j] = j
    for i in range(1, n + 1):
        ref_tok = ref[i - 1]
        row, prev_row = dp[i], dp[i - 1]
        for j in range(1, m + 1):
            diag = prev_row[j - 1] + (0 if ref_tok == hyp[j - 1] else 1)
            ins = row[j - 1] + 1
            dele = prev_row[j] + 1
            row[j] = min(diag, ins, dele)

    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        cost = dp[i][j]
        if i > 0 and j > 0 and cost == dp[i - 1][j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
            if ref[i - 1] != hyp[j - 1]:
                subs += 1
            i -= 1
            j -= 1
        elif j > 0 and cost == dp[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return subs, ins, dels


def _tokenize(text: str, unit: str) -> list[str]:
    text = normalize_text(text)
    if unit == "word":
        return text.split(" ") if text else []
    if unit == "char":
        return list(text)
    raise ValueError(f"unknown unit {unit!r}, expected 'word' or 'char'")


def wer(pairs: list[tuple[str, str]], unit: str = "word", keep_per_utterance: bool = False) -> WerReport:
    """Corpus-level error rate over (reference, hypothesis) pairs.

    Edits are summed across utterances and divided by the summed reference
    token count (pooled, not a mean of per-utterance rates).
    """
    total_s = total_i = total_d = total_ref = 0
    per_utt: list[dict] | None = [] if keep_per_utterance else None
    for ref_text, hyp_text in pairs:
        ref_toks = _tokenize(ref_text, unit)
        hyp_toks = _tokenize(hyp_text, unit)
        s, ins, d = edit_distance(ref_toks, hyp_toks)
        total_s += s
        total_i += ins
        total_d += d
        total_ref += len(ref_toks)
        if per_utt is not None:
            per_utt.append({"ref": ref_text, "hyp": hyp_text, "S": s, "I": ins, "D": d, "ref_len": len(ref_toks)})
    if total_ref == 0:
        raise ValueError("all references are empty; error rate is undefined")
    rate = (total_s + total_i + total_d) / total_ref
    return WerReport(total_s, total_i, total_d, total_ref, rate, per_utt)


def relative_improvement(baseline_wer: float, new_wer: float) -> float:
    """Signed relative change (new - baseline) / baseline; negative is better."""
    if baseline_wer <= 0:
        raise ValueError("baseline WER must be positive")
    return (new_wer - baseline_wer) / baseline_wer
