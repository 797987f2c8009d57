"""Levenshtein alignment counts and pooled WER/CER."""
from dataclasses import dataclass
import math

from . import kernels


@dataclass(frozen=True)
class AlignmentCounts:
    N: int
    D: int = 0
    I: int = 0
    S: int = 0

    def __post_init__(self):
        if self.N < 0 or min(self.D, self.I, self.S) < 0:
            raise ValueError("counts must be non-negative")
        if self.D + self.S > self.N:
            raise ValueError("D + S cannot exceed N")

    @property
    def errors(self):
        return self.D + self.I + self.S

    @property
    def rate(self):
        """(D+I+S)/N; ``inf`` when N == 0 but the hypothesis is not empty."""
        if self.N == 0:
            return 0.0 if self.errors == 0 else math.inf
        return self.errors / self.N

    def __add__(self, other):
        return AlignmentCounts(self.N + other.N, self.D + other.D, self.I + other.I, self.S + other.S)


def edit_distance(ref, hyp):
    """Minimal alignment of two unit sequences.

    Among equal-cost alignments the one with the most substitutions is
    reported (so insertions and deletions are as few as possible).
    """
    ref, hyp = list(ref), list(hyp)
    s, d, i = kernels.edit_counts(ref, hyp)
    return AlignmentCounts(len(ref), d, i, s)


def units(text, unit):
    if unit == "word":
        text = text.strip()
        return text.split(" ") if text else []
    if unit == "char":
        return list(text)
    raise ValueError(f"unit must be 'word' or 'char', got {unit!r}")


def wer(ref, hyp):
    return edit_distance(units(ref, "word"), units(hyp, "word")).rate


def cer(ref, hyp):
    return edit_distance(units(ref, "char"), units(hyp, "char")).rate


@dataclass
class CorpusReport:
    unit: str
    total: AlignmentCounts
    per_utterance: dict
    missing_in_hyp: list
    missing_in_ref: list

    @property
    def rate(self):
        return self.total.rate

    @property
    def ok(self):
        return not (self.missing_in_hyp or self.missing_in_ref)

    def summary_tsv(self):
        t = self.total
        return ("unit\tN\tD\tI\tS\trate\tmissing_hyp\tmissing_ref\n"
                f"{self.unit}\t{t.N}\t{t.D}\t{t.I}\t{t.S}\t{t.rate:.6f}\t"
                f"{len(self.missing_in_hyp)}\t{len(self.missing_in_ref)}\n")

    def utterance_tsv(self):
        lines = ["utt_id\tN\tD\tI\tS\trate"]
        for uid in sorted(self.per_utterance):
            c = self.per_utterance[uid]
            lines.append(f"{uid}\t{c.N}\t{c.D}\t{c.I}\t{c.S}\t{c.rate:.6f}")
        return "\n".join(lines) + "\n"


def score_corpus(refs, hyps, unit="word"):
    """Pool counts over utterances present in both ``refs`` and ``hyps`` (id -> text)."""
    total = AlignmentCounts(0)
    per = {}
    for uid in sorted(refs):
        if uid not in hyps:
            continue
        c = edit_distance(units(refs[uid], unit), units(hyps[uid], unit))
        per[uid] = c
        total = total + c
    return CorpusReport(
        unit, total, per,
        missing_in_hyp=sorted(set(refs) - set(hyps)),
        missing_in_ref=sorted(set(hyps) - set(refs)),
    )


def read_table(path):
    """``utt_id<TAB>text`` lines -> dict. Extra columns are ignored, so manifests work too."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            out[parts[0]] = parts[-1] if len(parts) > 1 else ""
    return out
