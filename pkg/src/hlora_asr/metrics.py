"""Edit-distance error rates, mixed WER/CER averaging and LID confusion."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import MetricsError
from .kernels import edit_ops

OTS = "OTS"


@dataclass(frozen=True)
class ErrorCounts:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        return self.errors / max(self.ref_len, 1)

    def __add__(self, other: "ErrorCounts") -> "ErrorCounts":
        return ErrorCounts(self.substitutions + other.substitutions,
                           self.insertions + other.insertions,
                           self.deletions + other.deletions,
                           self.ref_len + other.ref_len)


def edit_distance(ref: Sequence[int], hyp: Sequence[int]) -> ErrorCounts:
    """Unit-cost Levenshtein alignment of ``hyp`` against ``ref``.

    Among minimum-cost alignments the backtrace prefers substitution, then
    deletion, then insertion, so the S/D/I split is deterministic.
    """
    s, d, i = edit_ops(list(ref), list(hyp))
    return ErrorCounts(s, i, d, len(ref))


def mixture_error_rate(results: Mapping[int, Iterable[ErrorCounts]],
                       unit_types: Mapping[int, str] | None = None) -> tuple[dict[int, float], float]:
    """Per-language rate over pooled counts, then an unweighted mean over languages.

    ``unit_types`` tags each language as ``word`` (WER) or ``char`` (CER); in the
    toy token space both are scored identically, the tag is for reporting.
    """
    per_lang = {}
    for lang, counts in results.items():
        counts = list(counts)
        if not counts:
            raise MetricsError(f"language {lang} has no scored utterances")
        per_lang[lang] = sum(counts, ErrorCounts()).rate
    if not per_lang:
        raise MetricsError("no languages to score")
    if unit_types is not None:
        missing = set(per_lang) - set(unit_types)
        if missing:
            raise MetricsError(f"no unit type for languages {sorted(missing)}")
    return per_lang, float(np.mean([per_lang[l] for l in sorted(per_lang)]))


@dataclass
class ConfusionMatrix:
    languages: tuple[int, ...]
    counts: np.ndarray  # [L, L+1], last column is OTS

    @property
    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts[:, : len(self.languages)]) / total) if total else 0.0

    @property
    def labels(self) -> list[str]:
        return [f"L{l}" for l in self.languages] + [OTS]

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *self.labels])
        for i, lang in enumerate(self.languages):
            w.writerow([f"L{lang}", *[int(c) for c in self.counts[i]]])
        return buf.getvalue()


def confusion_matrix(pairs: Iterable[tuple[int, object]], languages: Sequence[int]) -> ConfusionMatrix:
    """Tabulate (true, predicted) LID pairs; predictions outside ``languages`` go to OTS."""
    languages = tuple(languages)
    col = {l: i for i, l in enumerate(languages)}
    counts = np.zeros((len(languages), len(languages) + 1), dtype=np.int64)
    for true, pred in pairs:
        if true not in col:
            raise MetricsError(f"true language {true} outside target set {list(languages)}")
        counts[col[true], col.get(pred, len(languages))] += 1
    return ConfusionMatrix(languages, counts)


def format_table(header: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    """Column-aligned plain-text table."""
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def rates_csv(per_lang: Mapping[int, float], avg: float, unit_types: Mapping[int, str],
              header_comment: str | None = None, extra: Mapping[str, float] | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["language", "unit", "error_rate"])
    for lang in sorted(per_lang):
        w.writerow([f"L{lang}", "CER" if unit_types.get(lang) == "char" else "WER", f"{per_lang[lang]:.6f}"])
    w.writerow(["avg", "mixed", f"{avg:.6f}"])
    for key, val in (extra or {}).items():
        w.writerow([key, "", f"{val:.6f}"])
    return buf.getvalue()
