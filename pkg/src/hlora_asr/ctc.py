"""CTC loss, exhaustive-alignment oracle, greedy decoding and target helpers.

Blank is token id 0 throughout the package.
"""
from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np

from . import core
from .core import Tensor

BLANK = 0


class InfeasibleAlignmentError(ValueError):
    """No CTC path of the given length collapses to the target (loss is +inf)."""

    loss = math.inf


class OracleSizeError(ValueError):
    pass


class TokenizerError(ValueError):
    pass


def augment(target: Sequence[int], blank: int = BLANK) -> list[int]:
    """Blank-interleaved target ``[blank, y1, blank, y2, ..., yU, blank]``."""
    z = [blank] * (2 * len(target) + 1)
    z[1::2] = list(target)
    return z


def min_frames(target: Sequence[int]) -> int:
    """Shortest input that can emit ``target``: one frame per token plus one blank per repeat."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _check_target(target: Sequence[int], V: int, blank: int) -> None:
    for tok in target:
        if tok == blank or not 0 <= tok < V:
            raise ValueError(f"target token {tok} invalid for V={V}, blank={blank}")


def ctc_loss(log_probs: Tensor, target: Sequence[int], blank: int = BLANK) -> Tensor:
    """``-log p(target | log_probs)`` for a single ``[T, V]`` utterance.

    Raises InfeasibleAlignmentError when T is too short for the target.
    """
    T, V = log_probs.shape
    _check_target(target, V, blank)
    if T < min_frames(target):
        raise InfeasibleAlignmentError(
            f"T={T} frames cannot emit {len(target)} tokens (need {min_frames(target)})")
    batched = core.reshape(log_probs, (1, T, V))
    loss = core.ctc(batched, [T], [list(target)], blank)
    return core.reshape(loss, ())


def ctc_brute_force(log_probs, target: Sequence[int], blank: int = BLANK) -> float:
    """Enumerate every frame-label path; sum those collapsing to ``target``."""
    lp = np.asarray(getattr(log_probs, "data", log_probs), dtype=np.float64)
    T, V = lp.shape
    if V ** T > 10 ** 6:
        raise OracleSizeError(f"V^T = {V}^{T} exceeds the 1e6 enumeration guard")
    target = list(target)
    kept = []
    for path in itertools.product(range(V), repeat=T):
        if collapse(path, blank) == target:
            kept.append(sum(lp[t, v] for t, v in enumerate(path)))
    return -core.logsumexp(kept)


def collapse(path: Sequence[int], blank: int = BLANK) -> list[int]:
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for tok in path:
        if tok != prev and tok != blank:
            out.append(int(tok))
        prev = tok
    return out


def greedy_decode(log_probs) -> list[int]:
    """Best-path decoding; argmax ties go to the lower token id."""
    lp = np.asarray(getattr(log_probs, "data", log_probs))
    if lp.shape[0] == 0:
        return []
    return collapse(np.argmax(lp, axis=-1).tolist())


def prepend_language_token(target: Sequence[int], lang: int, tokenizer) -> list[int]:
    """``[language token] + target`` for two-stage base-model training."""
    try:
        tok = tokenizer.language_token(lang)
    except KeyError as exc:
        raise TokenizerError(f"language {lang} has no reserved token") from exc
    return [tok, *target]
