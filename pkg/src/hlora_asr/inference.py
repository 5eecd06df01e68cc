"""Language-known, two-stage and single-pass decoding with per-stage timing."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .ctc import greedy_decode
from .data import Utterance
from .errors import CompatibilityError, DecodeError, RoutingError
from .lora import AdapterBank, LidTag
from .model import Encoder
from .training import strip_language_token

STRATEGIES = ("known", "two-stage", "single-pass")


@dataclass
class DecodeResult:
    utt_id: str
    strategy: str
    pred_lang: int
    hypothesis: list[int]
    posterior: np.ndarray | None = None
    forward_passes: int = 1
    stage_times: dict[str, float] = field(default_factory=dict)  # seconds
    lid_rule: str | None = None  # two-stage only: "first-token" or "frame-max"

    @property
    def total_time(self) -> float:
        return sum(self.stage_times.values())


def _frames(x) -> int:
    return int(x.lengths[0])


def decode_language_known(utt: Utterance, model: Encoder, bank: AdapterBank | None, lang,
                          tokenizer) -> DecodeResult:
    """One forward pass with the supplied language's experts."""
    lid = LidTag.of(lang).id
    t0 = time.perf_counter()
    x = model.front_end(utt.features)
    if bank is not None and bank.layout == "lidlora":
        x_h = model.forward_lower(x, bank, lid)
    else:
        x_h = model.forward_lower(x, bank)
    x_n = model.forward_upper(x_h, bank, lid if bank is not None else None)
    lp = model.ctc_projection(x_n, bank, lid if bank is not None else None).data[0, : _frames(x_n)]
    hyp = strip_language_token(greedy_decode(lp), tokenizer)
    return DecodeResult(utt.utt_id, "known", lid, hyp, None, 1, {"decode": time.perf_counter() - t0})


def stage1_language(log_probs: np.ndarray, tokenizer) -> int:
    """Language picked from the base model's CTC output.

    The first greedy token decides when it is a language token; otherwise the
    language token with the largest frame-wise maximum log-probability wins.
    """
    if log_probs.shape[0] == 0:
        raise DecodeError("stage 1 produced no frames")
    hyp = greedy_decode(log_probs)
    if hyp and tokenizer.is_language_token(hyp[0]):
        return tokenizer.token_language(hyp[0])
    lang_cols = [tokenizer.language_token(l) for l in range(tokenizer.n_languages)]
    return int(np.argmax(log_probs[:, lang_cols].max(axis=0)))


def stage1_rule(log_probs: np.ndarray, tokenizer) -> str:
    """Which branch of ``stage1_language`` applies to these log-probs."""
    hyp = greedy_decode(log_probs)
    return "first-token" if hyp and tokenizer.is_language_token(hyp[0]) else "frame-max"


def decode_two_stage(utt: Utterance, model: Encoder, bank: AdapterBank, tokenizer) -> DecodeResult:
    """Base-model pass for LID, then a full pass with that language's experts."""
    if bank is None or bank.layout != "lidlora":
        raise CompatibilityError("two-stage decoding needs a LIDLoRA adapter bank")
    t0 = time.perf_counter()
    lp1 = model.forward(utt.features).data[0]
    lang = stage1_language(lp1, tokenizer)
    t1 = time.perf_counter()
    if lang not in bank.per_language:
        raise RoutingError(f"stage 1 chose language {lang} which has no expert")
    lp2 = model.forward(utt.features, None, bank, lang).data[0]
    hyp = strip_language_token(greedy_decode(lp2), tokenizer)
    t2 = time.perf_counter()
    return DecodeResult(utt.utt_id, "two-stage", lang, hyp, None, 2,
                        {"stage1": t1 - t0, "stage2": t2 - t1}, stage1_rule(lp1, tokenizer))


def decode_single_pass(utt: Utterance, model: Encoder, bank: AdapterBank, tokenizer,
                       posterior_override: np.ndarray | None = None) -> DecodeResult:
    """Shared layers once, route on the LID posterior of X_h, finish the same pass.

    ``posterior_override`` replaces the predicted posterior (routing audits).
    """
    if bank is None or bank.layout != "hlora":
        raise CompatibilityError("single-pass decoding needs an HLoRA adapter bank")
    t0 = time.perf_counter()
    x_h = model.forward_lower(model.front_end(utt.features), bank)
    post = model.lid_posterior(x_h)[0] if posterior_override is None else np.asarray(posterior_override, float)
    if len(post) != len(bank.languages):
        raise RoutingError(f"posterior over {len(post)} languages, bank has {len(bank.languages)}")
    lang = bank.languages[int(np.argmax(post))]  # argmax ties -> lowest id
    x_n = model.forward_upper(x_h, bank, lang)
    lp = model.ctc_projection(x_n, bank, lang).data[0, : _frames(x_n)]
    hyp = strip_language_token(greedy_decode(lp), tokenizer)
    return DecodeResult(utt.utt_id, "single-pass", lang, hyp, post, 1,
                        {"decode": time.perf_counter() - t0})


def decode(strategy: str, utt: Utterance, model: Encoder, bank: AdapterBank | None, tokenizer) -> DecodeResult:
    if strategy == "known":
        return decode_language_known(utt, model, bank, utt.lang, tokenizer)
    if strategy == "two-stage":
        return decode_two_stage(utt, model, bank, tokenizer)
    if strategy == "single-pass":
        return decode_single_pass(utt, model, bank, tokenizer)
    raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")


def timing_report(results: list[DecodeResult]) -> dict[str, dict[str, float]]:
    """Mean/median wall time (ms) and mean forward-pass count per strategy."""
    if not results:
        raise ValueError("timing_report needs at least one result")
    out = {}
    for strategy in sorted({r.strategy for r in results}):
        rs = [r for r in results if r.strategy == strategy]
        ms = [1e3 * r.total_time for r in rs]
        out[strategy] = {"n": len(rs), "mean_ms": statistics.fmean(ms), "median_ms": statistics.median(ms),
                         "mean_forward_passes": statistics.fmean(r.forward_passes for r in rs)}
    return out
