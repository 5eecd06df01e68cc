"""Multilingual minibatch scheduling, the joint ASR+LID objective and Adam.

Modes and the parameters each one trains:

=============  ==========================================================
base-phase1    CTC projection and layer-sum weights
base-phase2    every backbone tensor plus the CTC projection
lidlora        experts of the batch language (all layers + CTC head)
hlora          shared adapters, LID linear, experts of the batch language
=============  ==========================================================
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import core
from .core import GradTape, Tensor
from .ctc import greedy_decode, prepend_language_token
from .data import CorpusManifest, Utterance, pad_batch, substream
from .errors import ConfigError, CorpusError
from .lora import AdapterBank
from .metrics import ErrorCounts, edit_distance
from .model import Encoder

log = logging.getLogger(__name__)

MODES = ("base-phase1", "base-phase2", "lidlora", "hlora")


@dataclass(frozen=True)
class TrainConfig:
    lambda_lid: float = 0.3
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs_phase1: int = 10
    epochs_phase2: int = 40
    epochs_adapt: int = 30

    def __post_init__(self):
        if not 0.0 <= self.lambda_lid <= 1.0:
            raise ConfigError(f"lambda_lid must be in [0, 1], got {self.lambda_lid}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


@dataclass
class LossBreakdown:
    l_asr: float
    l_lid: float | None
    combined: float
    lang: int
    step: int
    mode: str = ""
    skipped: int = 0  # infeasible utterances excluded from the batch mean


@dataclass
class EpochSchedule:
    batches: list[tuple[int, list[int]]]

    def __iter__(self):
        return iter(self.batches)

    def __len__(self) -> int:
        return len(self.batches)


def build_epoch_schedule(corpus: CorpusManifest, batch_size: int, seed) -> EpochSchedule:
    """Monolingual minibatches covering every utterance once, in shuffled order.

    Each language's utterances are shuffled and cut into contiguous batches
    (the last one may be smaller); the pooled batch list is then shuffled.
    """
    rng = np.random.default_rng(seed)
    batches = []
    for lang, idx in sorted(corpus.by_language().items()):
        if not idx:
            raise CorpusError(f"language {lang} has no training utterances")
        idx = [idx[i] for i in rng.permutation(len(idx))]
        batches += [(lang, idx[i:i + batch_size]) for i in range(0, len(idx), batch_size)]
    order = rng.permutation(len(batches))
    return EpochSchedule([batches[i] for i in order])


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: dict[str, AdamState],
                lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """One bias-corrected Adam step over a parameter group.

    Assigns fresh arrays to ``Tensor.data`` (never writes in place). Returns
    False, leaving everything untouched, if any gradient is non-finite.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, param {params[name].shape}")
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient for %s; skipping step", name)
            return False
    for name, g in grads.items():
        p = params[name]
        st = state.get(name)
        if st is None:
            st = state[name] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
        st.t += 1
        st.m = beta1 * st.m + (1 - beta1) * g
        st.v = beta2 * st.v + (1 - beta2) * g * g
        mhat = st.m / (1 - beta1 ** st.t)
        vhat = st.v / (1 - beta2 ** st.t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
    return True


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict[str, AdamState] = {}

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Adam":
        return cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> bool:
        return adam_update(params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------- metrics log

class MetricsLog:
    """Line-delimited JSON records, mirrored in memory."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def step(self, b: LossBreakdown) -> None:
        self.write({"type": "step", "step": b.step, "mode": b.mode, "lang": b.lang,
                    "l_asr": b.l_asr, "l_lid": b.l_lid, "combined": b.combined})


# ---------------------------------------------------------------- parameter groups

def all_parameters(model: Encoder, bank: AdapterBank | None) -> dict[str, Tensor]:
    out = dict(model.params)
    if bank is not None:
        out.update(bank.named_parameters())
    return out


def trainable_names(mode: str, model: Encoder, bank: AdapterBank | None, lang: int | None) -> list[str]:
    if mode == "base-phase1":
        return model.names("ctc") + model.names("layer_sum")
    if mode == "base-phase2":
        return model.names("backbone") + model.names("ctc")
    if mode == "lidlora":
        return bank.expert_names(lang)
    if mode == "hlora":
        return bank.shared_names() + model.names("lid") + bank.expert_names(lang)
    raise ConfigError(f"unknown training mode {mode!r}")


def _set_trainable(params: dict[str, Tensor], names: Sequence[str]) -> dict[str, Tensor]:
    keep = set(names)
    for n, t in params.items():
        t.requires_grad = n in keep
    return {n: params[n] for n in names}


# ---------------------------------------------------------------- losses

def _asr_loss(log_probs: Tensor, lengths, targets) -> tuple[Tensor | None, int]:
    losses = core.ctc(log_probs, lengths, targets)
    ok = np.flatnonzero(np.isfinite(losses.data))
    skipped = len(targets) - len(ok)
    if skipped:
        log.warning("%d infeasible utterance(s) excluded from the batch mean", skipped)
    if len(ok) == 0:
        return None, skipped
    return core.mean_all(core.take(losses, ok)), skipped


def combine(l_asr: Tensor, l_lid: Tensor, lam: float) -> Tensor:
    """``(1 - lam) * l_asr + lam * l_lid``."""
    return core.add(core.scale(l_asr, 1.0 - lam), core.scale(l_lid, lam))


def hlora_objective(model: Encoder, bank: AdapterBank, feats, lengths, targets, lang: int, lam: float):
    """Forward through the split encoder; returns ``(combined, l_asr, l_lid, skipped)``."""
    x_h = model.forward_lower(model.front_end(feats, lengths), bank)
    logits = model.lid_logits(x_h)
    l_lid = core.mean_all(core.nll(core.log_softmax(logits), [lang] * len(targets)))
    x_n = model.forward_upper(x_h, bank, lang)
    l_asr, skipped = _asr_loss(model.ctc_projection(x_n, bank, lang), x_n.lengths, targets)
    if l_asr is None:
        return None, None, l_lid, skipped
    return combine(l_asr, l_lid, lam), l_asr, l_lid, skipped


def _batch(corpus: CorpusManifest, idx: Sequence[int]) -> list[Utterance]:
    return [corpus.utterances[i] for i in idx]


def _apply(tape: GradTape, loss: Tensor, trainable: dict[str, Tensor], opt: Adam) -> None:
    tape.backward(loss)
    opt.step(trainable, {n: tape.gradient(t) for n, t in trainable.items()})


def train_step_hlora(batch: Sequence[Utterance], model: Encoder, bank: AdapterBank, opt: Adam,
                     lam: float, step: int = 0) -> LossBreakdown:
    lang = batch[0].lang
    if any(u.lang != lang for u in batch):
        raise CorpusError("hlora step needs a monolingual batch")
    trainable = _set_trainable(all_parameters(model, bank), trainable_names("hlora", model, bank, lang))
    feats, lengths = pad_batch(batch)
    with GradTape() as tape:
        combined, l_asr, l_lid, skipped = hlora_objective(
            model, bank, feats, lengths, [list(u.tokens) for u in batch], lang, lam)
    if combined is None:
        return LossBreakdown(float("nan"), l_lid.item(), float("nan"), lang, step, "hlora", skipped)
    _apply(tape, combined, trainable, opt)
    return LossBreakdown(l_asr.item(), l_lid.item(), combined.item(), lang, step, "hlora", skipped)


def train_step_lidlora(batch: Sequence[Utterance], model: Encoder, bank: AdapterBank, opt: Adam,
                       step: int = 0) -> LossBreakdown:
    lang = batch[0].lang
    trainable = _set_trainable(all_parameters(model, bank), trainable_names("lidlora", model, bank, lang))
    feats, lengths = pad_batch(batch)
    with GradTape() as tape:
        lp = model.forward(feats, lengths, bank, lang)
        l_asr, skipped = _asr_loss(lp, -(-lengths // model.config.downsample),
                                   [list(u.tokens) for u in batch])
    if l_asr is None:
        return LossBreakdown(float("nan"), None, float("nan"), lang, step, "lidlora", skipped)
    _apply(tape, l_asr, trainable, opt)
    return LossBreakdown(l_asr.item(), None, l_asr.item(), lang, step, "lidlora", skipped)


def train_step_base(batch: Sequence[Utterance], model: Encoder, opt: Adam, phase: str, tokenizer,
                    step: int = 0) -> LossBreakdown:
    lang = batch[0].lang
    trainable = _set_trainable(model.params, trainable_names(phase, model, None, None))
    feats, lengths = pad_batch(batch)
    targets = [prepend_language_token(u.tokens, u.lang, tokenizer) for u in batch]
    with GradTape() as tape:
        lp = model.forward(feats, lengths)
        l_asr, skipped = _asr_loss(lp, -(-lengths // model.config.downsample), targets)
    if l_asr is None:
        return LossBreakdown(float("nan"), None, float("nan"), lang, step, phase, skipped)
    _apply(tape, l_asr, trainable, opt)
    return LossBreakdown(l_asr.item(), None, l_asr.item(), lang, step, phase, skipped)


# ---------------------------------------------------------------- evaluation during training

def dev_error(model: Encoder, bank: AdapterBank | None, corpus: CorpusManifest, tokenizer,
              batch_size: int = 32) -> dict[int, float]:
    """Language-known greedy error rate per language (leading language token stripped)."""
    counts: dict[int, ErrorCounts] = {}
    for lang, idx in sorted(corpus.by_language().items()):
        total = ErrorCounts()
        for i in range(0, len(idx), batch_size):
            utts = _batch(corpus, idx[i:i + batch_size])
            feats, lengths = pad_batch(utts)
            lp = model.forward(feats, lengths, bank, lang if bank is not None else None).data
            frames = -(-lengths // model.config.downsample)
            for b, u in enumerate(utts):
                hyp = strip_language_token(greedy_decode(lp[b, : frames[b]]), tokenizer)
                total = total + edit_distance(u.tokens, hyp)
        counts[lang] = total
    return {l: c.rate for l, c in counts.items()}


def strip_language_token(hyp: list[int], tokenizer) -> list[int]:
    return hyp[1:] if hyp and tokenizer.is_language_token(hyp[0]) else hyp


# ---------------------------------------------------------------- recipes

def _epoch_record(mode, epoch, model, bank, dev, tokenizer, extra=None) -> dict:
    rec = {"type": "epoch", "mode": mode, "epoch": epoch}
    if dev is not None:
        per = dev_error(model, bank, dev, tokenizer)
        rec["dev_error"] = float(np.mean(list(per.values())))
        rec["dev_error_per_lang"] = {f"L{l}": v for l, v in per.items()}
    if extra:
        rec.update(extra)
    return rec


def _run_epochs(mode: str, epochs: int, corpus: CorpusManifest, cfg: TrainConfig, seed: int,
                step_fn: Callable, metrics: MetricsLog | None, on_epoch: Callable | None,
                history: list[LossBreakdown]) -> None:
    for epoch in range(epochs):
        sched = build_epoch_schedule(corpus, cfg.batch_size, substream(seed, "schedule", mode, str(epoch)).integers(2 ** 63))
        for lang, idx in sched:
            b = step_fn(_batch(corpus, idx), len(history))
            history.append(b)
            if metrics is not None:
                metrics.step(b)
        if on_epoch is not None:
            on_epoch(epoch + 1)


def train_base(corpus: CorpusManifest, model: Encoder, cfg: TrainConfig, tokenizer, seed: int = 0,
               metrics: MetricsLog | None = None, dev: CorpusManifest | None = None) -> list[LossBreakdown]:
    """Two-phase recipe on language-token-prefixed targets.

    Phase 1 trains only the CTC projection and layer-sum weights; phase 2
    trains everything. The backbone is left frozen (requires_grad False).
    """
    history: list[LossBreakdown] = []
    for phase, epochs in (("base-phase1", cfg.epochs_phase1), ("base-phase2", cfg.epochs_phase2)):
        opt = Adam.from_config(cfg)

        def on_epoch(e, phase=phase):
            if metrics is not None:
                metrics.write(_epoch_record(phase, e, model, None, dev, tokenizer))

        if metrics is not None and phase == "base-phase1":
            metrics.write(_epoch_record(phase, 0, model, None, dev, tokenizer))
        _run_epochs(phase, epochs, corpus, cfg, seed,
                    lambda batch, step, phase=phase, opt=opt: train_step_base(batch, model, opt, phase, tokenizer, step),
                    metrics, on_epoch, history)
    _set_trainable(model.params, [])
    return history


def train_adapters(mode: str, corpus: CorpusManifest, model: Encoder, bank: AdapterBank, cfg: TrainConfig,
                   tokenizer=None, seed: int = 0, metrics: MetricsLog | None = None,
                   dev: CorpusManifest | None = None, epochs: int | None = None) -> list[LossBreakdown]:
    """Adapt a frozen base model with a ``lidlora`` or ``hlora`` bank."""
    if mode not in ("lidlora", "hlora") or bank.layout != mode:
        raise ConfigError(f"mode {mode!r} does not match bank layout {bank.layout!r}")
    opt = Adam.from_config(cfg)
    history: list[LossBreakdown] = []
    if mode == "hlora":
        step_fn = lambda batch, step: train_step_hlora(batch, model, bank, opt, cfg.lambda_lid, step)
    else:
        step_fn = lambda batch, step: train_step_lidlora(batch, model, bank, opt, step)

    def on_epoch(e):
        if metrics is None:
            return
        extra = {"lid_accuracy": lid_accuracy(model, bank, dev)} if (mode == "hlora" and dev is not None) else None
        metrics.write(_epoch_record(mode, e, model, bank, dev, tokenizer, extra))

    on_epoch(0)
    _run_epochs(mode, cfg.epochs_adapt if epochs is None else epochs, corpus, cfg, seed,
                step_fn, metrics, on_epoch, history)
    _set_trainable(all_parameters(model, bank), [])
    return history


def lid_accuracy(model: Encoder, bank: AdapterBank, corpus: CorpusManifest, batch_size: int = 32) -> float:
    hits = 0
    for i in range(0, len(corpus), batch_size):
        utts = corpus.utterances[i:i + batch_size]
        feats, lengths = pad_batch(utts)
        post = model.lid_posterior(model.forward_lower(model.front_end(feats, lengths), bank))
        hits += int(sum(int(np.argmax(p)) == u.lang for p, u in zip(post, utts)))
    return hits / len(corpus)
