"""Transformer encoder split at layer k, with LID and CTC heads.

Computation graph (HLoRA family)::

    features -> front_end -> +positions -> layers[0:k] (shared adapters) = X_h
    X_h -> masked mean -> LID linear -> posterior
    X_h -> layers[k:N] (language experts) = X_N -> final norm -> CTC linear (+expert) -> log-probs

The base and LIDLoRA families feed the CTC head with a softmax-weighted sum of
all layer outputs instead of X_N.
"""
from __future__ import annotations

import dataclasses
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import core
from .core import ShapeError, Tensor
from .errors import ConfigError
from .lora import CTC_KEY, QKV, AdapterBank, LidTag, LoraAdapter, lora_apply, route

MASK_NEG = -1e9


class InputTooShortError(ShapeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 6
    k: int = 3
    d_model: int = 32
    heads: int = 4
    vocab_size: int = 0  # filled from the tokenizer
    feat_dim: int = 16
    downsample: int = 2
    ffn_mult: int = 4
    n_languages: int = 3

    def __post_init__(self):
        if self.n_layers < 2:
            raise ConfigError(f"need at least 2 layers, got {self.n_layers}")
        if not 1 <= self.k <= self.n_layers - 1:
            raise ConfigError(f"split index k={self.k} outside [1, {self.n_layers - 1}]")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.vocab_size and self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.downsample < 1:
            raise ConfigError("downsample must be >= 1")


@dataclass
class HiddenSequence:
    data: Tensor  # [B, T', d]
    lengths: np.ndarray  # valid frames per utterance
    layers: list[Tensor] = field(default_factory=list)  # per-layer outputs so far

    @property
    def T(self) -> int:
        return self.data.shape[1]


def sinusoid_positions(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d - d // 2])
    return pe


def weighted_layer_sum(layer_outputs: list[HiddenSequence], weights: Tensor) -> HiddenSequence:
    """Softmax-normalise ``weights`` over layers and mix the layer outputs."""
    if not layer_outputs:
        raise ConfigError("weighted_layer_sum needs at least one layer output")
    mixed = core.weighted_sum([h.data for h in layer_outputs], weights)
    return HiddenSequence(mixed, layer_outputs[0].lengths)


class Encoder:
    """Frozen-able backbone plus base CTC head and LID classifier.

    Parameters live in ``self.params`` under checkpoint path names such as
    ``backbone/layer3/q_proj/W``, ``ctc/W`` and ``lid/linear/W``.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        if config.vocab_size < 2:
            raise ConfigError("ModelConfig.vocab_size must be set (>= 2)")
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.calls: Counter = Counter()
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        d = c.d_model
        self._linear("backbone/frontend", c.downsample * c.feat_dim, d, rng)
        for i in range(c.n_layers):
            p = f"backbone/layer{i}"
            self._norm(f"{p}/ln1", d)
            for proj in (*QKV, "o_proj"):
                self._linear(f"{p}/{proj}", d, d, rng)
            self._norm(f"{p}/ln2", d)
            self._linear(f"{p}/ffn1", d, c.ffn_mult * d, rng)
            self._linear(f"{p}/ffn2", c.ffn_mult * d, d, rng)
        self._norm("backbone/final_norm", d)
        self.params["backbone/layer_sum/w"] = Tensor(np.zeros(c.n_layers), name="backbone/layer_sum/w")
        self._linear("ctc", d, c.vocab_size, rng)
        self.params["lid/linear/W"] = Tensor(np.zeros((c.n_languages, d)), name="lid/linear/W")
        self.params["lid/linear/b"] = Tensor(np.zeros(c.n_languages), name="lid/linear/b")

    def _linear(self, name, d_in, d_out, rng):
        W = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_out, d_in))
        self.params[f"{name}/W"] = Tensor(W, name=f"{name}/W")
        self.params[f"{name}/b"] = Tensor(np.zeros(d_out), name=f"{name}/b")

    def _norm(self, name, d):
        self.params[f"{name}/g"] = Tensor(np.ones(d), name=f"{name}/g")
        self.params[f"{name}/b"] = Tensor(np.zeros(d), name=f"{name}/b")

    # ------------------------------------------------------------ groups

    def names(self, group: str) -> list[str]:
        """Parameter names in ``backbone``, ``ctc``, ``lid`` or ``layer_sum``."""
        if group == "layer_sum":
            return ["backbone/layer_sum/w"]
        if group == "ctc":
            return ["ctc/W", "ctc/b"]
        return [n for n in self.params if n.startswith(group + "/")]

    # ------------------------------------------------------------ pieces

    def front_end(self, features, lengths=None) -> HiddenSequence:
        """Strided window flatten + linear projection to ``d_model``.

        ``features`` is ``[T, F]`` or a padded batch ``[B, T, F]``.
        """
        x = np.asarray(getattr(features, "data", features), dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        B, T, F = x.shape
        if F != self.config.feat_dim:
            raise ShapeError(f"front_end: feature dim {F} != configured {self.config.feat_dim}")
        ds = self.config.downsample
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths, dtype=np.int64)
        if lengths.min() < ds:
            raise InputTooShortError(f"utterance of {int(lengths.min())} frames is shorter than stride {ds}")
        Tp = -(-T // ds)
        if Tp * ds != T:
            x = np.concatenate([x, np.zeros((B, Tp * ds - T, F))], axis=1)
        windows = Tensor(x.reshape(B, Tp, ds * F))
        self.calls["front_end"] += 1
        h = core.linear(windows, self.params["backbone/frontend/W"], self.params["backbone/frontend/b"])
        return HiddenSequence(h, -(-lengths // ds))

    def _proj(self, x: Tensor, prefix: str, proj: str, adapters: dict[str, LoraAdapter], key: str):
        W = self.params[f"{prefix}/{proj}/W"]
        b = self.params[f"{prefix}/{proj}/b"]
        ad = adapters.get(key)
        return core.linear(x, W, b) if ad is None else lora_apply(x, W, ad, b)

    def _attention(self, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
        B, T, d = q.shape
        H = self.config.heads
        dh = d // H

        def split(t, axes):
            return core.transpose(core.reshape(t, (B, T, H, dh)), axes)

        qh = split(q, (0, 2, 1, 3))  # [B, H, T, dh]
        kh = split(k, (0, 2, 3, 1))  # [B, H, dh, T]
        vh = split(v, (0, 2, 1, 3))
        scores = core.add_const(core.scale(core.matmul(qh, kh), 1.0 / math.sqrt(dh)), mask)
        ctx = core.matmul(core.softmax(scores), vh)
        return core.reshape(core.transpose(ctx, (0, 2, 1, 3)), (B, T, d))

    def _layer(self, i: int, h: Tensor, mask: np.ndarray, adapters: dict[str, LoraAdapter]) -> Tensor:
        p = self.params
        pre = f"backbone/layer{i}"
        a = core.layer_norm(h, p[f"{pre}/ln1/g"], p[f"{pre}/ln1/b"])
        q, k, v = (self._proj(a, pre, proj, adapters, f"layer{i}/{proj}") for proj in QKV)
        att = core.linear(self._attention(q, k, v, mask), p[f"{pre}/o_proj/W"], p[f"{pre}/o_proj/b"])
        h = core.add(h, att)
        f = core.layer_norm(h, p[f"{pre}/ln2/g"], p[f"{pre}/ln2/b"])
        f = core.linear(core.gelu(core.linear(f, p[f"{pre}/ffn1/W"], p[f"{pre}/ffn1/b"])),
                        p[f"{pre}/ffn2/W"], p[f"{pre}/ffn2/b"])
        return core.add(h, f)

    @staticmethod
    def _mask(x: HiddenSequence) -> np.ndarray:
        valid = np.arange(x.T)[None, :] < x.lengths[:, None]
        return np.where(valid, 0.0, MASK_NEG)[:, None, None, :]

    def _run(self, x: HiddenSequence, layers: range, adapters: dict[str, LoraAdapter]) -> HiddenSequence:
        mask = self._mask(x)
        h = x.data
        outs = list(x.layers)
        for i in layers:
            h = self._layer(i, h, mask, adapters)
            outs.append(h)
        return HiddenSequence(h, x.lengths, outs)

    # ------------------------------------------------------------ split forward

    def forward_lower(self, x: HiddenSequence, bank: AdapterBank | None = None,
                      lang: "int | LidTag | None" = None) -> HiddenSequence:
        """Layers ``0..k-1`` on front-end output; returns X_h.

        HLoRA banks contribute only their shared adapters here. A LIDLoRA bank
        needs ``lang`` because its experts cover every layer.
        """
        adapters: dict[str, LoraAdapter] = {}
        if bank is not None:
            adapters.update(bank.shared)
            if bank.layout == "lidlora":
                adapters.update(route(bank, lang))
        h = core.add_const(x.data, sinusoid_positions(x.T, self.config.d_model))
        self.calls["lower"] += 1
        return self._run(HiddenSequence(h, x.lengths), range(self.config.k), adapters)

    def forward_upper(self, x_h: HiddenSequence, bank: AdapterBank | None = None,
                      lang: "int | LidTag | None" = None) -> HiddenSequence:
        """Layers ``k..N-1`` with the experts routed for ``lang``; returns X_N."""
        adapters = route(bank, lang) if bank is not None else {}
        self.calls["upper"] += 1
        return self._run(x_h, range(self.config.k, self.config.n_layers), adapters)

    def lid_logits(self, x_h: HiddenSequence) -> Tensor:
        """Pre-softmax language logits ``[B, L]`` from mean-pooled X_h."""
        pooled = core.masked_mean(x_h.data, x_h.lengths)
        return core.linear(pooled, self.params["lid/linear/W"], self.params["lid/linear/b"])

    def lid_posterior(self, x_h: HiddenSequence) -> np.ndarray:
        return np.exp(core.log_softmax(self.lid_logits(x_h)).data)

    def ctc_projection(self, x: HiddenSequence, bank: AdapterBank | None = None,
                       lang: "int | LidTag | None" = None) -> Tensor:
        """Per-frame log-probabilities ``[B, T', V]``.

        HLoRA banks read X_N directly; base and LIDLoRA mix all layer outputs.
        """
        if bank is not None and bank.layout == "hlora":
            h = x.data
        else:
            h = weighted_layer_sum([HiddenSequence(t, x.lengths) for t in x.layers],
                                   self.params["backbone/layer_sum/w"]).data
        h = core.layer_norm(h, self.params["backbone/final_norm/g"], self.params["backbone/final_norm/b"])
        ad = route(bank, lang).get(CTC_KEY) if bank is not None else None
        W, b = self.params["ctc/W"], self.params["ctc/b"]
        logits = core.linear(h, W, b) if ad is None else lora_apply(h, W, ad, b)
        self.calls["head"] += 1
        return core.log_softmax(logits)

    def forward(self, features, lengths=None, bank: AdapterBank | None = None,
                lang: "int | LidTag | None" = None) -> Tensor:
        """Monolithic pass: front end, all layers, CTC head."""
        x = self.front_end(features, lengths)
        lower_lang = lang if bank is not None and bank.layout == "lidlora" else None
        x_h = self.forward_lower(x, bank, lower_lang)
        return self.ctc_projection(self.forward_upper(x_h, bank, lang), bank, lang)

    def with_split(self, k: int) -> "Encoder":
        """Same parameters (shared, not copied) with a different split index."""
        other = object.__new__(Encoder)
        other.config = dataclasses.replace(self.config, k=k)
        other.params = self.params
        other.calls = Counter()
        return other
