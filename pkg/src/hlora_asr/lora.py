"""Low-rank adapters and the bank holding shared and per-language experts."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import core
from .core import Tensor
from .errors import ConfigError, RoutingError

QKV = ("q_proj", "k_proj", "v_proj")
CTC_KEY = "ctc"


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 4
    alpha: float = 8.0
    targets: tuple[str, ...] = ("q_proj", "k_proj", "v_proj", "ctc")
    init_std: float = 0.02

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        if not self.alpha > 0:
            raise ConfigError(f"LoRA alpha must be > 0, got {self.alpha}")
        unknown = set(self.targets) - {*QKV, CTC_KEY}
        if unknown:
            raise ConfigError(f"unknown LoRA targets {sorted(unknown)}")
        if not math.isfinite(self.scale):
            raise ConfigError("alpha / rank is not finite")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass(frozen=True)
class LidTag:
    id: int
    code: str = ""

    @classmethod
    def of(cls, lang: "int | LidTag") -> "LidTag":
        return lang if isinstance(lang, LidTag) else cls(int(lang), f"L{int(lang)}")


@dataclass
class LoraAdapter:
    A: Tensor  # [r, d_in]
    B: Tensor  # [d_out, r]
    config: LoraConfig

    @classmethod
    def create(cls, d_in: int, d_out: int, config: LoraConfig, rng: np.random.Generator,
               name: str = "") -> "LoraAdapter":
        A = Tensor(rng.normal(0.0, config.init_std, size=(config.rank, d_in)), True, f"{name}/A")
        B = Tensor(np.zeros((d_out, config.rank)), True, f"{name}/B")
        return cls(A, B, config)

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    def check(self, W_base: Tensor) -> None:
        r = self.config.rank
        if self.A.shape[0] != r or self.B.shape[1] != r:
            raise ConfigError(f"adapter rank mismatch: A {self.A.shape}, B {self.B.shape}, r={r}")
        if W_base.shape != (self.d_out, self.d_in):
            raise ConfigError(
                f"adapter ({self.d_out}x{self.d_in}) does not fit base weight {W_base.shape}")


def lora_apply(x: Tensor, W_base: Tensor, adapter: LoraAdapter, b_base: Tensor | None = None) -> Tensor:
    """``W_base x + b + (alpha/r) B (A x)``; the base weight never receives a gradient."""
    adapter.check(W_base)
    base = core.linear(x, W_base, b_base)
    delta = core.linear(core.linear(x, adapter.A), adapter.B)
    return core.add(base, core.scale(delta, adapter.config.scale))


def lora_merge(W_base: Tensor, adapter: LoraAdapter) -> Tensor:
    """New tensor ``W_base + (alpha/r) B A``; ``W_base`` is left untouched."""
    adapter.check(W_base)
    return Tensor(W_base.data + adapter.config.scale * (adapter.B.data @ adapter.A.data))


@dataclass
class AdapterBank:
    """Shared adapters (always active) plus one expert set per language.

    ``layout`` is ``"hlora"`` (shared on layers < k, experts on layers >= k
    and the CTC head) or ``"lidlora"`` (no shared part, experts everywhere).
    Keys look like ``"layer3/q_proj"`` or ``"ctc"``.
    """

    layout: str
    shared: dict[str, LoraAdapter]
    per_language: dict[int, dict[str, LoraAdapter]]
    config: LoraConfig
    languages: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not self.languages:
            self.languages = tuple(sorted(self.per_language))
        if sorted(self.per_language) != sorted(self.languages):
            raise ConfigError(
                f"experts for {sorted(self.per_language)} != configured {list(self.languages)}")
        for lang, experts in self.per_language.items():
            clash = set(experts) & set(self.shared)
            if clash:
                raise ConfigError(f"language {lang} experts alias shared adapters {sorted(clash)}")

    @classmethod
    def create(cls, layout: str, n_layers: int, k: int, d_model: int, vocab_size: int,
               languages, config: LoraConfig, rng: np.random.Generator) -> "AdapterBank":
        if layout not in ("hlora", "lidlora"):
            raise ConfigError(f"unknown bank layout {layout!r}")
        if layout == "hlora" and not 1 <= k <= n_layers - 1:
            raise ConfigError(f"split index k={k} outside [1, {n_layers - 1}]")
        lower = range(k) if layout == "hlora" else range(0)
        upper = range(k, n_layers) if layout == "hlora" else range(n_layers)
        qkv = [p for p in QKV if p in config.targets]

        def make(prefix, layers, with_ctc):
            out = {}
            for i in layers:
                for p in qkv:
                    key = f"layer{i}/{p}"
                    out[key] = LoraAdapter.create(d_model, d_model, config, rng, f"{prefix}/{key}")
            if with_ctc and CTC_KEY in config.targets:
                out[CTC_KEY] = LoraAdapter.create(d_model, vocab_size, config, rng, f"{prefix}/{CTC_KEY}")
            return out

        shared = make("lora/shared", lower, False)
        per_language = {int(l): make(f"lora/lang{int(l)}", upper, True) for l in languages}
        return cls(layout, shared, per_language, config, tuple(int(l) for l in languages))

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        groups = [("lora/shared", self.shared)]
        groups += [(f"lora/lang{l}", self.per_language[l]) for l in self.languages]
        for prefix, adapters in groups:
            for key, ad in adapters.items():
                out[f"{prefix}/{key}/A"] = ad.A
                out[f"{prefix}/{key}/B"] = ad.B
        return out

    def shared_names(self) -> list[str]:
        return [n for n in self.named_parameters() if n.startswith("lora/shared/")]

    def expert_names(self, lang: int) -> list[str]:
        return [n for n in self.named_parameters() if n.startswith(f"lora/lang{int(lang)}/")]


def route(bank: AdapterBank, lang: "int | LidTag") -> dict[str, LoraAdapter]:
    """Experts registered under ``lang`` (shared adapters are not included)."""
    lid = LidTag.of(lang).id
    try:
        return bank.per_language[lid]
    except KeyError:
        raise RoutingError(f"no expert for language {lid}; bank has {list(bank.languages)}") from None
