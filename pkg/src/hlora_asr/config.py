"""Run configuration: one JSON document, strict keys, reproducible hash."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import GenConfig, ShiftParams, global_mix, make_languages, domain_shift, substream
from .errors import ConfigError
from .lora import LoraConfig
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class ShiftSection:
    template_shift: float = 0.4
    offset_shift: float = 0.5
    noise_scale: float = 1.5
    mix_strength: float = 0.6


@dataclass
class DataSection:
    n_languages: int = 3
    n_content: int = 40
    overlap: float = 0.2
    feat_dim: int = 16
    dur: int = 3
    noise_std: float = 0.5
    lang_variation: float = 0.5
    offset_scale: float = 1.0
    char_like: list[int] = field(default_factory=lambda: [2])
    u_min: int = 3
    u_max: int = 8
    gap: int = 1
    pad: int = 2
    train: int = 400
    dev: int = 50
    test: int = 50
    shift: ShiftSection = field(default_factory=ShiftSection)


@dataclass
class ModelSection:
    n_layers: int = 6
    k: int = 3
    d_model: int = 32
    heads: int = 4
    downsample: int = 2
    ffn_mult: int = 4


@dataclass
class LoraSection:
    rank: int = 4
    alpha: float = 8.0
    targets: list[str] = field(default_factory=lambda: ["q_proj", "k_proj", "v_proj", "ctc"])


@dataclass
class TrainSection:
    lambda_lid: float = 0.3
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs_phase1: int = 10
    epochs_phase2: int = 40
    epochs_adapt: int = 30


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    lora: LoraSection = field(default_factory=LoraSection)
    train: TrainSection = field(default_factory=TrainSection)
    ablation_k: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])

    # ------------------------------------------------------------ (de)serialisation

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        cfg = _build(cls, doc, "")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @property
    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------ derived objects

    def validate(self) -> None:
        self.model_config(vocab_size=2)
        self.lora_config()
        self.train_config()
        for k in self.ablation_k:
            self.check_k(k)

    def check_k(self, k: int) -> None:
        if not 1 <= k <= self.model.n_layers - 1:
            raise ConfigError(f"k={k} outside [1, {self.model.n_layers - 1}]")

    def model_config(self, vocab_size: int, k: int | None = None) -> ModelConfig:
        m = self.model
        return ModelConfig(n_layers=m.n_layers, k=m.k if k is None else k, d_model=m.d_model, heads=m.heads,
                           vocab_size=vocab_size, feat_dim=self.data.feat_dim, downsample=m.downsample,
                           ffn_mult=m.ffn_mult, n_languages=self.data.n_languages)

    def lora_config(self) -> LoraConfig:
        return LoraConfig(rank=self.lora.rank, alpha=self.lora.alpha, targets=tuple(self.lora.targets))

    def train_config(self) -> TrainConfig:
        return TrainConfig(**asdict(self.train))

    def gen_config(self) -> GenConfig:
        d = self.data
        return GenConfig(u_min=d.u_min, u_max=d.u_max, gap=d.gap, pad=d.pad, downsample=self.model.downsample)

    def languages(self):
        """``(source_specs, target_specs, tokenizer)``."""
        d = self.data
        src, tok = make_languages(d.n_languages, d.n_content, d.overlap, d.feat_dim, d.dur, d.noise_std,
                                  d.char_like, d.lang_variation, d.offset_scale, self.seed)
        s = d.shift
        mix = global_mix(d.feat_dim, s.mix_strength, self.seed) if s.mix_strength else None
        params = ShiftParams(s.template_shift, s.offset_shift, s.noise_scale, mix)
        tgt = [domain_shift(sp, params, substream(self.seed, "shift", sp.lang.code)) for sp in src]
        return src, tgt, tok

    def unit_types(self) -> dict[int, str]:
        return {l: ("char" if l in self.data.char_like else "word") for l in range(self.data.n_languages)}


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join((where + '.' if where else '') + u for u in unknown)}")
    kwargs = {}
    for name, value in doc.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = value
    return cls(**kwargs)
