"""Synthetic multilingual corpora, tokenizer and manifest persistence.

Each language emits token ids from a bigram chain; every token has a short
feature template. An utterance is leading silence, then for each token its
template followed by a silence gap, then trailing silence. A per-language
channel offset and Gaussian noise are added to every frame.

On disk a split is two files::

    <split>.jsonl   header line, then one JSON record per utterance
    <split>.f64     concatenated blocks: uint64 T, uint64 F (little endian),
                    then T*F little-endian float64 values, row-major

Records carry ``{utt_id, lang, offset, T, F, tokens, domain, split}`` where
``offset`` is the byte position of the block header in the blob.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .ctc import BLANK
from .errors import CorpusError
from .lora import LidTag

MANIFEST_FORMAT = "hlora-asr-manifest"
_BLOCK = struct.Struct("<QQ")


def substream(seed: int, *names: str) -> np.random.Generator:
    """Independent generator for a named purpose derived from one run seed."""
    keys = [zlib.crc32(n.encode()) for n in names]
    return np.random.default_rng([int(seed), *keys])


class Tokenizer:
    """blank = 0, language tokens 1..L, content tokens L+1..V-1."""

    def __init__(self, n_languages: int, n_content: int):
        self.n_languages = n_languages
        self.n_content = n_content
        self._symbols = ["<blank>"] + [f"<L{i}>" for i in range(n_languages)]
        self._symbols += [f"t{j}" for j in range(n_content)]
        self._ids = {s: i for i, s in enumerate(self._symbols)}

    @property
    def vocab_size(self) -> int:
        return len(self._symbols)

    @property
    def blank(self) -> int:
        return BLANK

    def language_token(self, lang) -> int:
        lid = LidTag.of(lang).id
        if not 0 <= lid < self.n_languages:
            raise KeyError(lid)
        return 1 + lid

    def is_language_token(self, tok: int) -> bool:
        return 1 <= tok <= self.n_languages

    def token_language(self, tok: int) -> int:
        return tok - 1

    def content_id(self, j: int) -> int:
        return 1 + self.n_languages + j

    def symbol(self, tok: int) -> str:
        return self._symbols[tok]

    def id(self, symbol: str) -> int:
        return self._ids[symbol]

    def decode(self, toks: Sequence[int]) -> str:
        return " ".join(self._symbols[t] for t in toks)


@dataclass
class LanguageSpec:
    lang: LidTag
    tokens: np.ndarray  # vocabulary ids this language can emit
    transitions: np.ndarray  # [n, n] bigram probabilities, rows sum to 1
    templates: np.ndarray  # [n, dur, F]
    channel_offset: np.ndarray  # [F]
    noise_std: float
    unit: str = "word"  # "word" or "char": scoring label only

    def __post_init__(self):
        n = len(self.tokens)
        if self.transitions.shape != (n, n):
            raise CorpusError(f"transition table {self.transitions.shape} for {n} tokens")
        if not np.allclose(self.transitions.sum(axis=1), 1.0, atol=1e-12):
            raise CorpusError("transition rows must sum to 1")
        if self.templates.shape[0] != n:
            raise CorpusError(f"{self.templates.shape[0]} templates for {n} tokens")
        if self.unit not in ("word", "char"):
            raise CorpusError(f"unit must be 'word' or 'char', got {self.unit!r}")

    @property
    def dur(self) -> int:
        return self.templates.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.templates.shape[2]

    def equals(self, other: "LanguageSpec") -> bool:
        return (self.lang == other.lang and self.unit == other.unit
                and self.noise_std == other.noise_std
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("tokens", "transitions", "templates", "channel_offset")))


@dataclass(frozen=True)
class GenConfig:
    """Utterance layout: token counts and silence framing."""
    u_min: int = 3
    u_max: int = 8
    gap: int = 1
    pad: int = 2
    downsample: int = 2

    def validate(self, dur: int) -> None:
        if not 1 <= self.u_min <= self.u_max:
            raise CorpusError(f"token length range [{self.u_min}, {self.u_max}] is empty")
        if dur < 1 or self.gap < 0 or self.pad < 0 or self.downsample < 1:
            raise CorpusError("durations must be positive and silences non-negative")


def make_languages(n_languages: int = 3, n_content: int = 40, overlap: float = 0.2,
                   feat_dim: int = 16, dur: int = 3, noise_std: float = 0.5,
                   char_like: Sequence[int] = (2,), lang_variation: float = 0.5,
                   offset_scale: float = 1.0, seed: int = 0):
    """Source-domain language specs and the shared tokenizer.

    Consecutive languages share ``overlap * n_content`` token ids; a shared id
    has a common base template plus a language-specific variation.
    """
    if not 0.0 <= overlap < 1.0:
        raise CorpusError(f"overlap must be in [0, 1), got {overlap}")
    stride = max(1, round(n_content * (1.0 - overlap)))
    total = stride * (n_languages - 1) + n_content
    tok = Tokenizer(n_languages, total)
    rng = substream(seed, "languages")
    base = rng.normal(size=(total, dur, feat_dim))
    specs = []
    for i in range(n_languages):
        idx = np.arange(i * stride, i * stride + n_content)
        templates = base[idx] + lang_variation * rng.normal(size=(n_content, dur, feat_dim))
        trans = rng.dirichlet(np.full(n_content, 0.5), size=n_content)
        specs.append(LanguageSpec(
            lang=LidTag(i, f"L{i}"),
            tokens=np.array([tok.content_id(j) for j in idx]),
            transitions=trans,
            templates=templates,
            channel_offset=offset_scale * rng.normal(size=feat_dim),
            noise_std=noise_std,
            unit="char" if i in char_like else "word",
        ))
    return specs, tok


@dataclass(frozen=True)
class ShiftParams:
    template_shift: float = 0.0  # std of per-language template perturbation
    offset_shift: float = 0.0  # std of per-language channel-offset perturbation
    noise_scale: float = 1.0
    mix: np.ndarray | None = field(default=None, compare=False)  # [F, F] channel mixing shared by languages

    def validate(self) -> None:
        if not (0 <= self.template_shift <= 5 and 0 <= self.offset_shift <= 5):
            raise CorpusError("shift stds must be in [0, 5]")
        if not 0 < self.noise_scale <= 10:
            raise CorpusError("noise_scale must be in (0, 10]")


def global_mix(feat_dim: int, strength: float, seed: int) -> np.ndarray:
    """Channel-mixing matrix ``I + strength * R`` applied to every language."""
    rng = substream(seed, "global-mix")
    return np.eye(feat_dim) + strength * rng.normal(size=(feat_dim, feat_dim)) / np.sqrt(feat_dim)


def domain_shift(spec: LanguageSpec, shift: ShiftParams, rng: np.random.Generator | None = None) -> LanguageSpec:
    """Perturbed copy of ``spec`` modelling an acoustic domain change.

    Token inventory, transitions and unit type are preserved.
    """
    shift.validate()
    rng = rng if rng is not None else substream(0, "shift", spec.lang.code)
    templates = spec.templates.copy()
    offset = spec.channel_offset.copy()
    if shift.mix is not None:
        templates = templates @ shift.mix.T
        offset = offset @ shift.mix.T
    if shift.template_shift:
        templates = templates + shift.template_shift * rng.normal(size=templates.shape)
    if shift.offset_shift:
        offset = offset + shift.offset_shift * rng.normal(size=offset.shape)
    return replace(spec, templates=templates, channel_offset=offset,
                   noise_std=spec.noise_std * shift.noise_scale)


@dataclass
class Utterance:
    utt_id: str
    lang: int
    features: np.ndarray  # [T, F]
    tokens: tuple[int, ...]
    domain: str = "source"
    split: str = "train"

    @property
    def T(self) -> int:
        return self.features.shape[0]


@dataclass
class CorpusManifest:
    domain: str
    split: str
    languages: tuple[int, ...]
    utterances: list[Utterance]
    path: Path | None = None

    def __post_init__(self):
        seen = set()
        for u in self.utterances:
            if u.utt_id in seen:
                raise CorpusError(f"duplicate utt_id {u.utt_id!r}")
            seen.add(u.utt_id)
            if u.lang not in self.languages:
                raise CorpusError(f"utterance {u.utt_id!r} has undeclared language {u.lang}")

    def __len__(self) -> int:
        return len(self.utterances)

    def by_language(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {l: [] for l in self.languages}
        for i, u in enumerate(self.utterances):
            out[u.lang].append(i)
        return out


def generate_utterance(spec: LanguageSpec, gen: GenConfig, rng: np.random.Generator,
                       utt_id: str, domain: str, split: str) -> Utterance:
    U = int(rng.integers(gen.u_min, gen.u_max + 1))
    n = len(spec.tokens)
    states = [int(rng.integers(n))]
    for _ in range(U - 1):
        states.append(int(rng.choice(n, p=spec.transitions[states[-1]])))
    F = spec.feat_dim
    silence = np.zeros((gen.pad, F))
    blocks = [silence]
    for s in states:
        blocks.append(spec.templates[s])
        blocks.append(np.zeros((gen.gap, F)))
    blocks.append(silence)
    clean = np.concatenate(blocks)
    # after downsampling there must be room for 2U+1 frames
    need = (2 * U + 1) * gen.downsample
    if clean.shape[0] < need:
        clean = np.concatenate([clean, np.zeros((need - clean.shape[0], F))])
    feats = clean + spec.channel_offset + spec.noise_std * rng.normal(size=clean.shape)
    return Utterance(utt_id, spec.lang.id, feats, tuple(int(spec.tokens[s]) for s in states), domain, split)


def gen_corpus(specs: Sequence[LanguageSpec], counts: dict[str, int], seed: int,
               domain: str = "source", gen: GenConfig = GenConfig(),
               out_dir: str | Path | None = None) -> dict[str, CorpusManifest]:
    """Generate ``counts[split]`` utterances per language for every split.

    With ``out_dir`` set, each split is also written as ``<split>.jsonl`` plus
    ``<split>.f64`` under ``out_dir``.
    """
    for spec in specs:
        gen.validate(spec.dur)
    for split, n in counts.items():
        if n < 1:
            raise CorpusError(f"split {split!r} needs at least one utterance per language")
    langs = tuple(s.lang.id for s in specs)
    out = {}
    for split, n in counts.items():
        rng = substream(seed, "data", domain, split)
        utts = [generate_utterance(spec, gen, rng, f"{domain}-{split}-{spec.lang.code}-{j:04d}", domain, split)
                for spec in specs for j in range(n)]
        out[split] = CorpusManifest(domain, split, langs, utts)
    if out_dir is not None:
        for m in out.values():
            write_manifest(m, out_dir)
    return out


def write_manifest(manifest: CorpusManifest, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jpath = out_dir / f"{manifest.split}.jsonl"
    bpath = out_dir / f"{manifest.split}.f64"
    header = {"format": MANIFEST_FORMAT, "version": 1, "domain": manifest.domain,
              "split": manifest.split, "languages": list(manifest.languages), "features": bpath.name}
    lines = [json.dumps(header, sort_keys=True)]
    offset = 0
    with open(bpath, "wb") as blob:
        for u in manifest.utterances:
            T, F = u.features.shape
            blob.write(_BLOCK.pack(T, F))
            blob.write(np.ascontiguousarray(u.features, dtype="<f8").tobytes())
            rec = {"utt_id": u.utt_id, "lang": u.lang, "offset": offset, "T": T, "F": F,
                   "tokens": list(u.tokens), "domain": u.domain, "split": u.split}
            lines.append(json.dumps(rec, sort_keys=True))
            offset += _BLOCK.size + 8 * T * F
    jpath.write_text("\n".join(lines) + "\n")
    manifest.path = jpath
    return jpath


_FIELDS = {"utt_id": str, "lang": int, "offset": int, "T": int, "F": int,
           "tokens": list, "domain": str, "split": str}


def load_manifest(path: str | Path) -> CorpusManifest:
    """Read a manifest and its feature blob; raises CorpusError with line numbers."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise CorpusError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}:1: malformed header ({exc.msg})") from None
    if header.get("format") != MANIFEST_FORMAT:
        raise CorpusError(f"{path}:1: not a {MANIFEST_FORMAT} file")
    langs = tuple(int(l) for l in header["languages"])
    blob = (path.parent / header["features"]).read_bytes()
    utts = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
        for key, typ in _FIELDS.items():
            if not isinstance(rec.get(key), typ):
                raise CorpusError(f"{path}:{lineno}: field {key!r} missing or not {typ.__name__}")
        if rec["utt_id"] in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate utt_id {rec['utt_id']!r}")
        seen.add(rec["utt_id"])
        if rec["lang"] not in langs:
            raise CorpusError(f"{path}:{lineno}: language {rec['lang']} not in declared set {list(langs)}")
        off, T, F = rec["offset"], rec["T"], rec["F"]
        end = off + _BLOCK.size + 8 * T * F
        if end > len(blob) or _BLOCK.unpack_from(blob, off) != (T, F):
            raise CorpusError(f"{path}:{lineno}: feature block at offset {off} does not match T={T}, F={F}")
        feats = np.frombuffer(blob, dtype="<f8", count=T * F, offset=off + _BLOCK.size).reshape(T, F)
        utts.append(Utterance(rec["utt_id"], rec["lang"], feats.astype(np.float64), tuple(rec["tokens"]),
                              rec["domain"], rec["split"]))
    return CorpusManifest(header["domain"], header["split"], langs, utts, path)


def pad_batch(utts: Sequence[Utterance]) -> tuple[np.ndarray, np.ndarray]:
    """Zero-padded ``[B, T_max, F]`` features and the true lengths."""
    lengths = np.array([u.T for u in utts], dtype=np.int64)
    F = utts[0].features.shape[1]
    out = np.zeros((len(utts), int(lengths.max()), F))
    for b, u in enumerate(utts):
        out[b, : u.T] = u.features
    return out, lengths
