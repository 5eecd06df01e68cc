"""Checkpoint archive: a zip with one entry per tensor plus ``meta.json``.

Tensor entries are keyed by parameter path (``backbone/layer3/q_proj/W``,
``lora/shared/layer0/q_proj/A``, ``lora/lang1/ctc/B``, ``lid/linear/W``) and
hold ``uint32 ndim``, ``ndim x uint64`` dims, then little-endian float64 data.
"""
from __future__ import annotations

import json
import struct
import zipfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .core import Tensor
from .errors import DependencyError
from .lora import AdapterBank, LoraAdapter, LoraConfig
from .model import Encoder, ModelConfig

# fixed timestamp keeps archives byte-identical across runs
_EPOCH = (1980, 1, 1, 0, 0, 0)


def encode_tensor(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    return struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape) + a.tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    (ndim,) = struct.unpack_from("<I", buf, 0)
    shape = struct.unpack_from(f"<{ndim}Q", buf, 4)
    start = 4 + 8 * ndim
    n = int(np.prod(shape)) if ndim else 1
    if len(buf) != start + 8 * n:
        raise ValueError(f"tensor entry has {len(buf)} bytes, expected {start + 8 * n}")
    return np.frombuffer(buf, dtype="<f8", count=n, offset=start).reshape(shape).astype(np.float64)


def save_checkpoint(path: str | Path, model: Encoder, bank: AdapterBank | None, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    info = {
        "system": bank.layout if bank is not None else "base",
        "model": asdict(model.config),
        "lora": None if bank is None else {**asdict(bank.config), "targets": list(bank.config.targets)},
        "languages": None if bank is None else list(bank.languages),
        **(meta or {}),
    }
    entries = dict(model.params)
    if bank is not None:
        entries.update(bank.named_parameters())
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", _EPOCH), json.dumps(info, sort_keys=True, indent=1))
        for name in sorted(entries):
            zf.writestr(zipfile.ZipInfo(name, _EPOCH), encode_tensor(entries[name].data))
    return path


def load_checkpoint(path: str | Path) -> tuple[Encoder, AdapterBank | None, dict]:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        tensors = {n: decode_tensor(zf.read(n)) for n in zf.namelist() if n != "meta.json"}
    model = Encoder(ModelConfig(**meta["model"]))
    for name, t in model.params.items():
        t.data = tensors[name]
    bank = None
    if meta["system"] in ("hlora", "lidlora"):
        lc = meta["lora"]
        cfg = LoraConfig(**{**lc, "targets": tuple(lc["targets"])})
        shared: dict[str, LoraAdapter] = {}
        per_language: dict[int, dict[str, LoraAdapter]] = {int(l): {} for l in meta["languages"]}
        for name, arr in tensors.items():
            if not name.startswith("lora/") or not name.endswith("/A"):
                continue
            group, key = name[len("lora/"):-2].split("/", 1)
            ad = LoraAdapter(Tensor(arr, name=name), Tensor(tensors[name[:-1] + "B"], name=name[:-1] + "B"), cfg)
            if group == "shared":
                shared[key] = ad
            else:
                per_language[int(group[len("lang"):])][key] = ad
        bank = AdapterBank(meta["system"], shared, per_language, cfg, tuple(meta["languages"]))
    return model, bank, meta
