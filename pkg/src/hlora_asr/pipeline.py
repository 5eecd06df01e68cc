"""Experiment pipeline behind the CLI subcommands.

Directory layout under the output root::

    data/{source,target}/{train,dev,test}.{jsonl,f64}
    checkpoints/{base,lidlora,hlora}.ckpt
    logs/train-{base,lidlora,hlora}.jsonl
    reports/eval-<system>-<strategy>/{rates.csv,confusion.csv,timing.csv,decode.jsonl}
    reports/ablate-k/{ablation.csv,ablation.txt}
    reports/confusion/{confusion-two-stage.csv,confusion-hlora.csv,summary.csv}
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import CorpusManifest, gen_corpus, load_manifest, substream
from .errors import CompatibilityError, DependencyError
from .inference import DecodeResult, decode, timing_report
from .lora import AdapterBank
from .metrics import (ConfusionMatrix, confusion_matrix, edit_distance, format_table,
                      mixture_error_rate, rates_csv)
from .model import Encoder
from .training import MetricsLog, train_adapters, train_base

log = logging.getLogger(__name__)

DOMAINS = ("source", "target")
SPLITS = ("train", "dev", "test")


def _safe_mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc.strerror}") from None
    return path


def manifest_path(out: Path, domain: str, split: str) -> Path:
    return Path(out) / "data" / domain / f"{split}.jsonl"


def checkpoint_path(out: Path, system: str) -> Path:
    return Path(out) / "checkpoints" / f"{system}.ckpt"


def gen_data(cfg: RunConfig, out: Path) -> dict:
    """Source corpus plus its domain-shifted target twin, three splits each."""
    src, tgt, tok = cfg.languages()
    counts = {"train": cfg.data.train, "dev": cfg.data.dev, "test": cfg.data.test}
    summary = {"config_hash": cfg.hash, "vocab_size": tok.vocab_size}
    for domain, specs in (("source", src), ("target", tgt)):
        d = _safe_mkdir(Path(out) / "data" / domain)
        corp = gen_corpus(specs, counts, cfg.seed, domain, cfg.gen_config(), d)
        for split, m in corp.items():
            summary[f"{domain}/{split}"] = {"utterances": len(m), "frames": int(sum(u.T for u in m.utterances))}
    return summary


def _load(out: Path, domain: str, split: str) -> CorpusManifest:
    path = manifest_path(out, domain, split)
    if not path.exists():
        raise DependencyError(f"manifest not found: {path} (run gen-data first)")
    return load_manifest(path)


def _config_record(cfg: RunConfig, mode: str, k: int | None = None) -> dict:
    return {"type": "config", "mode": mode, "config_hash": cfg.hash, "lambda_lid": cfg.train.lambda_lid,
            "k": cfg.model.k if k is None else k, "rank": cfg.lora.rank, "alpha": cfg.lora.alpha,
            "seed": cfg.seed}


def train_base_model(cfg: RunConfig, out: Path) -> Path:
    _, _, tok = cfg.languages()
    train, dev = _load(out, "source", "train"), _load(out, "source", "dev")
    model = Encoder(cfg.model_config(tok.vocab_size), substream(cfg.seed, "init", "base"))
    metrics = MetricsLog(Path(out) / "logs" / "train-base.jsonl")
    metrics.write(_config_record(cfg, "base"))
    train_base(train, model, cfg.train_config(), tok, cfg.seed, metrics, dev)
    return save_checkpoint(checkpoint_path(out, "base"), model, None, {"config_hash": cfg.hash})


def new_bank(cfg: RunConfig, layout: str, model: Encoder, k: int | None = None) -> AdapterBank:
    c = model.config
    return AdapterBank.create(layout, c.n_layers, c.k if k is None else k, c.d_model, c.vocab_size,
                              range(cfg.data.n_languages), cfg.lora_config(),
                              substream(cfg.seed, "init", layout, str(k)))


def train_adapted(cfg: RunConfig, out: Path, mode: str, base_ckpt: Path | None = None,
                  k: int | None = None, tag: str | None = None) -> Path:
    base_ckpt = Path(base_ckpt) if base_ckpt is not None else checkpoint_path(out, "base")
    if not base_ckpt.exists():
        raise DependencyError(f"{mode} training needs a base checkpoint; {base_ckpt} not found")
    model, bank, meta = load_checkpoint(base_ckpt)
    if bank is not None:
        raise CompatibilityError(f"{base_ckpt} is a {meta['system']} checkpoint, expected base")
    k = cfg.model.k if k is None else k
    cfg.check_k(k)
    model = model.with_split(k)
    bank = new_bank(cfg, mode, model, k)
    _, _, tok = cfg.languages()
    tag = tag or mode
    metrics = MetricsLog(Path(out) / "logs" / f"train-{tag}.jsonl")
    metrics.write(_config_record(cfg, mode, k))
    train_adapters(mode, _load(out, "target", "train"), model, bank, cfg.train_config(), tok, cfg.seed,
                   metrics, _load(out, "target", "dev"))
    return save_checkpoint(checkpoint_path(out, tag), model, bank, {"config_hash": cfg.hash, "k": k})


def check_strategy(system: str, strategy: str) -> None:
    ok = {"known": ("base", "lidlora", "hlora"), "two-stage": ("lidlora",), "single-pass": ("hlora",)}
    if strategy not in ok:
        raise CompatibilityError(f"unknown strategy {strategy!r}")
    if system not in ok[strategy]:
        raise CompatibilityError(f"strategy {strategy!r} cannot run on a {system} checkpoint")


@dataclass
class EvalReport:
    strategy: str
    system: str
    per_lang: dict[int, float]
    avg: float
    confusion: ConfusionMatrix
    timing: dict
    results: list[DecodeResult]
    records: list[dict]

    @property
    def lid_accuracy(self) -> float:
        return self.confusion.accuracy


def evaluate_model(cfg: RunConfig, model: Encoder, bank: AdapterBank | None, system: str,
                   corpus: CorpusManifest, strategy: str) -> EvalReport:
    check_strategy(system, strategy)
    _, _, tok = cfg.languages()
    results, records = [], []
    counts: dict[int, list] = {l: [] for l in corpus.languages}
    for u in corpus.utterances:
        r = decode(strategy, u, model, bank, tok)
        ec = edit_distance(u.tokens, r.hypothesis)
        counts[u.lang].append(ec)
        results.append(r)
        records.append({"utt_id": u.utt_id, "true_lang": u.lang, "pred_lang": r.pred_lang,
                        "ref_tokens": list(u.tokens), "hyp_tokens": r.hypothesis, "strategy": strategy,
                        "lid_correct": r.pred_lang == u.lang, "token_errors": ec.errors,
                        "stage_times_ms": {k: round(1e3 * v, 4) for k, v in r.stage_times.items()}})
        if r.lid_rule is not None:
            records[-1]["lid_rule"] = r.lid_rule
    per_lang, avg = mixture_error_rate(counts, cfg.unit_types())
    cm = confusion_matrix([(u.lang, r.pred_lang) for u, r in zip(corpus.utterances, results)], corpus.languages)
    return EvalReport(strategy, system, per_lang, avg, cm, timing_report(results), results, records)


def write_eval_report(cfg: RunConfig, rep: EvalReport, out_dir: Path) -> Path:
    d = _safe_mkdir(Path(out_dir))
    tag = f"config_hash={cfg.hash} system={rep.system} strategy={rep.strategy}"
    (d / "rates.csv").write_text(rates_csv(rep.per_lang, rep.avg, cfg.unit_types(), tag,
                                           {"lid_accuracy": rep.lid_accuracy}))
    (d / "confusion.csv").write_text(rep.confusion.to_csv(tag))
    buf = io.StringIO()
    buf.write(f"# {tag}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "n", "mean_ms", "median_ms", "mean_forward_passes"])
    for s, t in rep.timing.items():
        w.writerow([s, t["n"], f"{t['mean_ms']:.4f}", f"{t['median_ms']:.4f}", f"{t['mean_forward_passes']:.4f}"])
    (d / "timing.csv").write_text(buf.getvalue())
    with open(d / "decode.jsonl", "w") as fh:
        for rec in rep.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return d


def evaluate(cfg: RunConfig, out: Path, checkpoint: Path, strategy: str,
             manifest: Path | None = None, report_dir: Path | None = None) -> EvalReport:
    model, bank, meta = load_checkpoint(checkpoint)
    check_strategy(meta["system"], strategy)
    corpus = load_manifest(manifest) if manifest is not None else _load(out, "target", "dev")
    rep = evaluate_model(cfg, model, bank, meta["system"], corpus, strategy)
    name = f"eval-{meta['system']}-{strategy}"
    write_eval_report(cfg, rep, report_dir or Path(out) / "reports" / name)
    return rep


def ablate_k(cfg: RunConfig, out: Path, k_list: list[int] | None = None) -> tuple[dict[int, EvalReport], str]:
    """HLoRA per split index, single-pass on target dev; table is languages x k plus avg."""
    k_list = list(cfg.ablation_k if k_list is None else k_list)
    for k in k_list:
        cfg.check_k(k)
    if not checkpoint_path(out, "base").exists():
        raise DependencyError("ablate-k needs a base checkpoint (run train-base first)")
    dev = _load(out, "target", "dev")
    reports = {}
    for k in k_list:
        ck = train_adapted(cfg, out, "hlora", k=k, tag=f"hlora-k{k}")
        model, bank, _ = load_checkpoint(ck)
        reports[k] = evaluate_model(cfg, model.with_split(k), bank, "hlora", dev, "single-pass")
    langs = sorted(dev.languages)
    header = ["language", *[f"k={k}" for k in k_list]]
    rows = [[f"L{l}", *[f"{reports[k].per_lang[l]:.4f}" for k in k_list]] for l in langs]
    rows.append(["avg", *[f"{reports[k].avg:.4f}" for k in k_list]])
    d = _safe_mkdir(Path(out) / "reports" / "ablate-k")
    buf = io.StringIO()
    buf.write(f"# config_hash={cfg.hash}\n")
    csv.writer(buf, lineterminator="\n").writerows([header, *rows])
    (d / "ablation.csv").write_text(buf.getvalue())
    table = format_table(header, rows)
    (d / "ablation.txt").write_text(table)
    return reports, table


def confusion_pair(cfg: RunConfig, out: Path, lidlora_ckpt: Path | None = None,
                   hlora_ckpt: Path | None = None, manifest: Path | None = None) -> dict:
    """Two-stage (LIDLoRA) vs single-pass (HLoRA) LID confusion on the same utterances."""
    lidlora_ckpt = Path(lidlora_ckpt or checkpoint_path(out, "lidlora"))
    hlora_ckpt = Path(hlora_ckpt or checkpoint_path(out, "hlora"))
    corpus = load_manifest(manifest) if manifest is not None else _load(out, "target", "dev")
    reps = {}
    for label, ck, strategy in (("two-stage", lidlora_ckpt, "two-stage"), ("hlora", hlora_ckpt, "single-pass")):
        model, bank, meta = load_checkpoint(ck)
        reps[label] = evaluate_model(cfg, model, bank, meta["system"], corpus, strategy)
    d = _safe_mkdir(Path(out) / "reports" / "confusion")
    tag = f"config_hash={cfg.hash}"
    for label, rep in reps.items():
        (d / f"confusion-{label}.csv").write_text(rep.confusion.to_csv(f"{tag} system={label}"))
    acc2, acc1 = reps["two-stage"].lid_accuracy, reps["hlora"].lid_accuracy
    delta = acc1 - acc2
    (d / "summary.csv").write_text(
        f"# {tag}\nmetric,value\nacc_two_stage,{acc2:.6f}\nacc_hlora,{acc1:.6f}\ndelta,{delta:.6f}\n")
    return {"two_stage": reps["two-stage"], "hlora": reps["hlora"], "delta": delta}
