import numpy as np
import pytest

from hlora_asr.config import RunConfig
from hlora_asr.data import gen_corpus, substream
from hlora_asr.lora import AdapterBank
from hlora_asr.model import Encoder

TINY = {
    "seed": 3,
    "data": {"n_languages": 3, "n_content": 8, "overlap": 0.25, "feat_dim": 8, "dur": 2,
             "u_min": 2, "u_max": 4, "train": 24, "dev": 8, "test": 4, "noise_std": 0.3},
    "model": {"n_layers": 3, "k": 1, "d_model": 16, "heads": 2},
    "lora": {"rank": 2, "alpha": 4.0},
    "train": {"batch_size": 8, "epochs_phase1": 2, "epochs_phase2": 12, "epochs_adapt": 4, "lr": 3e-3},
    "ablation_k": [1, 2],
}


@pytest.fixture
def tiny_cfg():
    return RunConfig.from_dict(TINY)


@pytest.fixture
def tiny_setup(tiny_cfg):
    """Languages, tokenizer, corpora and a fresh encoder for the tiny config."""
    src, tgt, tok = tiny_cfg.languages()
    corp = gen_corpus(src, {"train": 24, "dev": 8}, tiny_cfg.seed, "source", tiny_cfg.gen_config())
    model = Encoder(tiny_cfg.model_config(tok.vocab_size), substream(tiny_cfg.seed, "init"))
    return tiny_cfg, tok, corp, model


def make_bank(model, cfg, layout="hlora", seed=0, randomize_b=False):
    c = model.config
    bank = AdapterBank.create(layout, c.n_layers, c.k, c.d_model, c.vocab_size, range(c.n_languages),
                              cfg.lora_config(), np.random.default_rng(seed))
    if randomize_b:
        rng = np.random.default_rng(seed + 1)
        for name, t in bank.named_parameters().items():
            if name.endswith("/B"):
                t.data = rng.normal(0, 0.1, size=t.shape)
    return bank


def checksum(tensors):
    """Order-stable byte digest of a name->Tensor mapping."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name].data).tobytes())
    return h.hexdigest()


_ACCEPTANCE = {}
ACCEPTANCE_DETAILS: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        _ACCEPTANCE[report.nodeid.split("::")[-1]] = report.outcome
    elif report.when == "setup" and report.failed and "test_acceptance.py" in report.nodeid:
        _ACCEPTANCE[report.nodeid.split("::")[-1]] = "error"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        status = "PASS" if _ACCEPTANCE[name] == "passed" else "FAIL"
        detail = ACCEPTANCE_DETAILS.get(name, "")
        terminalreporter.write_line(f"[{status}] {name}" + (f": {detail}" if detail else ""))
