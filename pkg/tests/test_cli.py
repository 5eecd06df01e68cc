import hashlib
import json
from pathlib import Path

import pytest

from conftest import TINY
from hlora_asr.cli import main


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Tiny end-to-end pipeline driven through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "tiny.json"
    config.write_text(json.dumps(TINY))
    out = root / "run" / "nested"  # does not exist yet
    common = ["--config", str(config), "--out", str(out)]
    assert main(["gen-data", *common]) == 0
    assert main(["train-base", *common]) == 0
    assert main(["train-lidlora", *common]) == 0
    assert main(["train-hlora", *common]) == 0
    return {"root": root, "config": config, "out": out, "common": common}


def test_gen_data_layout(run, capsys):
    out = run["out"]
    for domain in ("source", "target"):
        for split in ("train", "dev", "test"):
            m = out / "data" / domain / f"{split}.jsonl"
            assert m.exists() and (out / "data" / domain / f"{split}.f64").exists()
            header = json.loads(m.read_text().splitlines()[0])
            assert header["languages"] == [0, 1, 2]


def test_gen_data_rerun_identical(run, tmp_path):
    assert main(["gen-data", "--config", str(run["config"]), "--out", str(tmp_path)]) == 0
    for f in (run["out"] / "data").rglob("*.*"):
        assert sha(f) == sha(tmp_path / f.relative_to(run["out"]))


def test_gen_data_seed_flag_wins(run, tmp_path):
    assert main(["gen-data", "--config", str(run["config"]), "--out", str(tmp_path), "--seed", "99"]) == 0
    assert sha(tmp_path / "data/source/train.f64") != sha(run["out"] / "data/source/train.f64")


def test_unwritable_output_is_io_error(run, tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code = main(["gen-data", "--config", str(run["config"]), "--out", str(blocker / "sub")])
    assert code == 3
    assert str(blocker) in capsys.readouterr().err


def test_adaptation_needs_base(run, tmp_path, capsys):
    code = main(["train-hlora", "--config", str(run["config"]), "--out", str(tmp_path)])
    assert code == 2
    assert "base checkpoint" in capsys.readouterr().err


def test_train_log_echoes_config(run):
    recs = [json.loads(l) for l in (run["out"] / "logs/train-hlora.jsonl").read_text().splitlines()]
    head = recs[0]
    assert head["type"] == "config"
    assert (head["lambda_lid"], head["k"], head["rank"], head["alpha"]) == (0.3, 1, 2, 4.0)
    epochs = [r for r in recs if r["type"] == "epoch"]
    assert epochs[0]["epoch"] == 0 and epochs[-1]["epoch"] == TINY["train"]["epochs_adapt"]
    assert any(r["type"] == "step" for r in recs)


def test_base_log_dev_error_improves(run):
    recs = [json.loads(l) for l in (run["out"] / "logs/train-base.jsonl").read_text().splitlines()]
    epochs = [r for r in recs if r["type"] == "epoch"]
    assert epochs[-1]["dev_error"] < epochs[0]["dev_error"]


def test_k_override_and_bound(run, capsys):
    assert main(["train-hlora", *run["common"], "--k", "3"]) == 1
    assert "k=3" in capsys.readouterr().err


def test_eval_incompatible_strategy(run):
    ck = run["out"] / "checkpoints/hlora.ckpt"
    assert main(["eval", *run["common"], "--checkpoint", str(ck), "--strategy", "two-stage"]) == 1
    ck = run["out"] / "checkpoints/lidlora.ckpt"
    assert main(["eval", *run["common"], "--checkpoint", str(ck), "--strategy", "single-pass"]) == 1
    assert main(["eval", *run["common"], "--strategy", "known"]) == 1


def _eval(run, system, strategy, manifest=None):
    args = ["eval", *run["common"], "--checkpoint", str(run["out"] / f"checkpoints/{system}.ckpt"),
            "--strategy", strategy]
    if manifest:
        args += ["--manifest", str(manifest)]
    assert main(args) == 0
    return run["out"] / "reports" / f"eval-{system}-{strategy}"


def test_eval_report_files(run):
    from hlora_asr.config import RunConfig

    d = _eval(run, "hlora", "single-pass")
    h = RunConfig.from_dict(TINY).hash
    for name in ("rates.csv", "confusion.csv", "timing.csv"):
        assert (d / name).read_text().startswith(f"# config_hash={h}")
    recs = [json.loads(l) for l in (d / "decode.jsonl").read_text().splitlines()]
    assert {"utt_id", "true_lang", "pred_lang", "ref_tokens", "hyp_tokens", "strategy",
            "stage_times_ms"} <= set(recs[0])


def test_single_pass_vs_known_differ_only_on_lid_errors(run):
    sp = [json.loads(l) for l in (_eval(run, "hlora", "single-pass") / "decode.jsonl").read_text().splitlines()]
    kn = [json.loads(l) for l in (_eval(run, "hlora", "known") / "decode.jsonl").read_text().splitlines()]
    for a, b in zip(sp, kn):
        assert a["utt_id"] == b["utt_id"]
        if a["pred_lang"] == a["true_lang"]:
            assert a["hyp_tokens"] == b["hyp_tokens"]


def test_eval_other_manifest(run):
    d = _eval(run, "lidlora", "two-stage", run["out"] / "data/target/test.jsonl")
    recs = (d / "decode.jsonl").read_text().splitlines()
    assert len(recs) == 3 * TINY["data"]["test"]


def test_ablate_k_table(run, capsys):
    assert main(["ablate-k", *run["common"], "--k-list", "1,2"]) == 0
    lines = [l for l in (run["out"] / "reports/ablate-k/ablation.csv").read_text().splitlines() if l[0] != "#"]
    assert lines[0] == "language,k=1,k=2"
    assert [l.split(",")[0] for l in lines[1:]] == ["L0", "L1", "L2", "avg"]
    assert "k=2" in capsys.readouterr().out
    assert main(["ablate-k", *run["common"], "--k-list", "3"]) == 1


def test_confusion_pair(run):
    import numpy as np

    assert main(["confusion", *run["common"]]) == 0
    d = run["out"] / "reports/confusion"

    def table(name):
        rows = [l.split(",") for l in (d / name).read_text().splitlines()[2:]]
        return np.array([[int(c) for c in r[1:]] for r in rows])

    a, b = table("confusion-two-stage.csv"), table("confusion-hlora.csv")
    assert a.shape == b.shape == (3, 4)
    assert np.array_equal(a.sum(axis=1), b.sum(axis=1))
    summary = dict(l.split(",") for l in (d / "summary.csv").read_text().splitlines()[2:])
    acc = lambda m: np.trace(m[:, :3]) / m.sum()
    assert float(summary["delta"]) == pytest.approx(acc(b) - acc(a), abs=1e-6)


def test_metrics_csv_deterministic(run, tmp_path):
    d = _eval(run, "hlora", "single-pass")
    first = {n: sha(d / n) for n in ("rates.csv", "confusion.csv")}
    d = _eval(run, "hlora", "single-pass")
    assert first == {n: sha(d / n) for n in ("rates.csv", "confusion.csv")}


def test_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"depth": 2}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 1
