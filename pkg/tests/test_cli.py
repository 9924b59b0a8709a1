import hashlib
import json

import pytest

from dt4rec.cli import main
from dt4rec.training import Checkpoint

TINY = ["--set", "synth.n_users=30", "--set", "synth.n_items=20", "--set", "synth.n_days=20",
        "--set", "model.d=8", "--set", "model.n_heads=2", "--set", "model.n_layers=1",
        "--set", "model.state_len=4", "--set", "model.action_len=4", "--set", "train.epochs=1",
        "--set", "eval.reward_model_epochs=1", "--set", "data.min_interactions=1"]


def _digest(directory):
    h = hashlib.sha256()
    for p in sorted(directory.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(directory)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", *TINY, "--seed", "3", "--out", str(out)]) == 0
    return out


def test_synth_bundle_and_rerun(bundle, tmp_path):
    for name in ("manifest.json", "vocab.tsv", "train.jsonl", "validation.jsonl", "test.jsonl",
                 "stats.json", "config.json"):
        assert (bundle / name).exists()
    again = tmp_path / "again"
    assert main(["synth", *TINY, "--seed", "3", "--out", str(again)]) == 0
    assert _digest(again) == _digest(bundle)
    echoed = json.loads((bundle / "config.json").read_text())
    assert echoed["synth"]["n_users"] == 30 and echoed["train"]["seed"] == 3


def test_exit_codes(bundle, tmp_path, capsys):
    assert main(["synth", "--set", "synth.n_users=0", "--out", str(tmp_path / "x")]) == 2
    assert main(["synth", "--set", "synth.bogus=1", "--out", str(tmp_path / "x")]) == 2
    assert main(["train", *TINY, "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "t")]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["synth", *TINY, "--set", "train.max_trajectory_length=nan", "--out", str(tmp_path / "x")]) == 2


def test_train_evaluate_report(bundle, tmp_path, capsys):
    tr = tmp_path / "train"
    assert main(["train", *TINY, "--data", str(bundle), "--out", str(tr), "--ablate", "no_reward"]) == 0
    ckpt = Checkpoint.load(tr / "model.ckpt")
    assert ckpt.meta["variant"] == "DT4Rec-R" and "no_reward" in ckpt.ablations
    assert len((tr / "train_log.jsonl").read_text().splitlines()) == 1

    ev1, ev2 = tmp_path / "ev1", tmp_path / "ev2"
    for ev in (ev1, ev2):
        assert main(["evaluate", *TINY, "--data", str(bundle), "--checkpoint", str(tr / "model.ckpt"),
                     "--variance", "2", "--out", str(ev)]) == 0
    body = json.loads((ev1 / "metrics.json").read_text())
    assert len(body["metrics"]) == 9 and len(body["per_split"]) == 2
    assert (ev1 / "metrics.csv").read_text().splitlines()[-1].startswith("variance")
    assert _digest(ev1) == _digest(ev2)

    # reuse the saved reward model
    ev3 = tmp_path / "ev3"
    assert main(["evaluate", *TINY, "--data", str(bundle), "--checkpoint", str(tr / "model.ckpt"),
                 "--reward-model", str(ev1 / "reward_model.ckpt"), "--out", str(ev3)]) == 0
    assert json.loads((ev3 / "metrics.json").read_text())["metrics"] == body["metrics"]

    rep = tmp_path / "rep"
    assert main(["report", str(tmp_path), "--out", str(rep)]) == 0
    assert len((rep / "report.csv").read_text().splitlines()) == 4


def test_naive_prompt_checkpoint(bundle, tmp_path):
    assert main(["train", *TINY, "--data", str(bundle), "--out", str(tmp_path), "--ablate", "naive_prompt"]) == 0
    model = Checkpoint.load(tmp_path / "model.ckpt").build_model()
    assert type(model.prompt).__name__ == "NaivePrompt"


def test_vocabulary_mismatch(bundle, tmp_path):
    other = tmp_path / "other"
    assert main(["synth", *TINY, "--set", "synth.n_items=25", "--out", str(other)]) == 0
    tr = tmp_path / "train"
    assert main(["train", *TINY, "--data", str(other), "--out", str(tr)]) == 0
    assert main(["evaluate", *TINY, "--data", str(bundle), "--checkpoint", str(tr / "model.ckpt"),
                 "--out", str(tmp_path / "ev")]) == 4


def test_ood_and_bc(bundle, tmp_path):
    assert main(["ood", *TINY, "--data", str(bundle), "--out", str(tmp_path / "ood"), "--jobs", "2"]) == 0
    ood = json.loads((tmp_path / "ood" / "ood.json").read_text())
    assert set(ood["runs"]) == {"original", "data_b"}
    assert ood["samples"]["data_b"] <= ood["samples"]["original"]
    for run in ood["runs"].values():
        assert len(run) == 9
    assert main(["bc", *TINY, "--data", str(bundle), "--out", str(tmp_path / "bc"),
                 "--proportions", "50", "100"]) == 0
    bc = json.loads((tmp_path / "bc" / "bc.json").read_text())
    assert set(bc["proportions"]) == {"50", "100"}
    assert main(["bc", *TINY, "--data", str(bundle), "--out", str(tmp_path / "bc2"), "--proportions", "0"]) == 2


def test_default_output_root(bundle, tmp_path, monkeypatch):
    monkeypatch.setenv("DT4REC_OUT", str(tmp_path / "root"))
    assert main(["synth", *TINY]) == 0
    assert (tmp_path / "root" / "synth" / "manifest.json").exists()


def test_ingest(tmp_path):
    log = tmp_path / "log.tsv"
    rows = [f"{u}\t{(u + d) % 5}\t{d * 86400 + 60}" for u in range(6) for d in range(12)]
    log.write_text("\n".join(rows) + "\n")
    out = tmp_path / "bundle"
    assert main(["ingest", "--log", str(log), "--set", "data.min_interactions=1",
                 "--set", "data.fractions=0.5,0.25,0.25", "--out", str(out)]) == 0
    stats = json.loads((out / "stats.json").read_text())
    assert stats["users"] == 6 and stats["mean_retention"] == 7.0
    assert main(["ingest", "--log", str(tmp_path / "nope.tsv"), "--out", str(out)]) == 3
