import json

import numpy as np
import pytest

from s2tlab import config as C
from s2tlab.cli import main
from s2tlab.models import load_checkpoint
from s2tlab.synthdata import read_manifest

TINY = ["--model.d_model", "16", "--model.d_ffn", "32", "--model.heads", "2", "--model.enc_layers", "1",
        "--model.dec_layers", "1", "--train.max_steps", "4", "--train.eval_every", "2",
        "--train.warmup_steps", "2", "--train.batch_frames", "200", "--train.avg_last_k", "2",
        "--train.valid_decode_n", "3"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--task", "asr", "--seed", "7", "--n-train", "20", "--n-valid", "4",
                 "--n-test", "4", "--out", str(root / "asr"), "--data.src_len", "2,4"]) == 0
    assert main(["train", "--data", str(root / "asr"), "--out", str(root / "run"), *TINY,
                 "--model.arch", "decoder_prepend", "--model.masking", "audio_relaxed"]) == 0
    return root


def test_gen_data_files_and_determinism(workdir, tmp_path):
    for split in ("train", "valid", "test"):
        assert (workdir / "asr" / f"{split}.tsv").exists()
    assert main(["gen-data", "--task", "asr", "--seed", "7", "--n-train", "20", "--n-valid", "4",
                 "--n-test", "4", "--out", str(tmp_path / "again"), "--data.src_len", "2,4"]) == 0
    for split in ("train", "valid", "test"):
        assert (workdir / "asr" / f"{split}.tsv").read_bytes() == (tmp_path / "again" / f"{split}.tsv").read_bytes()


def test_gen_data_refuses_existing_dir(workdir):
    assert main(["gen-data", "--task", "asr", "--out", str(workdir / "asr")]) == 3


def test_multilingual_tags(tmp_path):
    assert main(["gen-data", "--task", "st_multilingual", "--langs", "4", "--n-train", "12", "--n-valid", "2",
                 "--n-test", "2", "--out", str(tmp_path / "ml")]) == 0
    from s2tlab.synthdata import SynthParams, load_manifest
    ds = load_manifest(tmp_path / "ml" / "train.tsv", SynthParams(n_langs=4))
    assert {ex.target[0] for ex in ds} <= {4, 5, 6, 7}


def test_train_outputs_and_overrides(workdir):
    run = workdir / "run"
    assert (run / "avg.ckpt").exists() and (run / "metrics.csv").exists()
    resolved = dict(C.read_pairs(run / "config.cfg"))
    assert resolved["model.arch"] == "decoder_prepend" and resolved["model.masking"] == "audio_relaxed"
    assert resolved["model.vocab_size"] == "40" and resolved["data.src_len"] == "2,4"


def test_train_rerun_from_resolved_config_is_identical(workdir, tmp_path):
    assert main(["train", "--config", str(workdir / "run" / "config.cfg"), "--data", str(workdir / "asr"),
                 "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "avg.ckpt").read_bytes() == (workdir / "run" / "avg.ckpt").read_bytes()


def test_config_errors_listed_together(tmp_path, capsys):
    rc = main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"), "--model.arch", "nope",
               "--train.patience", "-1", "--model.bogus", "3"])
    err = capsys.readouterr().err
    assert rc == 2 and "model.bogus" in err and "model.arch" in err and "train.patience" in err


def test_missing_data_is_data_error(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["train", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 3


def test_eval_outputs_and_greedy_reduction(workdir, tmp_path):
    ck = str(workdir / "run" / "avg.ckpt")
    common = ["--ckpt", ck, "--data", str(workdir / "asr"), "--decode.length_penalty", "0",
              "--decode.no_repeat_ngram", "0"]
    assert main(["eval", *common, "--out", str(tmp_path / "b1"), "--decode.beam", "1"]) == 0
    assert main(["eval", *common, "--out", str(tmp_path / "g"), "--greedy"]) == 0
    assert (tmp_path / "b1" / "eval.tsv").read_text() == (tmp_path / "g" / "eval.tsv").read_text()
    rows = [l.split("\t") for l in (tmp_path / "b1" / "eval.tsv").read_text().splitlines()]
    assert len(rows) == 4 and all(len(r) == 3 for r in rows)
    metrics = json.loads((tmp_path / "b1" / "metrics.json").read_text())
    assert {"wer", "bleu", "acc", "n_examples"} <= set(metrics)
    # rerunning from the eval's own resolved config reproduces it
    assert main(["eval", "--ckpt", ck, "--config", str(tmp_path / "b1" / "config.cfg"), "--data",
                 str(workdir / "asr"), "--out", str(tmp_path / "b2")]) == 0
    assert (tmp_path / "b2" / "eval.tsv").read_text() == (tmp_path / "b1" / "eval.tsv").read_text()


def test_eval_missing_checkpoint(workdir, tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(workdir / "asr"),
                 "--out", str(tmp_path / "e")]) == 3


def test_bench_compare(workdir, tmp_path, capsys):
    ck = str(workdir / "run" / "avg.ckpt")
    for label, ckpt in (("avg", ck), ("early", str(workdir / "run" / "ckpt_000002.ckpt"))):
        assert main(["bench", "--ckpt", ckpt, "--data", str(workdir / "asr"), "--out",
                     str(tmp_path / f"{label}.csv"), "--label", label, "--n", "3",
                     "--run-config", str(workdir / "run" / "config.cfg")]) == 0
    capsys.readouterr()
    assert main(["compare", str(tmp_path / "avg.csv"), str(tmp_path / "early.csv"), "--baseline", "avg",
                 "--out", str(tmp_path / "t.md")]) == 0
    table = (tmp_path / "t.md").read_text().splitlines()
    assert len(table) == 4 and "1.00" in table[2]
    assert main(["bench", "--ckpt", ck, "--data", str(workdir / "asr"), "--out", str(tmp_path / "o.csv"),
                 "--label", "other", "--n", "2"]) == 0
    assert main(["compare", str(tmp_path / "avg.csv"), str(tmp_path / "o.csv"), "--baseline", "avg"]) == 3


def test_distill_and_train_on_combined(workdir, tmp_path):
    out = tmp_path / "kd"
    ck = str(workdir / "run" / "avg.ckpt")
    assert main(["distill", "--ckpt", ck, "--data", str(workdir / "asr"), "--out", str(out), "--greedy"]) == 0
    rows = read_manifest(out / "train.tsv")
    assert len(rows) == 40 and sum(r.task.endswith("+kd") for r in rows) == 20
    first = (out / "distilled.tsv").read_text()
    assert main(["distill", "--ckpt", ck, "--data", str(workdir / "asr"), "--out", str(out), "--greedy",
                 "--force"]) == 0
    assert (out / "distilled.tsv").read_text() == first
    assert main(["train", "--data", str(out), "--out", str(tmp_path / "student"), *TINY]) == 0


def test_distill_task_mismatch(workdir, tmp_path):
    assert main(["gen-data", "--task", "st_bilingual", "--n-train", "4", "--n-valid", "2", "--n-test", "2",
                 "--out", str(tmp_path / "st")]) == 0
    assert main(["distill", "--ckpt", str(workdir / "run" / "avg.ckpt"), "--data", str(tmp_path / "st"),
                 "--out", str(tmp_path / "kd")]) == 3


def test_avg_ckpt(workdir, tmp_path):
    run = workdir / "run"
    out = tmp_path / "a.ckpt"
    assert main(["avg-ckpt", str(run / "ckpt_000002.ckpt"), str(run / "ckpt_000004.ckpt"), "--out", str(out)]) == 0
    assert out.read_bytes() == (run / "avg.ckpt").read_bytes()
    same = tmp_path / "same.ckpt"
    assert main(["avg-ckpt", *[str(run / "avg.ckpt")] * 3, "--out", str(same)]) == 0
    assert same.read_bytes() == (run / "avg.ckpt").read_bytes()
    assert main(["avg-ckpt", str(tmp_path / "nope.ckpt"), "--out", str(out)]) == 3
