import json

import pytest

from vgram.cli import main
from vgram.config import ConfigError, digest, resolve

SMALL = ["--set", "synth_sentences=24", "--set", "synth_dev=6",
         "--set", "synth_test=6", "--set", "synth_max_len=5",
         "--set", "synth_min_len=2", "--set", "synth_dim=8"]
DIMS = ["--set", "hidden_dim=8", "--set", "match_dim=8", "--set", "tag_dim=4",
        "--set", "arc_hidden=6", "--set", "second_hidden=6",
        "--set", "dec_tag_dim=4", "--set", "dec_hidden=8"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(out)] + SMALL) == 0
    return out


def test_config_resolution_precedence(tmp_path):
    path = tmp_path / "conf"
    path.write_text("lr = 0.5\nbatch_size = 4\n")
    cfg = resolve(str(path), overrides={"lr": "0.25"})
    assert cfg["lr"] == 0.25       # CLI beats file
    assert cfg["batch_size"] == 4  # file beats default
    assert cfg["epochs"] == 10     # default


def test_config_unknown_key():
    with pytest.raises(ConfigError):
        resolve(overrides={"nonsense": "1"})


def test_config_digest_stable():
    assert digest(resolve()) == digest(resolve())
    assert digest(resolve()) != digest(resolve(overrides={"lr": "0.1"}))


def test_synth_outputs(dataset):
    names = {p.name for p in dataset.iterdir()}
    assert {"corpus.train.jsonl", "corpus.dev.jsonl", "corpus.test.jsonl",
            "features.jsonl", "scene_graphs.jsonl", "alignments.jsonl",
            "embeddings.jsonl"} <= names


def test_usage_error_exit_code():
    assert main(["parse"]) == 1
    assert main(["synth", "--out", "/tmp/x", "--set", "nonsense=1"]) == 1
    assert main(["nosuchcommand"]) == 1


def test_missing_file_exit_code(tmp_path):
    rc = main(["align", "--corpus", str(tmp_path / "none.jsonl"),
               "--scene-graphs", str(tmp_path / "none2.jsonl"),
               "--embeddings", str(tmp_path / "none3.jsonl"),
               "--out", str(tmp_path / "out.jsonl")])
    assert rc == 2


def test_align_and_eval_roundtrip(dataset, tmp_path):
    out = tmp_path / "align.jsonl"
    rc = main(["align", "--corpus", str(dataset / "corpus.test.jsonl"),
               "--scene-graphs", str(dataset / "scene_graphs.jsonl"),
               "--embeddings", str(dataset / "embeddings.jsonl"),
               "--out", str(out)])
    assert rc == 0 and out.exists()
    report = tmp_path / "report.json"
    rc = main(["eval", "--gold-corpus", str(dataset / "corpus.test.jsonl"),
               "--pred-align", str(out),
               "--gold-align", str(dataset / "alignments.jsonl"),
               "--scene-graphs", str(dataset / "scene_graphs.jsonl"),
               "--out", str(report)])
    assert rc == 0
    values = json.loads(report.read_text())
    assert values["zero_aa"] == 1.0  # exact lemma matches on synthetic data
    assert values["first_aa"] == 1.0


def test_eval_pred_equals_gold_is_perfect(dataset, capsys):
    rc = main(["eval", "--gold-corpus", str(dataset / "corpus.test.jsonl"),
               "--pred-trees", str(dataset / "corpus.test.jsonl")])
    assert rc == 0
    lines = dict(line.split("\t") for line in
                 capsys.readouterr().out.strip().splitlines())
    assert float(lines["dda"]) == 1.0
    assert float(lines["uda"]) == 1.0


def test_eval_without_inputs_is_usage_error(dataset):
    assert main(["eval", "--gold-corpus", str(dataset / "corpus.test.jsonl")]) == 1


def test_train_parse_ground_pipeline(dataset, tmp_path):
    run = tmp_path / "run"
    args = ["--corpus", str(dataset / "corpus.train.jsonl"),
            "--features", str(dataset / "features.jsonl"),
            "--embeddings", str(dataset / "embeddings.jsonl")]
    rc = main(["train"] + args + ["--out", str(run), "--set", "epochs=1"] + DIMS)
    assert rc == 0
    ckpt = run / "ckpt_final.bin"
    assert ckpt.exists()

    pred = tmp_path / "pred.jsonl"
    rc = main(["parse", "--corpus", str(dataset / "corpus.test.jsonl"),
               "--features", str(dataset / "features.jsonl"),
               "--embeddings", str(dataset / "embeddings.jsonl"),
               "--ckpt", str(ckpt), "--out", str(pred), "--set", "epochs=1"] + DIMS)
    assert rc == 0
    recs = [json.loads(line) for line in pred.read_text().splitlines()[1:]]
    assert all("heads" in r and "types" in r for r in recs)

    ground_out = tmp_path / "ground.jsonl"
    rc = main(["ground", "--corpus", str(dataset / "corpus.test.jsonl"),
               "--features", str(dataset / "features.jsonl"),
               "--embeddings", str(dataset / "embeddings.jsonl"),
               "--ckpt", str(ckpt), "--use-gold-trees",
               "--out", str(ground_out), "--set", "epochs=1"] + DIMS)
    assert rc == 0
    assert ground_out.exists()


def test_checkpoint_digest_guard(dataset, tmp_path):
    run = tmp_path / "run"
    args = ["--corpus", str(dataset / "corpus.train.jsonl"),
            "--features", str(dataset / "features.jsonl"),
            "--embeddings", str(dataset / "embeddings.jsonl")]
    assert main(["train"] + args + ["--out", str(run), "--set", "epochs=1"] + DIMS) == 0
    pred = tmp_path / "pred.jsonl"
    base = ["parse", "--corpus", str(dataset / "corpus.test.jsonl"),
            "--features", str(dataset / "features.jsonl"),
            "--embeddings", str(dataset / "embeddings.jsonl"),
            "--ckpt", str(run / "ckpt_final.bin"), "--out", str(pred)]
    # different config -> digest mismatch -> data error unless overridden
    assert main(base + DIMS + ["--set", "lr=0.9"]) == 2
    assert main(base + DIMS + ["--set", "lr=0.9", "--allow-digest-mismatch"]) == 0


def test_parse_workers_match_serial(dataset, tmp_path):
    args = ["--corpus", str(dataset / "corpus.test.jsonl"),
            "--features", str(dataset / "features.jsonl"),
            "--embeddings", str(dataset / "embeddings.jsonl")]
    out1, out2 = tmp_path / "w1.jsonl", tmp_path / "w2.jsonl"
    assert main(["parse"] + args + ["--out", str(out1)] + DIMS) == 0
    assert main(["parse"] + args + ["--out", str(out2), "--workers", "2"] + DIMS) == 0
    assert out1.read_text() == out2.read_text()
