import csv
import json

import numpy as np
import pytest

from faithbench import cli
from faithbench import faitheval as fe
from faithbench.attribution import IgConfig, attribute, predict_labels
from faithbench.model import load_checkpoint
from faithbench.textdata import load_jsonl, tokenize

SMALL = ["embed_dim=16", "num_heads=2", "ffn_dim=24", "num_layers=1", "epochs=1", "batch_size=16",
         "ig_steps=2", "eval_ig_steps=4", "eval_limit=12"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    code = cli.main(["synth-data", "--out", str(out), "--n-train", "64", "--n-dev", "16", "--n-test", "16",
                     "--min-length", "4", "--max-length", "10"])
    assert code == 0
    return out


@pytest.fixture(autouse=True)
def _cache(tmp_path, monkeypatch):
    monkeypatch.setenv("FAITHBENCH_CACHE", str(tmp_path / "cache"))


def _sets(*extra):
    out = []
    for s in SMALL + list(extra):
        out += ["--set", s]
    return out


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--config", str(corpus / "base.cfg"), "--out", str(out)] + _sets()) == 0
    return out


def test_synth_data_layout(corpus):
    for split in ("train", "dev", "test"):
        assert (corpus / f"{split}.jsonl").is_file()
        assert (corpus / f"{split}.rationales.jsonl").is_file()
    cfg = cli.resolve_config(str(corpus / "base.cfg"))
    assert cfg["train_file"] == str((corpus / "train.jsonl").resolve())
    assert json.loads((corpus / "manifest.json").read_text())["command"] == "synth-data"


def test_train_outputs(trained):
    assert (trained / "model.ckpt").is_file()
    log = [json.loads(l) for l in (trained / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 1 and {"epoch", "loss", "dev_macro_f1", "seconds"} <= set(log[0])
    assert (trained / "training.png").stat().st_size > 0
    man = json.loads((trained / "manifest.json").read_text())
    assert man["command"] == "train" and "lambda4 = 0.01" in man["config"]
    assert all(len(d) == 64 for d in man["inputs"].values())


def test_train_deterministic(corpus, tmp_path):
    digests = []
    for i in range(2):
        out = tmp_path / str(i)
        assert cli.main(["train", "--config", str(corpus / "base.cfg"), "--out", str(out)]
                        + _sets("seed=1", "mode=baseline")) == 0
        digests.append(cli.file_digest(out / "model.ckpt"))
    assert digests[0] == digests[1]


def test_config_errors(corpus, tmp_path, capsys):
    base = ["train", "--config", str(corpus / "base.cfg"), "--out", str(tmp_path)]
    assert cli.main(base + ["--set", "lambda5=1"]) == cli.EXIT_CONFIG
    assert "valid keys" in capsys.readouterr().err
    assert cli.main(base + ["--set", "epochs=two"]) == cli.EXIT_CONFIG
    assert cli.main(base + ["--set", "mask_ratio=1.5"]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["bogus"]) == cli.EXIT_CONFIG
    assert cli.main(base + ["--set", "train_file=/no/such.jsonl"]) == cli.EXIT_DATA


def test_config_round_trip():
    cfg = dict(cli.DEFAULTS, lambda4=0.0005, disable_vat=True)
    again = dict(cli.DEFAULTS)
    again.update(cli.parse_config_text(cli.render_config(cfg)))
    assert again == cfg


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(corpus, tmp_path):
    code = cli.main(["train", "--config", str(corpus / "base.cfg"), "--out", str(tmp_path)]
                    + _sets("lr_encoder=1e300", "lr_head=1e300", "mode=baseline", "epochs=2"))
    assert code == cli.EXIT_NUMERIC


def test_evaluate_single_method_and_determinism(corpus, trained, tmp_path):
    outs = []
    for i in range(2):
        out = tmp_path / str(i)
        assert cli.main(["evaluate", "--config", str(corpus / "base.cfg"), "--checkpoint", str(trained / "model.ckpt"),
                         "--methods", "rand", "--out", str(out)] + _sets()) == 0
        outs.append(out)
    assert (outs[0] / "faithfulness.csv").read_bytes() == (outs[1] / "faithfulness.csv").read_bytes()
    rep = json.loads((outs[0] / "faithfulness.json").read_text())
    assert list(rep["methods"]) == ["rand"]
    assert (outs[0] / "faithfulness.png").is_file()


def test_evaluate_all_methods_matches_in_process(corpus, trained, tmp_path):
    assert cli.main(["evaluate", "--config", str(corpus / "base.cfg"), "--checkpoint", str(trained / "model.ckpt"),
                     "--out", str(tmp_path)] + _sets()) == 0
    rep = json.loads((tmp_path / "faithfulness.json").read_text())
    assert len(rep["methods"]) == 7
    assert all(list(b["bins"]) == ["0.01", "0.05", "0.1", "0.2", "0.5"] for b in rep["methods"].values())
    cfg = cli.resolve_config(str(corpus / "base.cfg"), SMALL)
    model, vocab, _ = load_checkpoint(trained / "model.ckpt")
    exs = [tokenize(t, vocab, cfg["max_len"], y) for t, y in load_jsonl(cfg["test_file"])][:12]
    local = cli.evaluate_model(model, exs, cfg, cli.method_list(cfg["methods"]))
    assert local.to_json() == rep


def test_evaluate_vocab_mismatch(trained, tmp_path):
    data = tmp_path / "other.jsonl"
    data.write_text("".join(json.dumps({"text": "zz yy xx qq", "label": 0}) + "\n" for _ in range(3)))
    code = cli.main(["evaluate", "--checkpoint", str(trained / "model.ckpt"), "--data", str(data),
                     "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_DATA


def test_explain_outputs(tmp_path):
    rows = [{"text": "good <b> fine & nice day", "label": 1}, {"text": "bad <b> awful rain", "label": 0}] * 8
    for name in ("train", "dev"):
        with open(tmp_path / f"{name}.jsonl", "w") as fh:
            for i, r in enumerate(rows):
                fh.write(json.dumps({"text": r["text"] + f" n{name}{i}", "label": r["label"]}) + "\n")
    assert cli.main(["train", "--out", str(tmp_path / "run"), "--set", f"train_file={tmp_path / 'train.jsonl'}",
                     "--set", f"dev_file={tmp_path / 'dev.jsonl'}"] + _sets("mode=baseline")) == 0
    out = tmp_path / "exp"
    assert cli.main(["explain", "--checkpoint", str(tmp_path / "run" / "model.ckpt"), "--data",
                     str(tmp_path / "train.jsonl"), "--method", "ig", "--k", "0.25", "--out", str(out)]
                    + _sets()) == 0
    lines = [json.loads(l) for l in (out / "explanations.jsonl").read_text().splitlines()]
    for l in lines:
        assert len(l["highlight"]) == int(np.ceil(0.25 * len(l["tokens"])))
    page = (out / "explanations.html").read_text()
    assert "&lt;b&gt;" in page and "<b>" not in page and "&amp;" in page
    model, vocab, _ = load_checkpoint(tmp_path / "run" / "model.ckpt")
    exs = [tokenize(t, vocab, 64, y) for t, y in load_jsonl(tmp_path / "train.jsonl")][:12]
    attrs = attribute(model, exs, "ig", targets=predict_labels(model, exs), ig=IgConfig(4))
    for l, a in zip(lines, attrs):
        assert np.abs(np.array(l["scores"]) - a.scores).max() <= 1e-12


def test_consistency_outputs(corpus, tmp_path):
    out = tmp_path / "c"
    assert cli.main(["consistency", "--config", str(corpus / "base.cfg"), "--seeds", "3,3,4",
                     "--include-untrained", "--out", str(out)] + _sets()) == 0
    with open(out / "consistency.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["model", "seed3", "seed3", "seed4", "untrained"]
    m = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    assert m.shape == (4, 4)
    assert np.allclose(np.diag(m), 1.0) and np.allclose(m, m.T) and m[0, 1] == 1.0
    assert (out / "consistency.png").is_file()
    assert cli.main(["consistency", "--config", str(corpus / "base.cfg"), "--seeds", "3",
                     "--out", str(out)]) == cli.EXIT_CONFIG


def test_ablation_components(corpus, tmp_path):
    out = tmp_path / "a"
    assert cli.main(["ablation", "--config", str(corpus / "base.cfg"), "--sweep", "components", "--out", str(out)]
                    + _sets("methods=rand,attention")) == 0
    with open(out / "ablation.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "components"
    assert [r[0] for r in rows[1::2]] == ["full", "w/o robustness", "w/o EGT", "w/o VAT", "w/o IGR"]
    assert cli.sweep_points("lambda4")[0][0] == 0.0005
    assert {0.15, 0.2} <= {v for v, _ in cli.sweep_points("mask_ratio")}


def test_fresh_command(corpus, tmp_path):
    out = tmp_path / "f"
    assert cli.main(["fresh", "--config", str(corpus / "base.cfg"), "--out", str(out)] + _sets()) == 0
    rows = (out / "fresh.csv").read_text().splitlines()
    assert rows[0] == "method,k,rationale_f1,full_text_f1"
    assert [r.split(",")[0] for r in rows[1:]] == ["scaled_attention", "rand"]


def test_replay_reproduces_reports(corpus, trained, tmp_path):
    first = tmp_path / "first"
    assert cli.main(["evaluate", "--config", str(corpus / "base.cfg"), "--checkpoint", str(trained / "model.ckpt"),
                     "--methods", "rand,saliency", "--out", str(first)] + _sets()) == 0
    again = tmp_path / "again"
    assert cli.main(["replay", str(first / "manifest.json"), "--out", str(again)]) == 0
    for name in ("faithfulness.csv", "faithfulness.json"):
        assert (first / name).read_bytes() == (again / name).read_bytes()
    man = cli.RunManifest.read(again / "manifest.json")
    assert man.outputs[0].startswith(str(again))
