"""Acceptance suite. Each test prints one PASS/FAIL line for its criterion.

The trained desk models (4 seeds x {baseline, regex}) are built once per
session and shared by criteria 2, 4 and 6-9.
"""

import json
import time

import numpy as np
import pytest

from faithbench import cli
from faithbench import diffcore as dc
from faithbench import faitheval as fe
from faithbench import textdata as td
from faithbench.attribution import (aggregate, deeplift_raw, integrated_gradients_raw, inputxgrad_raw,
                                    predict_labels, saliency_raw, top_k_indices)
from faithbench.model import init_params, load_checkpoint

from graphs import check_graph
from toymodels import LinearTokenModel

SEEDS = (0, 1, 2, 3)
DIRECTIONAL_SEEDS = (0, 1, 2)
# desk preset: one encoder layer, four epochs
DESK = ["num_layers=1", "embed_dim=32", "num_heads=4", "ffn_dim=64", "max_len=32", "epochs=4",
        "batch_size=32", "lr_encoder=1e-3", "lr_head=1e-3"]


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    assert cli.main(["synth-data", "--out", str(root), "--n-train", "5000", "--n-dev", "500",
                     "--n-test", "500"]) == 0
    cfg = cli.resolve_config(str(root / "base.cfg"), DESK)
    models, results, seconds = {}, {}, {}
    vocab = splits = None
    for seed in SEEDS:
        for mode in ("baseline", "regex"):
            t0 = time.perf_counter()
            model, vocab, result, splits = cli.train_from_config(dict(cfg, mode=mode), seed=seed)
            seconds[mode, seed] = time.perf_counter() - t0
            models[mode, seed] = model
            results[mode, seed] = result
    test = cli.load_split(cfg["test_file"], vocab, cfg)
    mcfg = cli.model_config(cfg, len(vocab))
    untrained = {s: init_params(mcfg, seed=s) for s in SEEDS}
    return {"root": root, "cfg": cfg, "vocab": vocab, "train": splits[0], "dev": splits[1], "test": test,
            "models": models, "results": results, "seconds": seconds, "untrained": untrained, "faith": {}}


def faithfulness(desk, mode, seed):
    key = (mode, seed)
    if key not in desk["faith"]:
        desk["faith"][key] = fe.evaluate_faithfulness(desk["models"][key], desk["test"],
                                                      ["scaled_attention", "deeplift"])
    return desk["faith"][key]


# 1 ---------------------------------------------------------------------------

def test_criterion_1_autodiff_matches_finite_differences(capsys):
    t0 = time.perf_counter()
    worst = max(check_graph(seed)[0] for seed in range(200))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30.0
    report(capsys, 1, ok, f"worst rel err {worst:.2e} over 200 graphs in {elapsed:.1f}s")
    assert ok


# 2 ---------------------------------------------------------------------------

def test_criterion_2_ig_completeness_on_trained_model(desk, capsys):
    model = desk["models"]["regex", 0]
    exs = desk["test"][:200]
    targets = predict_labels(model, exs)
    errs = {16: [], 256: []}
    rel256 = []
    for start in range(0, len(exs), 20):
        b = td.make_batch(exs[start:start + 20])
        t = targets[start:start + 20]
        with dc.no_grad():
            E = model.embed(b.ids).data
            ref = model.reference_embeddings(b.ids)
            rows = np.arange(len(t))
            fx = model.forward_from_embeddings(dc.Tensor(E), b.lengths).logits.data[rows, t]
            f0 = model.forward_from_embeddings(dc.Tensor(ref), b.lengths).logits.data[rows, t]
        for m in (16, 256):
            ig = integrated_gradients_raw(model, E, b.lengths, t, m, ref)
            errs[m].append(np.abs(ig.sum(axis=(1, 2)) - (fx - f0)))
        rel256.append(errs[256][-1] / np.abs(fx - f0))
    e16, e256, rel = (np.concatenate(v) for v in (errs[16], errs[256], rel256))
    frac_better = float(np.mean(e256 < e16))
    ok = rel.max() <= 0.005 and frac_better >= 0.95
    report(capsys, 2, ok, f"max rel gap at m=256 {rel.max():.2e}; m=256 beats m=16 on {frac_better:.1%}")
    assert ok


# 3 ---------------------------------------------------------------------------

def test_criterion_3_linear_oracle(capsys):
    # unit-magnitude scalar inputs, where gradient norm and |w x| coincide
    rng = np.random.default_rng(0)
    L, hits, total = 12, 0, 0
    for _ in range(10):
        lm = LinearTokenModel(rng.normal(size=(2, L, 1)), rng.normal(size=2))
        E = rng.choice([-1.0, 1.0], size=(100, L, 1))
        t = rng.integers(0, 2, size=100)
        analytic = np.abs(lm.W[t, :, 0] * E[:, :, 0])
        raws = (saliency_raw(lm, E, None, t), integrated_gradients_raw(lm, E, None, t, 50),
                deeplift_raw(lm, E, None, t), inputxgrad_raw(lm, E, None, t))
        scores = [aggregate(r, "l2") for r in raws]
        for i in range(100):
            same = True
            for k in fe.AOPC_BINS + (0.25,):
                want = top_k_indices(analytic[i], k).tolist()
                same &= all(top_k_indices(s[i], k).tolist() == want for s in scores)
            hits += same
            total += 1
    ok = hits == total == 1000
    report(capsys, 3, ok, f"{hits}/{total} inputs agree for saliency, IG, DeepLift, InputXGrad")
    assert ok


# 4 ---------------------------------------------------------------------------

def test_criterion_4_metric_identities(desk, capsys):
    models = list(desk["models"].values()) + list(desk["untrained"].values())
    exs = desk["test"][:100]
    bad = 0
    for model in models:
        preds = predict_labels(model, exs)
        for ex, y in zip(exs, preds):
            bad += fe.sufficiency(model, ex, int(y), ex.content_positions) != 1.0
            bad += fe.comprehensiveness(model, ex, int(y), ()) != 0.0
        rep = fe.evaluate_faithfulness(model, exs, ["rand", "attention"])
        for m in rep.methods.values():
            for arr in (m.sufficiency, m.comprehensiveness):
                bad += int(((arr < 0) | (arr > 1)).sum())
    hand = fe.normalized_sufficiency(0.9, 0.7, 0.5)[0]
    ok = bad == 0 and abs(hand - 0.5) < 1e-12
    report(capsys, 4, ok, f"{bad} violations over {len(models)} models x {len(exs)} examples; hand value {hand:.12g}")
    assert ok


# 5 ---------------------------------------------------------------------------

def test_criterion_5_zero_lambdas_match_baseline(desk, capsys):
    cfg = desk["cfg"]
    runs = []
    for over in ({"mode": "baseline"}, {"mode": "regex", "lambda2": 0.0, "lambda3": 0.0, "lambda4": 0.0}):
        model, _, result, _ = cli.train_from_config(dict(cfg, epochs=2, **over), seed=5)
        runs.append((model, result))
    (a, ra), (b, rb) = runs
    same_params = all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
    strip = lambda log: [{k: v for k, v in e.items() if k != "seconds"} for e in log]  # noqa: E731
    same_log = strip(ra.log) == strip(rb.log)
    ok = same_params and same_log
    report(capsys, 5, ok, f"parameters identical: {same_params}; epoch logs identical: {same_log}")
    assert ok


# 6 ---------------------------------------------------------------------------

def test_criterion_6_regex_improves_aopc(desk, capsys):
    t0 = time.perf_counter()
    wins = {(m, s): 0 for m in ("scaled_attention", "deeplift") for s in ("suff", "comp")}
    lines = []
    for seed in DIRECTIONAL_SEEDS:
        base, reg = faithfulness(desk, "baseline", seed), faithfulness(desk, "regex", seed)
        for m in ("scaled_attention", "deeplift"):
            b, r = base.methods[m], reg.methods[m]
            wins[m, "suff"] += r.aopc_sufficiency > b.aopc_sufficiency
            wins[m, "comp"] += r.aopc_comprehensiveness > b.aopc_comprehensiveness
            lines.append(f"s{seed} {m} suff {b.aopc_sufficiency:.3f}->{r.aopc_sufficiency:.3f} "
                         f"comp {b.aopc_comprehensiveness:.3f}->{r.aopc_comprehensiveness:.3f}")
    train_s = sum(desk["seconds"][mode, s] for mode in ("baseline", "regex") for s in DIRECTIONAL_SEEDS)
    total = train_s + time.perf_counter() - t0
    ok = all(v >= 2 for v in wins.values()) and total < 15 * 60
    tally = ", ".join(f"{m}/{s} {v}/3" for (m, s), v in wins.items())
    report(capsys, 6, ok, f"{tally}; run {total / 60:.1f} min on this machine | " + "; ".join(lines))
    assert ok


# 7 ---------------------------------------------------------------------------

def test_criterion_7_consistency_across_seeds(desk, capsys):
    exs = desk["test"][:200]
    k = desk["cfg"]["jaccard_k"]
    # one independently initialised untrained instance, as the CLI adds
    untrained = init_params(desk["untrained"][0].config, seed=max(SEEDS) + 1000)
    mean_dit, ok_uit, parts = {}, True, []
    for mode in ("baseline", "regex"):
        trained = [desk["models"][mode, s] for s in SEEDS]
        rep = fe.jaccard_consistency(trained + [untrained], exs, "scaled_attention", k)
        n = len(SEEDS)
        dit = rep.matrix[:n, :n][~np.eye(n, dtype=bool)]
        uit = rep.matrix[:n, n]
        mean_dit[mode] = float(dit.mean())
        ok_uit &= bool(uit.max() < dit.min())
        parts.append(f"{mode} DIT mean {dit.mean():.3f} min {dit.min():.3f}, UIT max {uit.max():.3f}")
    ok = mean_dit["regex"] > mean_dit["baseline"] and ok_uit
    report(capsys, 7, ok, "; ".join(parts))
    assert ok


# 8 ---------------------------------------------------------------------------

def test_criterion_8_fresh(desk, capsys):
    cfg = desk["cfg"]
    corpora = (desk["train"], desk["dev"], desk["test"])
    ok, parts = True, []
    for seed in DIRECTIONAL_SEEDS:
        tcfg = cli.train_config(dict(cfg, seed=seed, mode="baseline"))
        full = fe.macro_f1(predict_labels(desk["models"]["baseline", seed], desk["test"]),
                           [e.label for e in desk["test"]], cfg["num_classes"])
        src = desk["models"]["regex", seed]
        sa = fe.fresh_evaluate(src, "scaled_attention", 0.2, corpora, tcfg, full_text_f1=full, seed=seed)
        rd = fe.fresh_evaluate(src, "rand", 0.2, corpora, tcfg, full_text_f1=full, seed=seed)
        ok &= sa.rationale_f1 >= 0.95 * full and rd.rationale_f1 < sa.rationale_f1
        parts.append(f"s{seed} full {full:.3f} scaled {sa.rationale_f1:.3f} rand {rd.rationale_f1:.3f}")
    report(capsys, 8, ok, "; ".join(parts))
    assert ok


# 9 ---------------------------------------------------------------------------

def test_criterion_9_overhead_band(desk, capsys):
    per = {mode: np.median([t for s in SEEDS for t in desk["results"][mode, s].epoch_seconds])
           for mode in ("baseline", "regex")}
    ratio = per["regex"] / per["baseline"]
    ok = 1.5 <= ratio <= 4.0
    report(capsys, 9, ok, f"median epoch {per['regex']:.1f}s regex / {per['baseline']:.1f}s baseline = {ratio:.2f}x")
    assert ok


# 10 --------------------------------------------------------------------------

def test_criterion_10_reproducibility(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FAITHBENCH_CACHE", str(tmp_path / "cache"))
    data = tmp_path / "data"
    assert cli.main(["synth-data", "--out", str(data), "--n-train", "200", "--n-dev", "40", "--n-test", "40"]) == 0
    sets = []
    for s in ["num_layers=1", "embed_dim=16", "num_heads=2", "ffn_dim=32", "epochs=1", "ig_steps=2",
              "eval_ig_steps=8", "eval_limit=30"]:
        sets += ["--set", s]
    conf = str(data / "base.cfg")
    assert cli.main(["train", "--config", conf, "--out", str(tmp_path / "run")] + sets) == 0
    assert cli.main(["evaluate", "--config", conf, "--checkpoint", str(tmp_path / "run" / "model.ckpt"),
                     "--out", str(tmp_path / "eval")] + sets) == 0

    cfg = cli.resolve_config(conf, [s for s in sets if s != "--set"])
    model, vocab, _, _ = cli.train_from_config(cfg)
    ckpt, _, _ = load_checkpoint(tmp_path / "run" / "model.ckpt")
    same_params = all(np.array_equal(p.data, q.data) for p, q in zip(model.parameters(), ckpt.parameters()))
    test = cli.load_split(cfg["test_file"], vocab, cfg)[:cfg["eval_limit"]]
    local = cli.evaluate_model(model, test, cfg, cli.method_list(cfg["methods"]))
    same_eval = local.to_json() == json.loads((tmp_path / "eval" / "faithfulness.json").read_text())

    replays = True
    for step in ("run", "eval"):
        again = tmp_path / (step + "_again")
        assert cli.main(["replay", str(tmp_path / step / "manifest.json"), "--out", str(again)]) == 0
        names = ("model.ckpt",) if step == "run" else ("faithfulness.csv", "faithfulness.json")
        replays &= all((tmp_path / step / n).read_bytes() == (again / n).read_bytes() for n in names)
    ok = same_params and same_eval and replays
    report(capsys, 10, ok, f"checkpoint == in-process: {same_params}; evaluate == in-process: {same_eval}; "
                           f"replays byte-identical: {replays}")
    assert ok
