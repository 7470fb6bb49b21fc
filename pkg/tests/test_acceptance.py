"""Acceptance criteria; each test prints one PASS/FAIL line.

The desk-scale end-to-end checks share one session fixture that runs
``stocktl run-all --preset desk --seed 7`` twice through the CLI plus a
zero-signal variant, so the whole module takes several minutes.
"""

import contextlib
import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from stocktl import augment as A
from stocktl import backtest as bt
from stocktl import data as D
from stocktl import experiment as ex
from stocktl import network as nn
from stocktl.config import preset_config

import gradcheck
import oracle
from conftest import ACCEPTANCE_LINES


@contextlib.contextmanager
def criterion(name):
    detail = {}
    try:
        yield detail
    except BaseException:
        line = f"FAIL  {name}"
        if detail:
            line += "  " + ", ".join(f"{k}={v}" for k, v in detail.items())
        ACCEPTANCE_LINES.append(line)
        print(line)
        raise
    line = f"PASS  {name}"
    if detail:
        line += "  " + ", ".join(f"{k}={v}" for k, v in detail.items())
    ACCEPTANCE_LINES.append(line)
    print(line)


# ---------------------------------------------------------------------------
# fast criteria
# ---------------------------------------------------------------------------

def test_gradient_suite():
    with criterion("gradient suite: 8 configurations, max rel err < 1e-4, < 10 s") as d:
        # one tiny call first so first-use JIT compilation is reported, not timed
        t0 = time.perf_counter()
        model, w, y, r = gradcheck.toy_case(2, None, False, H=1, T=2, batch=1)
        nn.backward(model, y, r, "CE", windows=w)
        d.update(jit_warmup_s=f"{time.perf_counter() - t0:.2f}")
        t0 = time.perf_counter()
        worst = gradcheck.run_suite()
        elapsed = time.perf_counter() - t0
        d.update(max_rel_err=f"{worst:.2e}", seconds=f"{elapsed:.2f}")
        assert worst < 1e-4
        assert elapsed < 10


def test_freeze_invariant():
    with criterion("freeze invariant: encoder hash unchanged after 5 target epochs") as d:
        config = preset_config("desk")
        study = ex.Study(config)
        sd = study.split(0)
        source = nn.init_params(config.hidden_size, 2, seed=1)
        before = source.encoder.digest()
        model = nn.transfer(source, 25, seed=2)
        train = nn.TrainingData(sd.train.ternary_label, sd.train.next_return,
                                windows=sd.train.windows)
        val = nn.TrainingData(sd.val.ternary_label, sd.val.next_return, windows=sd.val.windows)
        cfg = nn.TrainConfig(max_epochs=5, patience=100, loss_kind="R+CE", seed=3)
        best, log = nn.train(model, train, val, cfg)
        d.update(epochs=len(log))
        assert len(log) == 5
        assert best.encoder.digest() == before
        assert source.encoder.digest() == before


def test_split_label_arithmetic():
    with criterion("split/label arithmetic: 7000 days -> 25 splits, 10/10/(M-20), < 5 s") as d:
        t0 = time.perf_counter()
        panel = D.generate_synthetic_panel(7000, 500, 0.5, seed=0)
        splits = D.generate_splits(panel)
        _, ternary = D.label_arrays(panel, 10)
        counts = np.stack([(ternary == c).sum(axis=1) for c in (D.BUY, D.SELL, D.NOTHING)], 1)
        elapsed = time.perf_counter() - t0
        d.update(splits=len(splits), seconds=f"{elapsed:.2f}")
        assert len(splits) == 25
        assert np.all(counts == np.array([10, 10, 480]))
        assert elapsed < 5


def test_metrics_oracle():
    with criterion("metrics oracle: 5 statistics on 3 series to 1e-9, macro-F1 = 7/9") as d:
        worst = 0.0
        for series in oracle.FIXED_SERIES:
            assert 10 <= len(series) <= 20
            rep = bt.portfolio_metrics(series)
            ref = oracle.stats(series)
            got = (rep.ann_return, rep.ann_vol, rep.information_ratio, rep.downside_risk,
                   rep.downside_ir)
            want = (ref["ann_return"], ref["ann_vol"], ref["ir"], ref["downside"], ref["dir"])
            worst = max(worst, max(abs(a - b) for a, b in zip(got, want)))
        _, f1 = bt.classification_metrics([0, 1, 1, 2], [0, 0, 1, 2])
        d.update(max_abs_err=f"{worst:.1e}")
        assert worst < 1e-9
        assert f1 == 7 / 9


def test_augmentation_identities():
    with criterion("augmentation identities, length 240, exact doubling") as d:
        rng = np.random.default_rng(0)
        feats = rng.normal(0, 1, (400, 8))
        wins = rng.normal(0, 1, (400, 240))
        labels = rng.integers(0, 3, 400)
        nxt = rng.normal(0, 0.02, 400)
        identities = [("feat_interpolate", {"lam": 0.0}), ("feat_extrapolate", {"lam": 0.0}),
                      ("feat_jitter", {"sigma": 0.0}), ("feat_noise", {"gamma": 0.0}),
                      ("inp_jitter", {"sigma": 0.0}), ("inp_timewarp", {"warp_sigma": 0.0})]
        for kind, kw in identities:
            spec = A.AugmentationSpec(kind, seed=1, **kw)
            data = feats if spec.space == "feature" else wins
            out = A.augment_dataset(data, labels, nxt, spec)
            assert np.array_equal(out.augmented, data), kind
        for kind in A.KINDS:
            spec = A.AugmentationSpec(kind, seed=2)
            data = feats if spec.space == "feature" else wins
            out = A.augment_dataset(data, labels, nxt, spec)
            assert len(out) == 2 * len(data), kind
            assert len(out.combined()[1]) == 2 * len(labels)
            if spec.space == "input":
                assert out.augmented.shape[1] == 240, kind
        d.update(kinds=len(A.KINDS))


def test_augmentation_statistics():
    with criterion("augmentation statistics: jitter std 0.05 and noise std gamma*sigma, +-5%") as d:
        rng = np.random.default_rng(42)
        n = 20_000
        feat_j = (A.feat_jitter(np.zeros((n, 4)), 0.05, rng)).std(axis=0)
        inp_j = np.stack([A.inp_jitter(np.zeros(240), 0.05, rng) for _ in range(50)]).ravel()
        scale = np.array([0.2, 1.0, 3.0, 0.05])
        f = rng.normal(0, 1, (n, 4)) * scale
        noise = (A.feat_noise(f, 0.5, rng) - f).std(axis=0) / (0.5 * f.std(axis=0))
        d.update(feat_jitter=f"{feat_j.min():.4f}-{feat_j.max():.4f}",
                 inp_jitter=f"{inp_j.std():.4f}",
                 noise_ratio=f"{noise.min():.3f}-{noise.max():.3f}")
        assert np.all(np.abs(feat_j / 0.05 - 1) < 0.05)
        assert abs(inp_j.std() / 0.05 - 1) < 0.05
        assert np.all(np.abs(noise - 1) < 0.05)


# ---------------------------------------------------------------------------
# desk-scale end to end
# ---------------------------------------------------------------------------

def _cli(*args):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "stocktl.cli", *args],
                          capture_output=True, text=True)
    return proc, time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    runs = {}
    for tag in ("a", "b"):
        proc, secs = _cli("run-all", "--preset", "desk", "--seed", "7", "--out", str(root / tag))
        runs[tag] = {"dir": root / tag, "proc": proc, "seconds": secs}

    cfg = preset_config("desk").with_overrides(
        synthetic_signal_strength=0.0, seed=7, arms=("tl_fc25_ce",),
        output_dir=str(root / "zero"))
    t0 = time.perf_counter()
    ex.run_all(cfg)
    runs["zero"] = {"dir": root / "zero", "seconds": time.perf_counter() - t0}
    return runs


def _arm(run, name):
    return json.loads((run["dir"] / "arms" / f"{name}.json").read_text())


@pytest.mark.slow
def test_desk_cli_exit_codes(desk_runs):
    with criterion("desk run-all exits 0 with a status JSON") as d:
        for tag in ("a", "b"):
            proc = desk_runs[tag]["proc"]
            d[f"exit_{tag}"] = proc.returncode
            assert proc.returncode == 0, proc.stderr[-2000:]
            assert json.loads(proc.stdout)["status"] == "ok"


@pytest.mark.slow
def test_desk_source_accuracy(desk_runs):
    with criterion("end-to-end (a): source binary validation accuracy > 55% on every split") as d:
        manifest = json.loads((desk_runs["a"]["dir"] / "manifest.json").read_text())
        accs = [s["val_accuracy"] for s in manifest["sources"]]
        d.update(val_acc="/".join(f"{a:.3f}" for a in accs))
        assert len(accs) == 3
        assert all(a > 0.55 for a in accs)


@pytest.mark.slow
def test_desk_transfer_beats_scratch(desk_runs):
    with criterion("end-to-end (b): TL IR > from-scratch IR in >= 2 of 3 seeds") as d:
        tl = _arm(desk_runs["a"], "tl_fc25_rce")["per_seed"]
        scratch = _arm(desk_runs["a"], "notl_fc25_rce")["per_seed"]
        assert [s["seed"] for s in tl] == [s["seed"] for s in scratch] == [1, 2, 3]
        tl_ir = [s["report"]["information_ratio"] for s in tl]
        sc_ir = [s["report"]["information_ratio"] for s in scratch]
        wins = sum(a > b for a, b in zip(tl_ir, sc_ir))
        d.update(tl_ir="/".join(f"{v:.2f}" for v in tl_ir),
                 scratch_ir="/".join(f"{v:.2f}" for v in sc_ir), wins=wins)
        assert wins >= 2


@pytest.mark.slow
def test_desk_zero_signal_chance(desk_runs):
    with criterion("end-to-end (c): zero-signal ternary accuracy within chance +- 3 sigma") as d:
        arm = _arm(desk_runs["zero"], "tl_fc25_ce")
        zs = []
        for seed_entry in arm["per_seed"]:
            conf = sum(np.array(s["confusion"]) for s in seed_entry["splits"])
            n = conf.sum()
            acc = np.trace(conf) / n
            truth = conf.sum(axis=1) / n
            pred = conf.sum(axis=0) / n
            chance = float(truth @ pred)
            sigma = math.sqrt(chance * (1 - chance) / n)
            zs.append((acc - chance) / sigma)
        d.update(z="/".join(f"{z:+.2f}" for z in zs))
        assert all(abs(z) <= 3 for z in zs)


@pytest.mark.slow
def test_desk_runtime(desk_runs):
    with criterion("end-to-end runtime target < 10 min (desk run + zero-signal run)") as d:
        total = desk_runs["a"]["seconds"] + desk_runs["zero"]["seconds"]
        d.update(seconds=f"{total:.0f}")
        assert total < 600


@pytest.mark.slow
def test_cost_monotonicity(desk_runs):
    with criterion("cost monotonicity: 0 -> 5 bps never raises net annual return") as d:
        files = sorted((desk_runs["a"]["dir"] / "predictions").glob("*.csv"))
        assert files
        for path in files:
            table = ex.read_predictions(path)
            rets = [ex.backtest_predictions(table, 10, c).ann_return
                    for c in (0.0, 0.0001, 0.00025, 0.0005)]
            assert all(a >= b for a, b in zip(rets, rets[1:])), path.name
        d.update(arms=len(files))


@pytest.mark.slow
def test_augmented_arms_double(desk_runs):
    with criterion("every augmented desk arm trained on exactly 2x samples") as d:
        n = 0
        for kind in A.KINDS:
            for seed_entry in _arm(desk_runs["a"], f"tl_fc25_rce_{kind}")["per_seed"]:
                for s in seed_entry["splits"]:
                    assert s["n_train_augmented"] == 2 * s["n_train"], kind
                    n += 1
        d.update(checked=n)


@pytest.mark.slow
def test_determinism(desk_runs):
    with criterion("determinism: two desk run-all invocations give byte-identical reports") as d:
        for name in ("report.csv", "report.json"):
            a = (desk_runs["a"]["dir"] / name).read_bytes()
            b = (desk_runs["b"]["dir"] / name).read_bytes()
            assert a == b, name
        d.update(rows=len((desk_runs["a"]["dir"] / "report.csv").read_text().splitlines()) - 1)
