"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 5 and 6 train real models and take several minutes.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from eegattn import cli, gradcheck
from eegattn.dataio import SynthSpec, generate_synthetic, read_trialset, trialset_bytes, write_trialset
from eegattn.dsp import design_butterworth_bandpass
from eegattn.layers import ModelConfig, classify_features, init_params, model_forward
from eegattn.stats import compare_conditions, kruskal_wallis, permutation_paired_test
from eegattn.tensor import Tensor
from eegattn.training import TrainConfig, cross_validate, predict_scores, score_predictions, train_one_fold

pytestmark = pytest.mark.slow


@pytest.fixture
def verdict(capsys):
    def report(number, title, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
        assert ok, f"criterion {number} failed: {detail}"

    return report


def _random_params(cfg, seed):
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    for t in params.tensors.values():
        t.data += 0.1 * rng.standard_normal(t.shape)
    return params


def test_1_gradient_integrity(verdict):
    t0 = time.perf_counter()
    reports = gradcheck.run_suite(range(20), tol=1e-4)
    elapsed = time.perf_counter() - t0
    worst = max(reports, key=lambda r: r.max_rel_error)
    ok = all(r.passed for r in reports) and elapsed < 120 and any(r.op_name == "model+loss" for r in reports)
    verdict(1, "gradient integrity", ok,
            f"{len(reports)} ops x 20 seeds, worst {worst.op_name} {worst.max_rel_error:.2e} < 1e-4, "
            f"{elapsed:.1f} s < 120 s")


def test_2_filter_correctness(verdict):
    f = design_butterworth_bandpass(5, 30.0, 120.0, 250.0)
    # expand the cascade and evaluate B(z)/A(z) on the unit circle
    b, a = np.array([1.0]), np.array([1.0])
    for s in f.sections:
        b, a = np.polymul(b, s[:3]), np.polymul(a, s[3:])
    z = np.exp(2j * np.pi * np.array([30.0, 120.0, 5.0]) / 250.0)
    g30, g120, g5 = np.abs(np.polyval(b, z) / np.polyval(a, z))
    radius = np.abs(np.roots(a)).max()
    ok = abs(g30 - 1 / math.sqrt(2)) <= 0.01 and abs(g120 - 1 / math.sqrt(2)) <= 0.01 and g5 < 1e-4 and radius < 1
    verdict(2, "filter correctness", ok,
            f"|H(30)|={g30:.6f}, |H(120)|={g120:.6f}, |H(5)|={g5:.2e}, max pole radius {radius:.4f}")


def test_3_attention_invariants(verdict):
    cfg = ModelConfig()
    rng = np.random.default_rng(0)
    params = _random_params(cfg, 0)
    x = rng.standard_normal((4, 1, cfg.n_channels, cfg.n_samples))
    _, traces = model_forward(Tensor(x), params, cfg)
    row_err = max(float(np.abs(w.sum(axis=-1) - 1).max()) for w in traces)

    no_pos = replace(cfg, use_positional_embeddings=False)
    params = _random_params(no_pos, 1)
    feats = rng.standard_normal((4, no_pos.pointwise_filters, 1, no_pos.pooled_len))
    base = classify_features(Tensor(feats), params, no_pos)[0].data
    perm_err = 0.0
    for _ in range(50):
        perm = rng.permutation(no_pos.pooled_len)
        moved = classify_features(Tensor(feats[..., perm]), params, no_pos)[0].data
        perm_err = max(perm_err, float(np.abs(moved - base).max()))
    ok = row_err <= 1e-9 and perm_err <= 1e-9
    verdict(3, "attention invariants", ok,
            f"max |row sum - 1| = {row_err:.1e}, max score change over 50 patch permutations = {perm_err:.1e}")


def test_4_single_batch_overfit(verdict):
    data = generate_synthetic(SynthSpec(snr_db=20, seed=4))
    idx = np.random.default_rng(4).choice(data.n_trials, 16, replace=False)
    batch = data.subset(idx)
    reached = []

    def check(epoch, params):
        acc, _ = score_predictions(predict_scores(params, batch), batch.labels, 13)
        if acc == 1.0:
            reached.append(epoch + 1)
        return bool(reached)

    _, history = train_one_fold(init_params(ModelConfig(), 4), batch, TrainConfig(epochs=200, batch_size=16, seed=4),
                                on_epoch=check)
    ok = bool(reached)
    detail = f"100% train accuracy after {reached[0]} epochs" if ok else f"not reached in 200 epochs"
    verdict(4, "capacity sanity", ok, f"{detail}, final loss {history[-1]:.4f}")


def test_5_end_to_end_decoding(verdict):
    t0 = time.perf_counter()
    high = cross_validate(generate_synthetic(SynthSpec(snr_db=20, seed=42)), ModelConfig(), TrainConfig(epochs=50))
    elapsed = time.perf_counter() - t0
    low = cross_validate(generate_synthetic(SynthSpec(snr_db=-10, seed=42)), ModelConfig(), TrainConfig(epochs=50))
    chance = 1 / 13
    ok = high.mean >= 0.90 and elapsed < 15 * 60 and abs(low.mean - chance) <= 0.10
    verdict(5, "end-to-end decoding", ok,
            f"snr 20 dB mean {high.mean:.4f} >= 0.90 in {elapsed / 60:.1f} min < 15 min; "
            f"snr -10 dB mean {low.mean:.4f} vs chance {chance:.4f}")


# Condition comparison: each "subject" is an independent synthetic dataset
# decoded by 5-fold CV with a reduced model. Two conditions differ only in SNR.
SUBJECT_SPEC = SynthSpec(n_channels=4, n_samples=256, trials_per_class=5)
SUBJECT_MODEL = ModelConfig(n_channels=4, n_samples=256, temporal_kernel_len=63, d_model=16, ffn_dim=32)
SUBJECT_TRAIN = TrainConfig(epochs=20)
STRONG_DB, WEAK_DB = 20.0, 5.0
N_SUBJECTS = 9


def _subject_doc(entries):
    return {"kind": "eegattn.cv_results",
            "subjects": [{"name": f"s{i}", "summary": {"mean_accuracy": m}} for i, m in enumerate(entries)]}


def _subject_accuracy(snr_db, seed):
    trials = generate_synthetic(replace(SUBJECT_SPEC, snr_db=snr_db, seed=seed))
    return cross_validate(trials, SUBJECT_MODEL, replace(SUBJECT_TRAIN, seed=seed)).mean


def test_6_condition_comparison(verdict):
    strong = [_subject_accuracy(STRONG_DB, 1000 + s) for s in range(N_SUBJECTS)]
    # 18 subjects from one condition; the first nine double as the weak condition
    pool = [_subject_accuracy(WEAK_DB, 2000 + s) for s in range(2 * N_SUBJECTS)]
    differ = compare_conditions(_subject_doc(strong), _subject_doc(pool[:N_SUBJECTS]), seed=0)
    kw_p, perm_p = differ["kruskal_wallis"]["p"], differ["permutation_t"]["p"]

    quiet_kw = quiet_perm = 0
    for rep in range(20):
        order = np.random.default_rng(rep).permutation(len(pool))
        a = [pool[i] for i in order[:N_SUBJECTS]]
        b = [pool[i] for i in order[N_SUBJECTS:]]
        same = compare_conditions(_subject_doc(a), _subject_doc(b), seed=rep)
        quiet_kw += same["kruskal_wallis"]["p"] > 0.05
        quiet_perm += same["permutation_t"]["p"] > 0.05
    ok = kw_p < 0.05 and perm_p < 0.05 and quiet_kw >= 18 and quiet_perm >= 18
    verdict(6, "condition comparison", ok,
            f"{STRONG_DB:g} dB vs {WEAK_DB:g} dB means {np.mean(strong):.3f} vs {np.mean(pool[:N_SUBJECTS]):.3f}, "
            f"KW p={kw_p:.2g}, permutation p={perm_p:.2g}; identical conditions p > 0.05 in "
            f"{quiet_kw}/20 (KW) and {quiet_perm}/20 (permutation)")


def test_7_statistics_correctness(verdict):
    h, _ = kruskal_wallis([[1, 2, 3], [4, 5, 6]])
    rng = np.random.default_rng(7)
    hits = sum(kruskal_wallis([rng.standard_normal(10) for _ in range(3)]).p < 0.05 for _ in range(1000))
    rate = hits / 1000
    gaps = []
    for n in (5, 8, 10):
        a = rng.normal(0.3, 0.1, n)
        b = a - rng.normal(0.05, 0.1, n)
        n_perm = 10_000
        exact = permutation_paired_test(a, b, exact=True).p
        mc = permutation_paired_test(a, b, n_perm=n_perm, seed=n).p
        gaps.append(abs(exact - mc) / (2 / math.sqrt(n_perm)))
    ok = abs(h - 3.857) <= 0.001 and abs(rate - 0.05) <= 0.02 and max(gaps) <= 1
    verdict(7, "statistics correctness", ok,
            f"H={h:.4f}, null false-positive rate {rate:.3f}, worst MC-vs-exact gap "
            f"{max(gaps):.2f} x 2/sqrt(n_perm)")


def _run_twice(tmp_path, name, argv, outputs):
    # same paths both times: output documents echo their input paths
    d = tmp_path / "run"
    d.mkdir(exist_ok=True)
    args = [a.format(d=d, base=tmp_path) for a in argv]
    digests = []
    for _ in range(2):
        assert cli.main(args) == 0, f"{name} exited nonzero"
        digests.append([(d / o).read_bytes() for o in outputs])
    return digests[0] == digests[1]


def test_8_reproducibility(tmp_path, verdict, monkeypatch):
    monkeypatch.setenv("OMP_NUM_THREADS", "1")
    small = generate_synthetic(SynthSpec(n_channels=4, n_samples=128, trials_per_class=4, seed=8))
    write_trialset(small, tmp_path / "small.eegt")
    (tmp_path / "run.json").write_text(json.dumps({
        "model": {"temporal_kernel_len": 31, "d_model": 8, "ffn_dim": 16}, "train": {"epochs": 2, "folds": 3}}))
    results = {
        "synth": _run_twice(tmp_path, "synth", ["synth", "--seed", "42", "--out", "{d}/d.eegt"], ["d.eegt"]),
        "synth --raw": _run_twice(tmp_path, "raw", ["synth", "--raw", "--seed", "42", "--duration-s", "20",
                                                     "--n-markers", "5", "--out", "{d}/r.eegr"], ["r.eegr"]),
        "preprocess": _run_twice(tmp_path, "preprocess", ["preprocess", "--in", "{d}/r.eegr",
                                                          "--out", "{d}/p.eegt"], ["p.eegt"]),
        "train": _run_twice(tmp_path, "train", ["train", "--data", "{base}/small.eegt", "--seed", "7",
                                                "--config", "{base}/run.json", "--out", "{d}/r.json",
                                                "--weights-dir", "{d}/w"], ["r.json", "w/small_fold0.eatw"]),
        "eval": _run_twice(tmp_path, "eval", ["eval", "--weights", "{d}/w/small_fold0.eatw",
                                              "--data", "{base}/small.eegt", "--out", "{d}/e.json"], ["e.json"]),
        "stats": _run_twice(tmp_path, "stats", ["stats", "--a", "{d}/r.json", "--b", "{d}/r.json",
                                                "--seed", "3", "--out", "{d}/s.json"], ["s.json"]),
        "gradcheck": _run_twice(tmp_path, "gradcheck", ["gradcheck", "--seeds", "1", "--out", "{d}/g.json"],
                                ["g.json"]),
    }
    default = generate_synthetic(SynthSpec(seed=42))
    write_trialset(default, tmp_path / "rt.eegt")
    back = read_trialset(tmp_path / "rt.eegt")
    round_trip = (back.data.tobytes() == default.data.tobytes() and back.labels.tolist() == default.labels.tolist()
                  and trialset_bytes(back) == (tmp_path / "rt.eegt").read_bytes())
    ok = all(results.values()) and round_trip
    differing = [k for k, v in results.items() if not v] or ["none"]
    verdict(8, "reproducibility", ok,
            f"{len(results)} seeded commands run twice, differing outputs: {', '.join(differing)}; "
            f"EEGT round-trip bit-exact: {round_trip}")
