"""Acceptance criteria, each printed as one PASS/FAIL line in the terminal summary.

Run alone with ``pytest tests/test_acceptance.py -v``; the end-to-end run
(criterion 6) takes about 11 minutes on one CPU core and is marked
``slow``. Criterion 1 needs real plant data and is skipped unless
``ICS_SWAT_DIR`` points at a directory with ``normal.csv``, ``attack.csv`` and
``labels.csv`` (id,start,end,tags,expected_detectable).
"""

import math
import os
import time
from datetime import timedelta
from pathlib import Path

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from test_decision import errors_from, oracle_ratings
from test_evaluation import ALERTS, EXPECTED_CLASS, LABELS, alert, names_of
from test_scoring import brute_force_distance

from ics_seq2seq import evaluation
from ics_seq2seq.dataset import WindowBatch, load_csv
from ics_seq2seq.decision import RatingConfig, StreamingRater, detect, extract_alerts, rate_series, rating_from
from ics_seq2seq.evaluation import AttackLabel, classify_alerts, deduplicate, match_alerts
from ics_seq2seq.scoring import pnorm_distance, score_series
from ics_seq2seq.seqmodel import ModelConfig, backward, forward_loss, init_params
from ics_seq2seq.simulator import AttackScript, ScriptedAttack, attack_labels, default_plant, inject, simulate
from ics_seq2seq.trainer import TrainConfig, run_trials, select_best, train_model


def report(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")


# -- 1. optional real-plant integration ------------------------------------


def test_criterion_1_real_plant_integration(tmp_path):
    root = os.environ.get("ICS_SWAT_DIR")
    if not root or not Path(root, "normal.csv").is_file():
        ACCEPTANCE_LINES.append("criterion 1: SKIP - ICS_SWAT_DIR not set (real plant data not available)")
        pytest.skip("ICS_SWAT_DIR not set")
    root = Path(root)
    time_format = os.environ.get("ICS_SWAT_TIME_FORMAT")
    epochs = int(os.environ.get("ICS_SWAT_EPOCHS", "1"))
    normal = load_csv(root / "normal.csv", time_format=time_format)
    attack = load_csv(root / "attack.csv", normal.schema, time_format=time_format)
    labels = evaluation.load_labels(root / "labels.csv")
    alerts = []
    for pid in normal.schema.processes:
        params, _ = train_model(normal, pid, TrainConfig(epochs=epochs, trials=1), ModelConfig(n_tags=1))
        alerts += detect(score_series(params, attack), RatingConfig())[1]
    rep = evaluation.evaluate(alerts, labels, normal.schema.processes)
    out = evaluation.render_report(rep, tmp_path)
    ok = len(out["attacks.csv"].splitlines()) == 1 + len(labels)
    report(1, ok, f"{len(normal.schema.processes)} processes, {len(alerts)} alerts, "
                  f"{rep.detected}/{rep.detectable} attacks detected ({epochs} epoch(s); no numeric target)")
    assert ok


# -- 2. gradient correctness ----------------------------------------------


def test_criterion_2_gradient_check():
    seed = 0
    cfg = ModelConfig(n_tags=3, hidden_dim=8, num_layers=2, dtype="float64", seed=seed)
    params = init_params(cfg)
    rng = np.random.default_rng(seed)
    batch = WindowBatch(rng.random((90, 2, 3)), rng.random((9, 2, 3)), rng.random((2, 3)))
    start = time.perf_counter()
    _, grads = backward(params, batch)
    analytic = grads.arrays()
    worst, count, failures = 0.0, 0, 0
    for name, a in params.arrays().items():
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + 1e-5
            lp, _ = forward_loss(params, batch)
            a[idx] = old - 1e-5
            lm, _ = forward_loss(params, batch)
            a[idx] = old
            num, ana = (lp - lm) / 2e-5, analytic[name][idx]
            scale = max(abs(num), abs(ana))
            rel = abs(num - ana) / scale if scale else 0.0
            worst = max(worst, rel)
            failures += rel > 1e-4
            count += 1
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 60
    report(2, ok, f"{count} components, max relative error {worst:.2e} (limit 1e-4), "
                  f"{failures} over limit, {elapsed:.1f} s (limit 60 s)")
    assert ok


# -- 3. scoring oracle ----------------------------------------------------


def test_criterion_3_scoring_oracle():
    rng = np.random.default_rng(2024)
    mismatches = order_violations = strict_violations = 0
    for _ in range(1000):
        n = int(rng.integers(1, 52))
        d = rng.normal(size=n) * 10.0 ** rng.uniform(-6, 3, size=n)
        D = pnorm_distance(d)
        mismatches += D != brute_force_distance(d.tolist())
        m = float(np.abs(d).max())
        # the final root is rounded once, so allow that rounding on the bounds
        order_violations += not (m <= D * (1 + 1e-12) and D <= n ** 0.25 * m * (1 + 1e-12))
        strict_violations += not (m <= D <= n ** 0.25 * m)
    ok = mismatches == 0 and order_violations == 0
    report(3, ok, f"1000 vectors: {mismatches} oracle mismatches; {order_violations} ordering violations "
                  f"({strict_violations} without rounding slack)")
    assert ok


# -- 4. decision oracle and scale invariance --------------------------------


def test_criterion_4_decision_oracle_and_scale():
    cfg = RatingConfig()
    oracle_bad = 0
    strict_diff = pow2_diff = alert_diff = 0
    max_dev = 0.0
    total = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        d = rng.gamma(2.0, 0.05, size=5000)
        start = int(rng.integers(500, 4000))
        d[start:start + 300] *= rng.uniform(3, 20)
        rater = StreamingRater(cfg)
        got = [(s.window_sum, s.high, s.low, s.rating) for s in map(rater.push, d) if s is not None]
        oracle_bad += got != oracle_ratings(d, cfg)
        base = rate_series(errors_from(d), cfg)
        base_alerts = [(a.start, a.end) for a in extract_alerts(base, cfg)]
        total += len(base.rating)
        for c in (10.0, 1e-3):
            scaled = rate_series(errors_from(d * c), cfg)
            strict_diff += int((scaled.rating != base.rating).sum())
            max_dev = max(max_dev, float(np.abs(scaled.rating - base.rating).max()))
            alert_diff += [(a.start, a.end) for a in extract_alerts(scaled, cfg)] != base_alerts
        for c in (8.0, 2.0 ** -10):
            pow2_diff += int((rate_series(errors_from(d * c), cfg).rating != base.rating).sum())
    ok = oracle_bad == 0 and strict_diff == 0
    report(4, ok, f"oracle: {10 - oracle_bad}/10 streams exact; x10/x0.001: {strict_diff} of {2 * total} "
                  f"ratings not bit-identical (max deviation {max_dev:.1e}, {alert_diff} alert lists changed); "
                  f"power-of-two scaling: {pow2_diff} differences")
    assert oracle_bad == 0 and pow2_diff == 0 and alert_diff == 0
    assert max_dev <= 4 * np.finfo(float).eps
    assert strict_diff == 0, "S under decimal rescaling is identical only to rounding"


# -- 5. rating spot values --------------------------------------------------


def test_criterion_5_rating_spot_values():
    L = 0.37
    s20, s3, s1000 = rating_from(20 * L, L, 20.0), rating_from(3 * L, L, 20.0), rating_from(1000 * L, L, 20.0)
    threshold = RatingConfig().alert_threshold
    ok = s20 == 1.0 and math.isclose(s3, 0.15, rel_tol=1e-12) and s3 < threshold and s1000 == 1.0
    report(5, ok, f"H=20L -> S={s20}; H=3L -> S={s3:.15g} (< {threshold}, no alert); H=1000L -> S={s1000}")
    assert ok


# -- 6. end-to-end synthetic run --------------------------------------------

# Declared before any evaluation: one attack of each family on every process.
SCENARIO = AttackScript([
    ScriptedAttack(1500, 300, "sensor-spoof-constant", "LIT-101", 950.0),
    ScriptedAttack(4000, 300, "sensor-offset", "FIT-201", 3.0),
    ScriptedAttack(6500, 400, "sensor-offset", "AIT-201", 30.0),
    ScriptedAttack(9000, 300, "sensor-offset", "LIT-201", -300.0),
    ScriptedAttack(11500, 400, "actuator-force-close", "P-101"),
    ScriptedAttack(14000, 400, "actuator-force-open", "MV-301"),
    ScriptedAttack(16500, 300, "sensor-spoof-constant", "FIT-301", 3.0),
    ScriptedAttack(19000, 600, "sensor-freeze", "LIT-301"),
])
TRAIN_SEED, TEST_SEED = 0, 7


@pytest.mark.slow
def test_criterion_6_end_to_end_synthetic():
    start = time.perf_counter()
    train = simulate(default_plant(TRAIN_SEED), 20000)
    spec = default_plant(TEST_SEED)
    test = inject(simulate(spec, 21000), SCENARIO, spec)
    labels = attack_labels(SCENARIO, test)
    alerts, ratios = [], []
    for pid in train.schema.processes:
        params, hist = train_model(train, pid, TrainConfig(epochs=30, batch_size=256, trials=1),
                                   ModelConfig(n_tags=1, hidden_dim=32, num_layers=1))
        ratios.append(hist[-1] / hist[0])
        alerts += detect(score_series(params, test), RatingConfig())[1]
    rep = evaluation.evaluate(alerts, labels, train.schema.processes)
    elapsed = time.perf_counter() - start
    tfp = rep.count(evaluation.TFP)
    first = rep.attribution.first
    ok = rep.detected >= 6 and tfp <= 2 and first >= 4 and elapsed < 30 * 60
    report(6, ok, f"{rep.detected}/8 detected (need 6), {tfp} TFP (max 2), {first} first-rank tags (need 4), "
                  f"{elapsed / 60:.1f} min (limit 30); loss ratios {', '.join(f'{r:.3f}' for r in ratios)}")
    print(evaluation.format_text(rep))
    assert ok


# -- 7. training sanity -------------------------------------------------------


def test_criterion_7_training_sanity():
    series = simulate(default_plant(TRAIN_SEED), 6000)
    _, hist = train_model(series, 1, TrainConfig(epochs=10, batch_size=128, trials=1),
                          ModelConfig(n_tags=1, hidden_dim=16, num_layers=1))
    ratio = hist[-1] / hist[0]
    small = simulate(default_plant(TRAIN_SEED), 800)
    cfg = TrainConfig(epochs=2, batch_size=64, trials=2, seed=3)
    model = ModelConfig(n_tags=1, hidden_dim=6, num_layers=1)
    first, second = run_trials(small, 2, cfg, model), run_trials(small, 2, cfg, model)
    finals = [r.final_loss for r in first]
    chosen, again = select_best(first), select_best(second)
    argmin_ok = chosen.final_loss == min(finals) and chosen.seed == cfg.seed + int(np.argmin(finals))
    same = chosen.seed == again.seed and all(
        np.array_equal(a, again.params.arrays()[k]) for k, a in chosen.params.arrays().items())
    ok = ratio < 0.1 and argmin_ok and same
    report(7, ok, f"final/first loss {ratio:.4f} (limit 0.1); best-of-2 picks seed {chosen.seed} "
                  f"(final losses {finals[0]:.5f}, {finals[1]:.5f}); repeat identical: {same}")
    assert ok


# -- 8. evaluation protocol --------------------------------------------------


def test_criterion_8_evaluation_protocol():
    label = AttackLabel(1, LABELS[0].start, LABELS[0].end, ["LIT-101"])

    def detected_at(minutes):
        a = alert(1, label.end + timedelta(minutes=minutes), label.end + timedelta(minutes=minutes + 2))
        return match_alerts([a], [label])[0].is_detected

    boundary_ok = detected_at(14) and detected_at(15) and not detected_at(16)
    classified = classify_alerts(list(ALERTS.values()), LABELS)
    table_ok = {names_of([c.alert])[0]: (c.kind, c.attack_id) for c in classified} == EXPECTED_CLASS
    incidents = deduplicate(classified)
    kinds = [c.kind for c in classified]
    conserved = sum(len(i.alerts) for i in incidents) == len(ALERTS) == len(kinds)
    counts = {k: kinds.count(k) for k in (evaluation.TP, evaluation.OP, evaluation.LT, evaluation.TFP)}
    ok = boundary_ok and table_ok and conserved
    report(8, ok, f"grace boundary (+14 yes, +15 yes, +16 no): {boundary_ok}; classification table match: "
                  f"{table_ok}; {len(ALERTS)} alerts = {' + '.join(f'{v} {k}' for k, v in counts.items())}")
    assert ok
