"""Acceptance suite: one PASS/FAIL line per criterion, collected in the terminal summary."""
import random
import time

import numpy as np
import pytest

from mothtrap.data import synthetic_benchmark, synthetic_scene
from mothtrap.detection import RoiCandidate, count_labels, detect, iou, match_planted, nms
from mothtrap.energy import (
    RECHARGE_TABLE, Battery, consistency_check, cycle_energy, daylight_schedule, load_energy_config,
    lifetime_cycles, recharge_time, simulate_soc,
)
from mothtrap.graph import forward
from mothtrap.optimize import fold_batchnorm, fuse_constants, prune_magnitude, sparsity, strip_training_layers
from mothtrap.telemetry import (
    PAYLOAD_SIZE, IntegrityError, TrapReport, alert_rule, decode, encode,
)
from mothtrap.training import accuracy, f_measure, grad_check, train_sgd
from mothtrap.zoo import build_lenet5, build_mobilenetv2

CFG = load_energy_config()


@pytest.fixture(scope="module")
def benchmark():
    return synthetic_benchmark(2000, 500, seed=0)


@pytest.fixture(scope="module")
def trained_lenet(benchmark):
    t0 = time.perf_counter()
    model, history = train_sgd(build_lenet5(seed=0), benchmark)
    return model, history, time.perf_counter() - t0


def test_c01_cycle_energy_totals(verdict):
    worst = max(abs(cycle_energy(p) - p.published_total) for p in CFG.profiles.values())
    ok = len(CFG.profiles) == 12 and worst <= 0.15
    ok &= round(cycle_energy(CFG.profile("rpi3-lenet")), 1) == 123.2
    ok &= round(cycle_energy(CFG.profile("rpi4-mobilenetv2")), 1) == 200.1
    verdict(1, ok, f"12 profiles, max |total - published| = {worst:.3f} J (tol 0.15)")


def test_c02_f_scores(verdict):
    table = [((99.6, 94.9), 97.2), ((99.6, 97.4), 98.5), ((95.6, 97.2), 96.4)]
    errs = [abs(f_measure(p, r) - f) for (p, r), f in table]
    verdict(2, max(errs) < 0.05, f"F-scores {[round(f_measure(p, r), 2) for (p, r), _ in table]}, "
                                 f"max err {max(errs):.3f} (tol 0.05)")


def test_c03_battery_lifetime(verdict):
    worst = max(CFG.profiles.values(), key=cycle_energy)
    best = min(CFG.profiles.values(), key=cycle_energy)
    lw, lb = lifetime_cycles(Battery(), worst), lifetime_cycles(Battery(), best)
    ok = abs(lw.cycles - 121) <= 2 and abs(lb.cycles - 196) <= 2
    verdict(3, ok, f"worst {worst.name}: {lw.cycles} cycles ({lw.days:g} d), "
                   f"best {best.name}: {lb.cycles} cycles ({lb.days:g} d)")


def test_c04_recharge_table(verdict):
    b, prof, panel = Battery(), CFG.profile("rpi3-lenet"), CFG.panel
    errs = []
    for lux, (t_full, t_cycle) in RECHARGE_TABLE.items():
        errs.append(abs(recharge_time(b.recharge_energy(), panel, lux) - t_full) / t_full)
        errs.append(abs(recharge_time(cycle_energy(prof), panel, lux) - t_cycle) / t_cycle)
    gaps = [r.gap for r in consistency_check(panel, b, prof)]
    ok = len(errs) == 6 and max(errs) <= 0.10 and max(gaps) <= 0.15
    verdict(4, ok, f"max cell error {100 * max(errs):.1f}% (tol 10%), "
                   f"consistency gaps {[round(100 * g, 1) for g in gaps]}% (tol 15%)")


def test_c05_soc_at_7000_lux(verdict):
    t0 = time.perf_counter()
    tr = simulate_soc(Battery(state_of_charge=0.5), CFG.profile("rpi3-lenet"), CFG.panel,
                      daylight_schedule(7000, hours=12), days=3)
    dt = time.perf_counter() - t0
    ok = tr.soc[-1] >= tr.soc[0] and not tr.depleted and dt < 1.0
    verdict(5, ok, f"SoC {tr.soc[0]:.3f} -> {tr.soc[-1]:.3f} over 3 days, {dt:.2f} s")


def test_c06_lenet_synthetic_accuracy(verdict, trained_lenet, benchmark):
    model, history, dt = trained_lenet
    acc = accuracy(model, benchmark.test)
    last = history[-1]
    stopped_right = last.val_acc >= 0.995 or len(history) == 100
    early_ok = all(r.val_acc < 0.995 for r in history[:-1])
    ok = acc >= 0.95 and len(history) <= 100 and stopped_right and early_ok and dt < 600
    verdict(6, ok, f"test accuracy {acc:.4f} (min 0.95) after {len(history)} epochs, {dt:.0f} s")


def test_c07_grad_check(verdict, benchmark):
    t0 = time.perf_counter()
    err = grad_check(build_lenet5(seed=0), benchmark.train[0], n_params=200)
    dt = time.perf_counter() - t0
    verdict(7, err < 1e-3 and dt < 60, f"max relative error {err:.2e} over 200 parameters (tol 1e-3), {dt:.1f} s")


def test_c08_graph_optimization(verdict, trained_lenet, benchmark):
    t0 = time.perf_counter()
    small = synthetic_benchmark(256, 64, seed=5)
    mnv2, _ = train_sgd(build_mobilenetv2(seed=0), small, epochs=2, early_stop_acc=None, seed=0)
    opt, _ = fold_batchnorm(mnv2)
    opt, _ = strip_training_layers(opt)
    opt, _ = fuse_constants(opt)
    x = np.random.default_rng(0).random((100, *mnv2.input_shape)).astype(np.float32)
    diff = float(np.max(np.abs(forward(mnv2, x) - forward(opt, x))))

    lenet = trained_lenet[0]
    pruned, _ = prune_magnitude(lenet, 0.5)
    drop = 100 * (accuracy(lenet, benchmark.test) - accuracy(pruned, benchmark.test))
    sp = sparsity(pruned)
    dt = time.perf_counter() - t0
    ok = diff < 1e-4 and sp >= 0.5 and drop <= 2.0 and dt < 120
    verdict(8, ok, f"MobileNetV2 optimized max diff {diff:.1e} (tol 1e-4), {len(mnv2.layers)} -> "
                   f"{len(opt.layers)} layers; prune sparsity {sp:.3f}, accuracy drop {drop:.1f} pts, {dt:.0f} s")


def _random_candidates(rng):
    n = rng.integers(0, 40)
    return [RoiCandidate(13 * int(rng.integers(0, 20)), 13 * int(rng.integers(0, 20)), 52,
                         float(rng.choice([rng.random(), 0.5, 1.0]))) for _ in range(n)]


def _nms_properties_hold(cands) -> bool:
    kept = nms(cands)
    if nms(kept) != kept:
        return False
    for i, a in enumerate(kept):
        if any(iou(a, b) > 0.3 for b in kept[i + 1:]):
            return False
    return all(any(iou(c, k) > 0.3 and k.probability >= c.probability for k in kept)
               for c in cands if c not in kept)


def test_c09_pipeline_properties(verdict, trained_lenet):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    nms_ok = all(_nms_properties_hold(_random_candidates(rng)) for _ in range(1000))

    model = trained_lenet[0]
    found = total = 0
    monotone = True
    for seed in range(20):
        img, planted = synthetic_scene(seed=seed)
        dets, _ = detect(img, model)
        found += match_planted(dets, planted)
        total += sum(p.label == "codling_moth" for p in planted)
        if seed < 5:
            counts = [count_labels(detect(img, model, threshold=t)[0])[0] for t in (0.2, 0.5, 0.8, 0.95)]
            monotone &= all(a >= b for a, b in zip(counts, counts[1:]))
    recall = found / total
    dt = time.perf_counter() - t0
    ok = nms_ok and recall >= 0.9 and monotone and dt < 300
    verdict(9, ok, f"NMS laws on 1000 sets: {nms_ok}; recall {found}/{total} = {recall:.2f} (min 0.90); "
                   f"threshold monotone: {monotone}; {dt:.0f} s")


def _brute_alert(history, window=7 * 24 * 60, threshold=2):
    for j, (tj, _) in enumerate(history):
        if sum(n for ti, n in history[:j + 1] if tj - ti < window) >= threshold:
            return True
    return False


def _random_report(r: random.Random) -> TrapReport:
    return TrapReport(r.randrange(1 << 16), r.randrange(1 << 32), r.randrange(256), r.randrange(256),
                      r.randrange(101), r.random() < 0.5)


def test_c10_telemetry(verdict):
    t0 = time.perf_counter()
    r = random.Random(10)
    reports = [_random_report(r) for _ in range(10_000)]
    roundtrip = all(decode(encode(x)) == x for x in reports)
    lengths = {len(encode(x)) for x in reports} == {PAYLOAD_SIZE}

    detected = tried = 0
    for rep in reports[:10]:
        p = encode(rep)
        for pos in range(PAYLOAD_SIZE):
            for delta in range(1, 256):
                bad = bytearray(p)
                bad[pos] ^= delta
                tried += 1
                try:
                    decode(bytes(bad))
                except IntegrityError:
                    detected += 1

    agree = 0
    for _ in range(1000):
        n = r.randrange(0, 12)
        hist = sorted((r.randrange(0, 40 * 24 * 60), r.choice([0, 0, 1, 1, 2])) for _ in range(n))
        agree += alert_rule(hist) == _brute_alert(hist)
    dt = time.perf_counter() - t0
    ok = roundtrip and lengths and detected == tried and agree == 1000 and dt < 60
    verdict(10, ok, f"10000 round trips: {roundtrip}; length 11: {lengths}; corruption detected "
                    f"{detected}/{tried}; alert oracle agreement {agree}/1000; {dt:.1f} s")
