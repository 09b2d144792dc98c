"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict in ``RESULTS``; ``conftest.py`` prints
them in the terminal summary so a plain ``pytest`` run shows every line.
"""

import math
import time

import numpy as np
import pytest

from audiocl import cli, oracles
from audiocl.augment import apply_reverb, pitch_shift, synth_rir
from audiocl.autograd import no_grad
from audiocl.losses import LambdaSchedule, combined_loss, js_divergence, lambda_at
from audiocl.nn import AdamW, ModelConfig, build_model
from audiocl.signal import Waveform, hann, stft
from audiocl.trainer import (
    Experiment,
    RunConfig,
    lr_at,
    model_config_for,
    paper_config,
    train_fold,
    train_steps,
)

RESULTS: dict[int, str] = {}


def record(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def desk_experiment():
    return Experiment.from_config(RunConfig())


def test_criterion_1_jsd_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_oracle = worst_perm = worst_zero = 0.0
    lo, hi = math.inf, -math.inf
    for k in (2, 50):
        p = rng.dirichlet(np.full(k, 0.5), size=(5000, 3))
        # a sprinkling of exact zeros and one-hots exercises the clamp
        p[:200, 0] = np.eye(k)[rng.integers(0, k, 200)]
        fast = js_divergence(p[:, 0], p[:, 1], p[:, 2], reduction="none").data
        ref = np.array([oracles.jsd_bruteforce(*row) for row in p])
        worst_oracle = max(worst_oracle, float(np.max(np.abs(fast - ref))))
        lo, hi = min(lo, fast.min()), max(hi, fast.max())
        for perm in ((1, 0, 2), (2, 1, 0), (0, 2, 1), (1, 2, 0), (2, 0, 1)):
            other = js_divergence(p[:, perm[0]], p[:, perm[1]], p[:, perm[2]], reduction="none").data
            worst_perm = max(worst_perm, float(np.max(np.abs(fast - other))))
        same = js_divergence(p[:, 0], p[:, 0], p[:, 0], reduction="none").data
        worst_zero = max(worst_zero, float(np.max(np.abs(same))))
    elapsed = time.perf_counter() - t0
    ok = (worst_oracle <= 1e-12 and worst_perm <= 1e-12 and worst_zero <= 1e-12
          and lo >= -1e-12 and hi <= math.log(3) + 1e-12 and elapsed < 10)
    record(1, "JSD exactness", ok,
           f"10^4 triples, |fast-bruteforce| {worst_oracle:.1e}, permutation {worst_perm:.1e}, "
           f"identical {worst_zero:.1e}, range [{lo:.3g}, {hi:.4f}], {elapsed:.1f} s")


def test_criterion_2_gradients_match_finite_differences():
    t0 = time.perf_counter()
    worst, n_params = 0.0, 0
    for seed in range(10):
        # full desk-scale architecture on a small 8x8 input keeps finite differences cheap
        model = build_model(ModelConfig(n_mels=8, n_classes=4, seed=seed))
        n_params = model.n_parameters()
        rng = np.random.default_rng(100 + seed)
        x = rng.standard_normal((6, 1, 8, 8))
        y = rng.integers(0, 4, 2)

        def loss():
            p = model(x)
            return combined_loss(p[:2], p[2:4], p[4:], y, 5.0)

        model.zero_grad()
        loss().backward()
        for p in model.parameters():
            with no_grad():
                numeric = oracles.central_difference(lambda: loss().item(), p.data, kink_rtol=1e-3)
            worst = max(worst, float(np.max(oracles.grad_mismatch(p.grad, numeric))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-3 and n_params <= 5000 and elapsed < 120
    record(2, "gradients vs finite differences", ok,
           f"{n_params} parameters, 10 seeds, worst relative error {worst:.2e}, {elapsed:.1f} s")


def test_criterion_3_dsp_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    x = rng.standard_normal(4096)
    fast = stft(x, 1024, 600).bins
    slow = oracles.naive_stft(x, 1024, 600)
    stft_err = float(np.max(np.abs(fast - slow)) / np.max(np.abs(slow)))

    sig, h = rng.standard_normal(2000), rng.standard_normal(300)
    ref = oracles.naive_convolve(sig, h)[:2000]
    ref *= np.max(np.abs(sig)) / np.max(np.abs(ref))
    got = apply_reverb(Waveform(sig, 22050), Waveform(h, 22050)).samples
    conv_err = float(np.max(np.abs(got - ref)) / np.max(np.abs(ref)))

    sr, n = 22050, 2048
    t = np.arange(sr) / sr
    shifted = pitch_shift(Waveform(0.5 * np.sin(2 * np.pi * 440 * t), sr), 2.0).samples
    seg = shifted[4000:4000 + n] * hann(n)
    peak = np.argmax(np.abs(oracles.naive_dft(seg))[: n // 2 + 1]) * sr / n
    bin_hz = sr / n
    pitch_ok = abs(peak - 493.9) <= bin_hz

    rt_errs = []
    for target in (200, 600, 1000):
        est = oracles.schroeder_rt60(synth_rir(target, sr, np.random.default_rng(target)).samples, sr) * 1000
        rt_errs.append(abs(est - target) / target)
    elapsed = time.perf_counter() - t0
    ok = stft_err <= 1e-6 and conv_err <= 1e-6 and pitch_ok and max(rt_errs) <= 0.15 and elapsed < 60
    record(3, "DSP oracles", ok,
           f"STFT {stft_err:.1e}, reverb {conv_err:.1e}, +2 st peak {peak:.1f} Hz (bin {bin_hz:.1f} Hz), "
           f"RT60 errors {', '.join(f'{e:.1%}' for e in rt_errs)}, {elapsed:.1f} s")


def test_criterion_4_schedule_and_batching():
    sched = LambdaSchedule(ramp_epochs=10, lambda_max=5.0)
    cfg = paper_config()
    n_orig = cfg.batch_size
    n_total = cfg.batch_elements()
    lr2 = lr_at(cfg.lr, 2, cfg.lr_decay, cfg.lr_decay_every)
    ok = (lambda_at(sched, 0) == 0.0 and lambda_at(sched, 10) == 5.0 and n_total == 120 and n_orig == 40
          and n_total - n_orig == 80 and math.isclose(lr2, 4.5e-4, rel_tol=1e-12))
    record(4, "schedule and batching", ok,
           f"lambda(0)={lambda_at(sched, 0)}, lambda(10)={lambda_at(sched, 10)}, batch {n_total} = "
           f"{n_orig} originals + {n_total - n_orig} transforms, lr(2)={lr2:.6g}")


def test_criterion_5_cl_without_consistency_equals_bda(desk_experiment):
    t0 = time.perf_counter()
    train_idx = desk_experiment.dataset.split(0)[0]
    traj = {}
    for regime, lam in (("bda", 5.0), ("cl", 0.0)):
        cfg = RunConfig(regime=regime, lambda_max=lam, epochs=5, track_jsd=False, seed=7)
        model = build_model(model_config_for(cfg, 0))
        opt = AdamW(model.parameters(), weight_decay=cfg.weight_decay)
        snaps = []
        for epoch in range(cfg.epochs):
            loss = train_steps(model, opt, desk_experiment, train_idx, cfg, epoch)
            snaps.append((loss, [p.data.copy() for p in model.parameters()]))
        traj[regime] = snaps
    identical = all(
        la == lb and all(np.array_equal(a, b) for a, b in zip(pa, pb))
        for (la, pa), (lb, pb) in zip(traj["bda"], traj["cl"])
    )
    moved = not all(np.array_equal(a, b) for a, b in zip(traj["bda"][0][1], traj["bda"][-1][1]))
    record(5, "cl with lambda_max=0 equals bda", identical and moved,
           f"5 epochs, parameters bit-identical after every epoch: {identical}, "
           f"{time.perf_counter() - t0:.1f} s")


def test_criterion_6_jsd_ordering(desk_experiment):
    final, times = {}, {}
    for regime in ("none", "bda", "cl"):
        cfg = RunConfig(regime=regime, epochs=20)
        t0 = time.perf_counter()
        result = train_fold(desk_experiment, cfg, 0)
        times[regime] = time.perf_counter() - t0
        final[regime] = result.metrics[-1].train_jsd
    ok = (final["cl"] < 0.5 * final["none"] and final["bda"] <= final["none"]
          and max(times.values()) < 300)
    record(6, "train JSD ordering", ok,
           ", ".join(f"{r} {final[r]:.4f} ({times[r]:.0f} s)" for r in final)
           + f"; cl/none = {final['cl'] / final['none']:.3f}")


def test_criterion_7_cl_accuracy_not_below_baseline(desk_experiment):
    accs = {"none": [], "cl": []}
    t0 = time.perf_counter()
    for seed in range(5):
        for regime in accs:
            cfg = RunConfig(regime=regime, policy="combination", epochs=8, seed=seed, track_jsd=False)
            accs[regime].append(train_fold(desk_experiment, cfg, seed % 5).accuracy)
    mean = {r: float(np.mean(v)) for r, v in accs.items()}
    record(7, "cl accuracy vs no augmentation", mean["cl"] >= mean["none"],
           f"5 seeds, mean cl {mean['cl']:.2f}% vs none {mean['none']:.2f}% "
           f"(improvement {mean['cl'] - mean['none']:+.2f}), {time.perf_counter() - t0:.0f} s")


def test_criterion_8_cli_determinism(tmp_path, capsys):
    args = ["train", "--config", "combination-cl", "--override", "epochs=2", "--fold", "0", "--seed", "11"]
    for name in ("a", "b"):
        assert cli.main(args + ["--out", str(tmp_path / name)]) == 0
    capsys.readouterr()
    a = (tmp_path / "a" / "fold0" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "fold0" / "metrics.csv").read_bytes()
    record(8, "CLI determinism", a == b and len(a) > 0,
           f"two train invocations, metrics CSVs byte-identical: {a == b} ({len(a)} bytes)")
