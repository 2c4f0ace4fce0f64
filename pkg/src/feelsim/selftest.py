"""Built-in numerical checks, runnable offline via `feelsim selftest`.

Each check recomputes an expected answer through an independent route (dense
grids, finite differences, closed forms, Monte Carlo) and compares it with
what the library produces.  These are reduced-size mirrors of the test suite,
meant as a quick field diagnostic; the full suite lives in tests/.
"""
from __future__ import annotations

import math
import tempfile

import numpy as np

from .channel import beam_and_gain, sample_channel, uplink_rate
from .io_cli import ExperimentConfig, run_from_config
from .learning import (
    LabeledDataset,
    evaluate,
    filter_samples,
    init_model,
    loss_and_gradient,
    sgd_epoch,
)
from .numerics import Interval, golden_section_min, lambert_w0, rayleigh_quotient
from .resource_optimizer import (
    DeviceBounds,
    Workload,
    effective_cycles,
    computation_energy,
    minimize_round_energy,
    required_power,
    upload_energy,
    upload_time_bounds,
)

_LN2 = math.log(2.0)


def _check_lambert_identity() -> str:
    xs = np.concatenate([
        np.linspace(-1.0 / math.e + 1e-9, 1.0, 1000),
        np.logspace(0.0, 6.0, 1000),
    ])
    worst = 0.0
    for x in xs:
        w = lambert_w0(float(x))
        worst = max(worst, abs(w * math.exp(w) - x) / max(1.0, abs(x)))
    assert worst <= 1e-10, f"identity residual {worst:.3e} exceeds 1e-10"
    w1 = lambert_w0(1.0)
    assert abs(w1 - 0.5671432904097838) <= 1e-12, f"W(1) = {w1!r}"
    return f"max residual {worst:.2e}"


def _check_golden_section() -> str:
    x, fx = golden_section_min(lambda t: (t - 2.0) ** 2, Interval(0.0, 5.0), tol=1e-8)
    assert abs(x - 2.0) <= 1e-6, f"quadratic argmin {x}"
    rng = np.random.default_rng(7)
    grid = np.linspace(0.0, 1.0, 100_001)
    for _ in range(100):
        # convex quartic (a, c >= 0) plus a tilt: unimodal on any interval
        a = rng.uniform(0.5, 3.0)
        b = rng.uniform(-0.5, 1.5)
        c = rng.uniform(0.0, 2.0)
        d = rng.uniform(-1.0, 1.0)

        def f(t, a=a, b=b, c=c, d=d):
            return a * (t - b) ** 4 + c * (t - b) ** 2 + d * t

        xg, _ = golden_section_min(f, Interval(0.0, 1.0), tol=1e-10)
        k = int(np.argmin(f(grid)))
        assert abs(xg - grid[k]) <= 1e-5, f"quartic argmin off by {abs(xg - grid[k]):.2e}"
    return "quadratic exact, 100 random quartics vs grid"


def _check_cycle_pricing() -> str:
    w1 = Workload(600, 0, 5, 20.0, 13568)
    w2 = Workload(600, 600, 5, 20.0, 13568)
    w3 = Workload(1000, 400, 3, 20.0, 13568)
    assert effective_cycles(w1) == 60000.0
    assert effective_cycles(w2) == 12000.0
    assert effective_cycles(w3) == 44000.0
    e1 = computation_energy(w3, 2e9, 2e-28)
    assert abs(e1 - 1.76e-5) <= 1e-20, f"compute energy {e1!r}"
    e2 = computation_energy(Workload(1000, 0, 1, 20.0, 13568), 1e9, 2e-28)
    assert abs(e2 - 2e-6) <= 1e-21, f"single-epoch energy {e2!r}"
    return "frozen workload examples hold"


def _check_power_rate_inverse() -> str:
    p = required_power(1_000_000, 0.5, 2e6, 1e8)
    assert abs(p - 0.02) <= 1e-12, f"required power {p!r}"
    e = upload_energy(1_000_000, 0.5, 2e6, 1e8)
    assert abs(e - 0.01) <= 1e-12, f"upload energy {e!r}"
    rng = np.random.default_rng(11)
    for _ in range(200):
        bw = 10 ** rng.uniform(4, 7)
        beta = 10 ** rng.uniform(3, 9)
        bits = int(rng.integers(10_000, 2_000_000))
        t = 10 ** rng.uniform(-3, 1)
        p = required_power(bits, t, bw, beta)
        if not math.isfinite(p):
            continue
        t_back = bits / uplink_rate(bw, beta, p)
        assert abs(t_back - t) <= 1e-9 * t, f"round trip off by {abs(t_back - t) / t:.2e}"
    return "closed-form example + 200 random round trips"


def _check_upload_window() -> str:
    win = upload_time_bounds(6e4, 0.1, DeviceBounds(1e9, 9e9, 1e-4, 0.1, 2e-28))
    assert abs(win.lo - 0.09994) <= 1e-12, f"window lo {win.lo!r}"
    assert abs(win.hi - (0.1 - 6e4 / 9e9)) <= 1e-15, f"window hi {win.hi!r}"
    return f"[{win.lo:.6f}, {win.hi:.8f}]"


def _check_bandwidth_lambert() -> str:
    from .resource_optimizer import optimal_bandwidth

    # pi = 2 instance: bits ln2 / (t p beta) = 2 with t = 1, p beta = bits ln2 / 2
    bits = 1_000_000
    beta = bits * _LN2 / 2.0 / 0.1
    bw = optimal_bandwidth(bits, 1.0, 0.1, beta)
    assert abs(bw - 4.3495e5) <= 1e1, f"bandwidth {bw!r}"
    w0 = lambert_w0(-2.0 * math.exp(-2.0))
    assert abs(w0 - (-0.40637)) <= 1e-5, f"W0(-2e^-2) = {w0!r}"
    return f"pi=2 bandwidth {bw:.1f} Hz"


def _draw_plan_case(rng: np.random.Generator):
    bounds = DeviceBounds(1e9, 9e9, 1e-4, 0.1, 2e-28)
    size = int(rng.integers(200, 2001))
    kappa = int(rng.integers(0, size + 1))
    w = Workload(size, kappa, 5, 20.0, 13568)
    rho = effective_cycles(w)
    beta = 10 ** rng.uniform(4, 8)
    bw = 10 ** rng.uniform(5.5, 6.5)
    t_fast = rho / bounds.f_max_hz
    t_need = w.model_bits / uplink_rate(bw, beta, bounds.p_max_w)
    deadline = t_fast * rng.uniform(1.05, 3.0) + t_need * rng.uniform(1.05, 5.0)
    if required_power(w.model_bits, deadline - t_fast, bw, beta) > bounds.p_max_w:
        return None
    return w, deadline, bw, beta, bounds


def _grid_energy(ts: np.ndarray, w: Workload, deadline: float, bw: float, beta: float,
                 bounds: DeviceBounds) -> np.ndarray:
    rho = w.cycles_per_sample * (w.epochs * w.dataset_size - w.excluded_count * (w.epochs - 1))
    f = rho / (deadline - ts)
    e_cmp = 0.5 * bounds.capacitance * f * f * rho
    with np.errstate(over="ignore"):
        p_req = bw * np.expm1(w.model_bits * _LN2 / (ts * bw)) / beta
    e = e_cmp + ts * np.maximum(p_req, bounds.p_min_w)
    return np.where(p_req > bounds.p_max_w, np.inf, e)


def _check_optimizer_vs_grid() -> str:
    rng = np.random.default_rng(23)
    done = 0
    while done < 20:
        case = _draw_plan_case(rng)
        if case is None:
            continue
        w, deadline, bw, beta, bounds = case
        plan = minimize_round_energy(w, deadline, bw, beta, bounds)
        win = upload_time_bounds(effective_cycles(w), deadline, bounds)
        ts = np.linspace(win.lo, win.hi, 100_001)
        es = _grid_energy(ts, w, deadline, bw, beta, bounds)
        k = int(np.argmin(es))
        assert abs(plan.t_up_s - ts[k]) <= max(1e-3 * ts[k], 2 * (win.width / 100_000)), (
            f"t_up {plan.t_up_s} vs grid {ts[k]}"
        )
        assert plan.total_energy_j <= es[k] * (1.0 + 1e-9), (
            f"energy {plan.total_energy_j} above grid min {es[k]}"
        )
        done += 1
    return "20 random plans at or below a 1e5-point grid minimum"


def _check_kappa_saves_energy() -> str:
    rng = np.random.default_rng(31)
    done = 0
    while done < 200:
        case = _draw_plan_case(rng)
        if case is None:
            continue
        w, deadline, bw, beta, bounds = case
        if w.excluded_count == 0:
            continue
        base = Workload(w.dataset_size, 0, w.epochs, w.cycles_per_sample, w.model_bits)
        e_f = minimize_round_energy(w, deadline, bw, beta, bounds).total_energy_j
        e_0 = minimize_round_energy(base, deadline, bw, beta, bounds).total_energy_j
        assert e_f <= e_0 * (1.0 + 1e-9), f"filtered plan costs more: {e_f} > {e_0}"
        done += 1
    return "filtered workload never plans above the unfiltered one (200 cases)"


def _check_beam_dominance() -> str:
    rng = np.random.default_rng(43)
    for _ in range(50):
        m = 4
        target = sample_channel(rng, rng.uniform(25, 100), 3.2, 8.0, m)
        n_int = int(rng.integers(0, 4))
        intf = [sample_channel(rng, rng.uniform(25, 100), 3.2, 8.0, m) for _ in range(n_int)]
        noise = 1e-8
        beam = beam_and_gain(target, intf, noise)
        a = noise * np.eye(m, dtype=np.complex128)
        for h in intf:
            a += np.outer(h, h.conj())
        probes = rng.standard_normal((2000, m)) + 1j * rng.standard_normal((2000, m))
        best = 0.0
        for v in probes:
            best = max(best, rayleigh_quotient(target, a, v / np.linalg.norm(v)))
        mrc = rayleigh_quotient(target, a, target / np.linalg.norm(target))
        # With no interferers the matched direction is already optimal, so the
        # two values tie up to rounding; allow the same slack either way.
        slack = 1.0 + 1e-9
        assert beam.beta * slack >= best, f"random probe beat the beam: {best} > {beam.beta}"
        assert beam.beta * slack >= mrc, f"matched combining beat the beam: {mrc} > {beam.beta}"
    return "beats 2000 random probes and matched combining on 50 instances"


def _check_channel_statistics() -> str:
    rng = np.random.default_rng(53)
    d, m = 40.0, 4
    n = 20_000
    total = 0.0
    for _ in range(n):
        h = sample_channel(rng, d, 3.2, 8.0, m)
        total += float(np.vdot(h, h).real)
    mean_power = total / (n * m)
    expect = d ** (-3.2)
    assert abs(mean_power - expect) <= 0.03 * expect, (
        f"mean antenna power {mean_power:.3e} vs {expect:.3e}"
    )
    rng_a = np.random.default_rng(77)
    rng_b = np.random.default_rng(77)
    h25 = sample_channel(rng_a, 25.0, 3.2, 8.0, m, los_angle=0.7)
    h100 = sample_channel(rng_b, 100.0, 3.2, 8.0, m, los_angle=0.7)
    ratio = float(np.vdot(h25, h25).real / np.vdot(h100, h100).real)
    assert abs(ratio - 4.0 ** 3.2) <= 1e-9 * 4.0 ** 3.2, f"distance ratio {ratio}"
    return "mean power within 3% of pathloss, exact distance scaling"


def _check_gradients() -> str:
    rng = np.random.default_rng(61)
    model = init_model([6, 5, 3], rng)
    x = rng.standard_normal((8, 6))
    y = rng.integers(0, 3, size=8)
    _, grads = loss_and_gradient(model, x, y)
    worst = 0.0
    h = 1e-6
    for li, (w, b) in enumerate(model.layers):
        for arr, g in ((w, grads[li][0]), (b, grads[li][1])):
            flat = arr.ravel()
            gflat = g.ravel()
            for j in range(flat.size):
                keep = flat[j]
                flat[j] = keep + h
                lp, _ = loss_and_gradient(model, x, y)
                flat[j] = keep - h
                lm, _ = loss_and_gradient(model, x, y)
                flat[j] = keep
                fd = (lp - lm) / (2 * h)
                worst = max(worst, abs(fd - gflat[j]))
    scale = max(max(np.abs(g[0]).max(), np.abs(g[1]).max()) for g in grads)
    rel = worst / max(scale, 1e-12)
    assert rel <= 1e-5, f"gradient mismatch {rel:.2e}"
    return f"finite-difference agreement {rel:.2e}"


def _check_filter_monotone() -> str:
    rng = np.random.default_rng(67)
    feats = np.concatenate([
        rng.standard_normal((150, 4)) * 0.3 + np.array([1.5, 0, 0, 0]),
        rng.standard_normal((150, 4)) * 0.3 + np.array([0, 1.5, 0, 0]),
    ])
    labels = np.repeat([0, 1], 150)
    data = LabeledDataset(feats, labels)
    model = init_model([4, 8, 2], rng)
    for _ in range(5):
        model = sgd_epoch(model, data, np.arange(len(data)), 20, 0.5, rng)
    prev_excluded: set[int] | None = None
    for theta in (0.5, 0.6, 0.7, 0.8, 0.9, 1.0):
        dec = filter_samples(model, data, theta)
        excluded = set(range(len(data))) - set(dec.included_indices.tolist())
        if prev_excluded is not None:
            assert excluded <= prev_excluded, f"nesting broken at threshold {theta}"
        prev_excluded = excluded
    dec_all = filter_samples(model, data, 1.0)
    assert dec_all.excluded_count == 0, "threshold 1.0 must keep everything"
    return "exclusion sets nest as the threshold rises"


def _check_training_progress() -> str:
    rng = np.random.default_rng(71)
    from .io_cli import generate_synthetic

    data = generate_synthetic(8, 4, 1200, 0.3, rng)
    train, test = data.take(np.arange(1000)), data.take(np.arange(1000, 1200))
    model = init_model([8, 16, 4], rng)
    for _ in range(30):
        model = sgd_epoch(model, train, np.arange(len(train)), 20, 0.05, rng)
    _, acc = evaluate(model, test)
    assert acc >= 0.95, f"synthetic accuracy {acc:.3f} below 0.95"
    return f"synthetic blobs reach accuracy {acc:.3f}"


def _small_config(**overrides) -> ExperimentConfig:
    base = dict(
        rounds=8, workers=6, trials=1, seed=5, select_fraction=0.4,
        threshold=0.7, epochs=3, batch_size=20, learning_rate=0.05,
        synthetic_samples=900, synthetic_dim=8, synthetic_classes=4,
        synthetic_spread=0.3, cycles_per_sample=5e5, noise_power_w=1e-12,
        distance_max_m=60.0, output_dir="unused",
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def _check_run_determinism() -> str:
    outputs = []
    for workers in (1, 3):
        with tempfile.TemporaryDirectory() as td:
            _, paths = run_from_config(
                _small_config(parallel_workers=workers), out_dir=td, quiet=True
            )
            outputs.append(paths["global"].read_bytes())
    assert outputs[0] == outputs[1], "parallel schedule changed the metrics bytes"
    return "serial and threaded runs byte-identical"


def _check_filter_saves_round_energy() -> str:
    results = {}
    for theta in (0.7, 1.0):
        with tempfile.TemporaryDirectory() as td:
            records, _ = run_from_config(
                _small_config(threshold=theta), out_dir=td, quiet=True
            )
            results[theta] = records[0][-1].cum_energy_j
    assert results[0.7] < results[1.0], (
        f"filtering did not reduce energy: {results[0.7]} >= {results[1.0]}"
    )
    saved = 1.0 - results[0.7] / results[1.0]
    return f"filtered run uses {saved:.1%} less energy"


CHECKS = [
    ("lambert_identity", _check_lambert_identity),
    ("golden_section", _check_golden_section),
    ("cycle_pricing", _check_cycle_pricing),
    ("power_rate_inverse", _check_power_rate_inverse),
    ("upload_window", _check_upload_window),
    ("bandwidth_lambert", _check_bandwidth_lambert),
    ("optimizer_vs_grid", _check_optimizer_vs_grid),
    ("kappa_saves_energy", _check_kappa_saves_energy),
    ("beam_dominance", _check_beam_dominance),
    ("channel_statistics", _check_channel_statistics),
    ("gradient_check", _check_gradients),
    ("filter_monotone", _check_filter_monotone),
    ("training_progress", _check_training_progress),
    ("run_determinism", _check_run_determinism),
    ("filter_saves_round_energy", _check_filter_saves_round_energy),
]


def run_selftest() -> int:
    """Run every check; print one PASS/FAIL line each; return the fail count."""
    failed = 0
    for name, fn in CHECKS:
        try:
            detail = fn()
        except AssertionError as exc:
            failed += 1
            print(f"FAIL {name}: {exc}")
        except Exception as exc:  # noqa: BLE001  - a crash is a failure too
            failed += 1
            print(f"FAIL {name}: unexpected {type(exc).__name__}: {exc}")
        else:
            print(f"PASS {name}" + (f" ({detail})" if detail else ""))
    print(f"{len(CHECKS) - failed}/{len(CHECKS)} checks passed")
    return failed


if __name__ == "__main__":
    raise SystemExit(run_selftest())
