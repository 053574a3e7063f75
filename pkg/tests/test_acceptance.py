"""Acceptance checks, one test per criterion. Each records a PASS/FAIL line shown in the terminal summary."""

import os
import time

import numpy as np
import pytest
from scipy.optimize import curve_fit

from gazeloss import gzt
from gazeloss.cgl import CglConfig, CollapsedMap, cgl_loss, collapse_normalize
from gazeloss.cli import main
from gazeloss.dataset import generate
from gazeloss.gaze import ATARI_HEAD_SCREEN, Fixation, GazeHeatmap, export_heatmap, load_heatmap_csv, render_heatmap
from gazeloss.gmd import GmdConfig, apply_gmd, gmd_mask
from gazeloss.gradcheck import OPS, TOLERANCE, run_gradcheck
from gazeloss.losses import LabeledState, RankedSnippetPair, TrajectorySnippet, bc_loss, bco_loss, trex_loss
from gazeloss.models import build_bc_net, build_bco_net, build_trex_net
from gazeloss.tensor import Tensor
from gazeloss.trainer import RunConfig, read_metrics, train


def read_files(directory):
    out = {}
    for root, _, names in os.walk(directory):
        for n in names:
            path = os.path.join(root, n)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, directory)] = fh.read()
    return out


# 1 -----------------------------------------------------------------------------------


def test_worked_example_via_cli(tmp_path, capsys, acceptance):
    t0 = time.perf_counter()
    (tmp_path / "g.csv").write_text("1,0\n0,0.5\n")
    gzt.save(tmp_path / "f.gzt", np.array([[0.5, 1.0], [0.0, 1.0]], dtype=np.float32))
    code = main(["cgl-eval", "--gaze", str(tmp_path / "g.csv"), "--features", str(tmp_path / "f.gzt"),
                 "--epsilon", "1e-10"])
    out = capsys.readouterr().out
    value = float(out)
    elapsed = time.perf_counter() - t0
    acceptance(1, "worked example", code == 0 and abs(value - 0.519860) <= 1e-5, f"cgl-eval printed {out.strip()}",
               elapsed, 1)


# 2 -----------------------------------------------------------------------------------


def test_coverage_asymmetry_bit_identical(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    failures = 0
    for _ in range(1000):
        f = rng.normal(size=(4, 9, 9))
        g = rng.random((9, 9))
        g[rng.random((9, 9)) < 0.5] = 0.0
        if not (g == 0).any():
            g[0, 0] = 0.0
        s = f.sum(axis=0).reshape(-1)
        lo, hi = s.min(), s.max()
        extremal = {int(s.argmin()), int(s.argmax())}
        cells = [k for k in np.flatnonzero(g.reshape(-1) == 0) if k not in extremal]
        if not cells:
            continue
        k = int(rng.choice(cells))
        i, j = divmod(k, 9)
        # move the channel sum to a new random level strictly between the extremes
        target = lo + (hi - lo) * rng.uniform(0.05, 0.95)
        bumped = f.copy()
        bumped[int(rng.integers(0, 4)), i, j] += target - s[k]
        base = cgl_loss(g, collapse_normalize(Tensor(f))).item()
        moved = cgl_loss(g, collapse_normalize(Tensor(bumped))).item()
        failures += moved != base
    acceptance(2, "coverage asymmetry", failures == 0, f"{failures} of 1000 perturbations changed the loss",
               time.perf_counter() - t0, 10)


# 3 -----------------------------------------------------------------------------------


def test_zero_loss_fixed_point(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        g = rng.uniform(1e-3, 1.0, size=(9, 9))
        g /= g.max()
        t = Tensor(g)
        worst = max(worst, abs(cgl_loss(g, CollapsedMap(t, g == 0)).item()))
    acceptance(3, "zero-loss fixed point", worst <= 1e-9, f"max |loss| = {worst:.2e}", time.perf_counter() - t0, 1)


# 4 -----------------------------------------------------------------------------------


def test_gradient_suite(acceptance):
    t0 = time.perf_counter()
    worst = {}
    ok = True
    for dtype in (np.float32, np.float64):
        for op in OPS:
            err = max(run_gradcheck(op, seed, dtype).rel_error for seed in range(20))
            worst[(op, np.dtype(dtype).name)] = err
            ok &= err < TOLERANCE[dtype]
    detail = ", ".join(f"{op}/{dt}={e:.1e}" for (op, dt), e in worst.items())
    acceptance(4, "gradient suite (20 seeds)", ok, detail, time.perf_counter() - t0, 120)


# 5 -----------------------------------------------------------------------------------


def test_architecture_shapes_and_parameter_counts(acceptance):
    t0 = time.perf_counter()
    bc, bco, trex = build_bc_net(4), build_bco_net(4), build_trex_net()
    shapes = (bc.tap_shape, bco.tap_shape, trex.tap_shape)
    ok = shapes == ((64, 16, 16), (32, 9, 9), (16, 26, 26))
    rng = np.random.default_rng(5)
    counts = []
    for net, loss_fn, channels in ((bc, bc_loss, 1), (bco, bco_loss, 4)):
        before = net.num_parameters()
        batch = [LabeledState(rng.random((channels, 84, 84)), 1, rng.random((84, 84)))]
        loss_fn(net, batch, CglConfig(alpha=0.0))
        loss_fn(net, batch, CglConfig(alpha=0.01))
        counts.append((before, net.num_parameters()))
    before = trex.num_parameters()
    snip = TrajectorySnippet(rng.random((1, 4, 84, 84)), rng.random((1, 84, 84)), 0.0)
    pair = RankedSnippetPair(snip, TrajectorySnippet(snip.states, snip.gaze_maps, 1.0))
    trex_loss(trex, [pair], CglConfig(alpha=0.01))
    counts.append((before, trex.num_parameters()))
    ok &= all(a == b for a, b in counts)
    detail = f"taps {shapes}, parameters {[a for a, _ in counts]} unchanged with the gaze loss on"
    acceptance(5, "architecture conformance", ok, detail, time.perf_counter() - t0, 1)


# 6 -----------------------------------------------------------------------------------


def test_zero_gaze_reduction_all_algorithms(tmp_path, acceptance):
    t0 = time.perf_counter()
    bc_data = generate("bc", {"n_train": 100, "n_test": 0, "fixations_per_state": 0, "seed": 60}, tmp_path / "bc")
    trex_data = generate(
        "trex", {"n_trajectories": 4, "n_heldout": 0, "length": 24, "fixations_per_state": 0, "seed": 61},
        tmp_path / "trex",
    )
    results = []
    for algorithm, data in (("bc", bc_data), ("bco", bc_data), ("trex", trex_data)):
        runs = {}
        for attention in ("none", "cgl"):
            out = tmp_path / f"{algorithm}_{attention}"
            train(RunConfig(algorithm=algorithm, attention=attention, steps=100, seed=6, data=str(data),
                            out_dir=str(out), eval_split=None, probe_size=0))
            runs[attention] = (read_metrics(out / "metrics.csv"), read_files(out / "checkpoint"))
        (m0, c0), (m1, c1) = runs["none"], runs["cgl"]
        same = (m0["total"].tobytes() == m1["total"].tobytes() and m0["base"].tobytes() == m1["base"].tobytes()
                and not m1["cgl"].any() and c0 == c1 and len(m0["step"]) == 100)
        results.append((algorithm, same))
    ok = all(s for _, s in results)
    detail = ", ".join(f"{a}: {'bitwise equal' if s else 'DIFFERENT'}" for a, s in results)
    acceptance(6, "zero-gaze reduction", ok, detail, time.perf_counter() - t0, 300)


# 7 -----------------------------------------------------------------------------------

BC_SEEDS = (0, 1, 2, 3, 4)
BC_STEPS = 150


@pytest.mark.slow
def test_directional_bc_experiment(tmp_path, acceptance):
    t0 = time.perf_counter()
    acc = {"none": [], "cgl": [], "motion-cgl": []}
    for seed in BC_SEEDS:
        data = generate("bc", {"n_train": 500, "n_test": 500, "seed": 1000 + 100 * seed}, tmp_path / f"d{seed}")
        for attention in acc:
            result = train(RunConfig(algorithm="bc", attention=attention, alpha=0.01, steps=BC_STEPS, seed=seed,
                                     data=str(data), out_dir=str(tmp_path / f"r{seed}_{attention}"), probe_size=0))
            acc[attention].append(result["final_metrics"]["eval"]["accuracy"])
    mean = {k: float(np.mean(v)) for k, v in acc.items()}
    ok = mean["cgl"] > mean["none"] and mean["cgl"] > mean["motion-cgl"]
    per_seed = "; ".join(f"{k} {np.round(v, 3).tolist()}" for k, v in acc.items())
    detail = (f"mean test accuracy cgl {mean['cgl']:.4f}, none {mean['none']:.4f}, "
              f"motion-cgl {mean['motion-cgl']:.4f} [{per_seed}]")
    acceptance(7, "directional BC", ok, detail, time.perf_counter() - t0, 20 * 60)


# 8 -----------------------------------------------------------------------------------

TREX_ALPHA = 0.01
TREX_PROBE = 64


@pytest.mark.slow
def test_directional_trex_experiment(tmp_path, acceptance):
    t0 = time.perf_counter()
    data = generate("trex", {"n_trajectories": 10, "n_heldout": 10, "length": 40, "seed": 800}, tmp_path / "data")
    results = {}
    for attention in ("cgl", "none"):
        results[attention] = train(RunConfig(algorithm="trex", attention=attention, alpha=TREX_ALPHA, steps=2000,
                                             num_pairs=200, snippet_len=20, seed=8, data=str(data),
                                             out_dir=str(tmp_path / attention), probe_size=TREX_PROBE))
    ev = results["cgl"]["final_metrics"]["eval"]
    mass = {k: r["final_metrics"]["probe_activation_mass"] for k, r in results.items()}
    ok = ev["pairwise_accuracy"] >= 0.8 and ev["spearman"] >= 0.8 and mass["cgl"] > mass["none"]
    base = results["none"]["final_metrics"]["eval"]
    detail = (f"cgl ranking accuracy {ev['pairwise_accuracy']:.3f}, spearman {ev['spearman']:.3f}; "
              f"activation mass in gaze support cgl {mass['cgl']:.4f} vs none {mass['none']:.4f} "
              f"(none: accuracy {base['pairwise_accuracy']:.3f}, spearman {base['spearman']:.3f})")
    acceptance(8, "directional T-REX", ok, detail, time.perf_counter() - t0, 30 * 60)


# 9 -----------------------------------------------------------------------------------


def test_gmd_statistical_law(acceptance):
    t0 = time.perf_counter()
    g = np.linspace(0.0, 1.0, 81).reshape(9, 9)
    cfg = GmdConfig(p_base=0.5)
    n = 10_000
    masks, _ = gmd_mask(np.broadcast_to(g, (n, 9, 9)), cfg, seed=np.random.default_rng(9))
    freq = (masks == 0).mean(axis=0)
    err = float(np.abs(freq - 0.5 * (1 - g)).max())
    eval_mask, _ = gmd_mask(g, GmdConfig(p_base=0.5, mode="eval"), seed=0)
    f = Tensor(np.random.default_rng(10).normal(size=(3, 9, 9)))
    identity = np.array_equal(apply_gmd(f, eval_mask).data, f.data)
    acceptance(9, "GMD law", err <= 0.02 and identity, f"max |freq - p_drop| = {err:.4f}, eval identity {identity}",
               time.perf_counter() - t0, 10)


# 10 ----------------------------------------------------------------------------------


def _gauss2d(xy, amp, x0, y0, sx, sy):
    x, y = xy
    return amp * np.exp(-0.5 * (((x - x0) / sx) ** 2 + ((y - y0) / sy) ** 2))


def test_heatmap_sigma_at_screen_resolution(acceptance):
    t0 = time.perf_counter()
    screen = ATARI_HEAD_SCREEN
    w, h = int(screen.width_px), int(screen.height_px)
    grid = render_heatmap([Fixation(0, w / 2 - 0.5, h / 2 - 0.5)], screen, (h, w)).grid
    ys, xs = np.nonzero(grid > 0)
    centres = (xs + 0.5, ys + 0.5)
    popt, _ = curve_fit(_gauss2d, centres, grid[ys, xs], p0=(1.0, w / 2, h / 2, 20.0, 20.0))
    sx, sy = abs(popt[3]), abs(popt[4])
    ok = abs(sx - 28.70) <= 0.01 and abs(sy - 29.47) <= 0.01
    acceptance(10, "heatmap geometry", ok, f"fitted sigma x {sx:.4f} px, y {sy:.4f} px", time.perf_counter() - t0, 5)


# 11 ----------------------------------------------------------------------------------


def test_determinism_and_round_trips(tmp_path, acceptance):
    t0 = time.perf_counter()
    data = generate("bc", {"n_train": 60, "n_test": 20, "seed": 110}, tmp_path / "data")
    ckpts = []
    for name in ("a", "b"):
        cfg = RunConfig(algorithm="bc", attention="cgl", steps=5, batch_size=10, seed=11, data=str(data),
                        out_dir=str(tmp_path / name), checkpoint_every=5)
        train(cfg)
        ckpts.append(read_files(tmp_path / name / "checkpoint"))
    same_ckpt = ckpts[0] == ckpts[1] and len(ckpts[0]) > 1

    rng = np.random.default_rng(11)
    arr = rng.normal(size=(3, 5, 7)).astype(np.float32)
    gzt.save(tmp_path / "t.gzt", arr)
    back = gzt.load(tmp_path / "t.gzt")
    gzt_ok = back.dtype == np.float32 and back.tobytes() == arr.tobytes()

    heat = rng.random((13, 17)).astype(np.float32).astype(np.float64)
    export_heatmap(GazeHeatmap(heat), tmp_path / "h.csv", "csv")
    csv_back = load_heatmap_csv(tmp_path / "h.csv").grid
    csv_ok = csv_back.astype(np.float32).tobytes() == heat.astype(np.float32).tobytes()

    detail = f"checkpoints identical {same_ckpt}, GZT1 lossless {gzt_ok}, heatmap CSV lossless {csv_ok}"
    acceptance(11, "determinism and round trips", same_ckpt and gzt_ok and csv_ok, detail, time.perf_counter() - t0, 60)
