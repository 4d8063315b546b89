"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

The convergence, separation, ordering and checkpoint criteria share one
module-scoped desk-scale training run (about five minutes on one core).
"""

import subprocess
import sys
import time

import numpy as np
import pytest

from convae import tensor as T
from convae.baselines import abod_scores, knn_scores
from convae.checkpoint import from_bytes, to_bytes
from convae.cli import run_comparison
from convae.data import normalize, split_dataset, tile_windows
from convae.evaluation import calibrate_threshold, classify_and_report, score, summarize, window_costs
from convae.model import ArchitectureSpec, build, forward
from convae.synth import SynthConfig, generate_synthetic
from convae.tensor import ConvSpec, Tensor
from convae.training import StagePlan, TrainPlan, loss_and_gradients, loss_J, train

from oracles import (
    abod_bruteforce, central_difference, knn_bruteforce, max_rel_error, naive_conv2d, naive_matmul, sorted_quantile,
)

SEED = 11


def _verdict(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# shared desk-scale run
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_run():
    cycles = [normalize(c) for c in generate_synthetic(SynthConfig(seed=SEED, n_healthy=30, n_faulted=10))]
    train_c, val_c, test_c = split_dataset(cycles, SEED, validation_fraction=1 / 3)
    plan = TrainPlan(stages=(StagePlan(1, 30, 0), StagePlan(2, 10, 20)), seed=SEED, arch=ArchitectureSpec.desk(8))
    t0 = time.time()
    result = train(plan, train_c)
    wall = time.time() - t0
    return {"cycles": cycles, "train": train_c, "val": val_c, "test": test_c, "result": result, "wall": wall}


def _cae_metrics(run, granularity):
    v = score(run["result"].params, run["val"], granularity)
    f = score(run["result"].params, run["test"], granularity)
    th = calibrate_threshold(v, "max-margin", 1.05)
    return classify_and_report(v + f, th), th


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def test_gradient_correctness(capsys):
    t0 = time.time()
    arch = ArchitectureSpec.desk(8, input_shape=(8, 8, 1))
    params = build(1, np.random.default_rng(0), arch)
    params = params.with_tensors({
        k: Tensor(t.numpy() + 0.05 * np.random.default_rng(i).normal(size=t.shape))
        for i, (k, t) in enumerate(params.tensors().items())
    })
    x = Tensor(np.random.default_rng(1).random((1, 8, 8, 1)))
    _, grads = loss_and_gradients(params, x, 8)
    worst = 0.0
    for key, t in params.tensors().items():
        def J(v, key=key):
            return loss_J(x, forward(params.with_tensors({key: Tensor(v)}), x)[0], 8).total
        worst = max(worst, max_rel_error(grads[key], central_difference(J, t.numpy()), floor=1e-6))
    wall = time.time() - t0
    _verdict(capsys, "gradient", worst < 1e-4 and wall < 60,
             f"max relative error {worst:.2e} (< 1e-4), {wall:.1f}s (< 60s)")


def _conv_case(rng):
    h, w = (int(v) for v in rng.integers(2, 9, size=2))
    c, f = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    kh, kw = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    sh, sw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    spec = ConvSpec(kh, kw, sh, sw, filters=f, padding="same")
    return rng.normal(size=(1, h, w, c)), rng.normal(size=(kh, kw, c, f)), rng.normal(size=f), spec


def test_numerical_core_oracles(capsys):
    t0 = time.time()
    rng = np.random.default_rng(2024)
    n = 100
    fails = {}

    bad = 0
    for _ in range(n):
        x, w, b, spec = _conv_case(rng)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), spec).numpy()
        bad += not np.allclose(got, naive_conv2d(x, w, b, spec.stride, spec.padding), rtol=0, atol=1e-12)
    fails["conv2d"] = bad

    bad = 0
    for _ in range(n):
        x, w, _, spec = _conv_case(rng)
        zf, zc = Tensor(np.zeros(w.shape[3])), Tensor(np.zeros(x.shape[3]))
        out = T.conv2d(Tensor(x), Tensor(w), zf, spec).numpy()
        y = rng.normal(size=out.shape)
        tspec = ConvSpec(spec.kernel_height, spec.kernel_width, spec.stride_h, spec.stride_w,
                         filters=x.shape[3], padding="same", output_size=x.shape[1:3])
        lhs = float(np.sum(out * y))
        rhs = float(np.sum(x * T.conv_transpose2d(Tensor(y), Tensor(w), zc, tspec).numpy()))
        bad += abs(lhs - rhs) > 1e-10 * max(1.0, abs(lhs))
    fails["conv_transpose2d adjoint"] = bad

    bad = 0
    for _ in range(n):
        a, b = rng.normal(size=(int(rng.integers(1, 6)), 4)), rng.normal(size=(4, int(rng.integers(1, 6))))
        bad += not np.allclose(T.dense(Tensor(a), Tensor(b), Tensor(np.zeros(b.shape[1]))).numpy(),
                               naive_matmul(a, b), rtol=0, atol=1e-12)
    fails["dense"] = bad

    bad = 0
    for _ in range(n):
        v = rng.normal(size=int(rng.integers(1, 200))).tolist()
        want = [sorted_quantile(v, q) for q in (0, 0.25, 0.5, 0.75, 1)]
        bad += not np.allclose(summarize(v).as_tuple(), want, rtol=0, atol=1e-12)
    fails["quantile summary"] = bad

    bad = 0
    for _ in range(n):
        train_x = rng.normal(size=(int(rng.integers(6, 30)), int(rng.integers(1, 6))))
        q = rng.normal(size=train_x.shape[1])
        k, p = int(rng.integers(1, 6)), float(rng.choice([1.0, 2.0, 3.0]))
        got = knn_scores(train_x, [q], k=k, p=p)[0]
        bad += not np.isclose(got, knn_bruteforce(train_x.tolist(), q.tolist(), k, p), rtol=1e-10, atol=0)
    fails["knn"] = bad

    bad = 0
    for _ in range(n):
        train_x = rng.normal(size=(int(rng.integers(3, 12)), int(rng.integers(1, 5))))
        q = rng.normal(size=train_x.shape[1])
        bad += not np.isclose(abod_scores(train_x, [q])[0], abod_bruteforce(train_x, q), rtol=1e-10, atol=0)
    fails["abod"] = bad

    wall = time.time() - t0
    failed = {k: v for k, v in fails.items() if v}
    _verdict(capsys, "oracles", not failed and wall < 120,
             f"{n} instances each of {', '.join(fails)}; failures {failed or 'none'}; {wall:.1f}s (< 120s)")


def test_loss_contract(capsys):
    x = np.random.default_rng(0).random((2, 128, 64, 1))
    same = loss_J(x, x.copy(), 58).total
    worked = loss_J(np.array([1.0, 3.0]), np.array([0.0, 1.0])).total
    _verdict(capsys, "loss contract", same == 0.0 and worked == 4.5, f"J(x,x)={same!r}, worked example J={worked!r}")


def test_convergence(desk_run, capsys):
    means = desk_run["result"].epoch_means()
    first, last = means[min(means)], means[max(means)]
    ratio = last / first
    n_train = len(desk_run["train"])
    ok = len(means) == 60 and n_train == 20 and ratio < 0.2 and desk_run["wall"] < 15 * 60
    _verdict(capsys, "convergence", ok,
             f"{n_train} training cycles, {len(means)} epochs, first J={first:.4f}, last J={last:.4f}, "
             f"ratio {ratio:.3f} (< 0.2), {desk_run['wall']:.0f}s (< 900s)")


def test_separation(desk_run, capsys):
    assert len(desk_run["val"]) == 10 and len(desk_run["test"]) == 10
    cyc, _ = _cae_metrics(desk_run, "cycle")
    smp, _ = _cae_metrics(desk_run, "sample")
    ok = cyc.accuracy >= 0.95 and cyc.recall >= 0.9 and smp.accuracy >= 0.85
    _verdict(capsys, "separation", ok,
             f"cycle accuracy {cyc.accuracy:.3f} (>= 0.95), cycle recall {cyc.recall:.3f} (>= 0.9), "
             f"sample accuracy {smp.accuracy:.3f} (>= 0.85)")


def test_ordering(desk_run, capsys):
    parts, ok = [], True
    for gran in ("cycle", "sample"):
        cae, _ = _cae_metrics(desk_run, gran)
        _, blocks = run_comparison(desk_run["cycles"], ["abod", "knn", "dense-ae"], seed=SEED,
                                   validation_fraction=1 / 3, granularity=gran)
        f1 = {m: b["metrics"]["f1"] for m, b in blocks.items()}
        ok &= all(cae.f1 >= v for v in f1.values()) and f1["dense-ae"] <= f1["knn"]
        parts.append(f"{gran}: cae {cae.f1:.3f}, " + ", ".join(f"{m} {v:.3f}" for m, v in f1.items()))
    _verdict(capsys, "ordering", ok, "; ".join(parts))


def _end_to_end(d):
    cmd = [sys.executable, "-m", "convae"]
    steps = [
        ["synth", "--healthy", "8", "--faulted", "3", "--len", "600", "--seed", "4", "--out", str(d / "data")],
        ["train", "--data", str(d / "data"), "--stages", "1:2:0,2:1:1", "--windows-per-cycle", "8", "--seed", "4",
         "--out", str(d / "ck.bin"), "--log", str(d / "log.csv")],
        ["eval", "--data", str(d / "data"), "--checkpoint", str(d / "ck.bin"), "--granularity", "sample",
         "--scores", str(d / "scores.csv"), "--report", str(d / "report.json")],
    ]
    for s in steps:
        subprocess.run(cmd + s, check=True, capture_output=True)
    return [(d / f).read_bytes() for f in ("ck.bin", "log.csv", "scores.csv")]


def test_reproducibility(tmp_path, capsys):
    a = _end_to_end(tmp_path / "a")
    b = _end_to_end(tmp_path / "b")
    same = [x == y for x, y in zip(a, b)]
    _verdict(capsys, "reproducibility", all(same),
             "checkpoint, loss log, scores CSV identical: " + ", ".join(str(s) for s in same))


def test_checkpoint_round_trip(desk_run, capsys):
    params = desk_run["result"].params
    batch = np.stack([w.padded for c in desk_run["test"][:2] for w in tile_windows(c)])
    before = window_costs(params, batch, 58)
    loaded, _ = from_bytes(to_bytes(params))
    after = window_costs(loaded, batch, 58)
    _verdict(capsys, "checkpoint round-trip", before.tobytes() == after.tobytes(),
             f"{len(batch)} windows scored bitwise identically after save and load")
