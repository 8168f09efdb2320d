"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the verdict lines are
written straight to the terminal even when output capture is on.
"""
import io
import itertools
import time
from contextlib import redirect_stdout

import numpy as np
import pytest

from conftest import conv_loop, involution_loop
from speednet import gradcheck, ops
from speednet.checkpoint import save_checkpoint
from speednet.cli import main
from speednet.config import RunConfig
from speednet.data import synth_dataset
from speednet.layers import DipcBlock
from speednet.losses import (ConfusionCounts, TverskyParams, confusion, metrics, soft_dice_loss,
                             tversky_loss)
from speednet.model import SpeedNetConfig, build, count_parameters
from speednet.training import PlateauScheduler, train


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {detail}")
        assert ok, detail
    return report


def test_c01_gradient_suite(verdict):
    t0 = time.perf_counter()
    results = gradcheck.run_suite(seeds=range(5), model=True)
    elapsed = time.perf_counter() - t0
    failed = [r.name for r in results if not r.passed]
    worst_op = max((r for r in results if r.name != "speednet_toy"), key=lambda r: r.max_error)
    model = next(r for r in results if r.name == "speednet_toy")
    ok = not failed and elapsed < 60 and all(max(s) <= 8 for s in [gradcheck.SHAPE[2:]])
    verdict(1, ok, f"{len(results)} checks, worst op {worst_op.name} {worst_op.max_error:.2e} (<1e-4), "
                   f"toy model {model.max_error:.2e} (<1e-3; {model.where}), {elapsed:.1f}s (<60s)"
                   + (f", failed: {failed}" if failed else ""))


def _oracle_shapes():
    for n, c, h, w in itertools.product((1, 2), (1, 2, 3, 4), range(1, 9), range(1, 9)):
        yield n, c, h, w


def test_c02_oracle_equivalence(verdict):
    rng = np.random.default_rng(2)
    cases = mismatches = 0
    for (n, c, h, w), d in itertools.product(_oracle_shapes(), (1, 2, 3)):
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        wt = rng.standard_normal((2, c, 3, 3)).astype(np.float32)
        b = rng.standard_normal(2).astype(np.float32)
        got = ops.conv2d(x, wt, b, padding=d, dilation=d)
        mismatches += not np.array_equal(got, conv_loop(x, wt, b, padding=d, dilation=d))
        groups = 2 if c % 2 == 0 else 1
        k = rng.standard_normal((n, groups * 9, h, w)).astype(np.float32)
        got = ops.involution2d(x, k, 3, groups, dilation=d)
        mismatches += not np.array_equal(got, involution_loop(x, k, 3, groups, dilation=d))
        cases += 2
    verdict(2, mismatches == 0, f"{cases} conv2d/involution2d cases up to (2,4,8,8), dilations 1-3, "
                                f"{mismatches} not bit-identical to the nested-loop oracle")


def test_c03_dipc_shape_law(verdict):
    cfg = SpeedNetConfig()
    rng = np.random.default_rng(3)
    checks, bad = [], []
    for level, c in enumerate(cfg.encoder_channels, start=1):
        block = DipcBlock(level, c, cfg.involution_k, cfg.dilations, cfg.involution_r,
                          cfg.groups_for(c), rng=rng)
        for b, size in ((1, 224 // 2 ** (level - 1)), (2, 16)):
            f = rng.standard_normal((b, c, size, size)).astype(np.float32)
            img = rng.random((b, 3, size * 2 ** (level - 1), size * 2 ** (level - 1))).astype(np.float32)
            out = block(f, img)
            a = block.last_attention
            ok = out.shape == (b, 2 * c, size // 2, size // 2) and np.all((a > 0) & (a < 1))
            checks.append(f"L{level} {f.shape}->{out.shape}")
            if not ok:
                bad.append(checks[-1])
    verdict(3, not bad, "; ".join(checks[::2]) + f"; attention in (0,1); {len(checks)} cases"
                        + (f"; failures {bad}" if bad else ""))


def test_c04_parameter_accounting(verdict, tmp_path):
    full = build(SpeedNetConfig())
    noinv = build(SpeedNetConfig(variant="no-involution"))
    rf, rn = count_parameters(full), count_parameters(noinv)
    path = tmp_path / "full.ckpt"
    save_checkpoint(path, full)
    size = path.stat().st_size
    ratio_size = size / (4 * rf.total_with_stats)
    ok = (abs(rf.trainable / 2.40e6 - 1) <= 0.15 and abs(rn.trainable / 4.95e6 - 1) <= 0.15
          and rf.trainable < rn.trainable and abs(ratio_size - 1) <= 0.02)
    verdict(4, ok, f"full {rf.trainable:,} ({rf.trainable / 2.40e6 - 1:+.1%} vs 2.40M), "
                   f"no-involution {rn.trainable:,} ({rn.trainable / 4.95e6 - 1:+.1%} vs 4.95M), "
                   f"ratio {rn.trainable / rf.trainable:.2f}; file {size:,} B = "
                   f"{ratio_size:.4f} x 4 B x {rf.total_with_stats:,} stored scalars")


def test_c05_loss_identities(verdict):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        shape = (int(rng.integers(1, 4)), 1, int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        p = rng.random(shape)
        t = (rng.random(shape) > 0.5).astype(np.float64)
        loss, _ = tversky_loss(p, t, TverskyParams(0.5, 0.5, 0.0))
        worst = max(worst, abs(loss - soft_dice_loss(p, t)))
    pred = np.ones((1, 1, 1, 4))
    target = np.array([1.0, 1, 0, 0]).reshape(1, 1, 1, 4)
    loss, _ = tversky_loss(pred, target, TverskyParams(0.3, 0.7, 0.0))
    hand = abs((1 - loss) - 2 / 2.6)
    grad = gradcheck.run_case("tversky_loss", seeds=range(5))
    ok = worst < 1e-9 and hand < 1e-12 and grad.max_error < 1e-6
    verdict(5, ok, f"max |tversky(.5,.5,0) - soft dice| {worst:.1e} over 100 (<1e-9); "
                   f"|TI - 2/2.6| {hand:.1e} (<1e-12); gradient {grad.max_error:.1e} (<1e-6)")


def test_c06_metric_identities(verdict):
    rng = np.random.default_rng(6)
    count_bad = ident_worst = 0
    order_bad = 0
    for _ in range(1000):
        shape = tuple(int(s) for s in rng.integers(1, 12, size=2))
        pred = rng.random(shape) * (rng.random() < 0.95)
        gt = (rng.random(shape) < rng.random()).astype(np.float64)
        c = confusion(pred, gt)
        tp = fp = fn = tn = 0
        for p_, g_ in zip(pred.ravel(), gt.ravel()):
            pos, true = p_ > 0.5, g_ > 0.5
            tp += pos and true
            fp += pos and not true
            fn += (not pos) and true
            tn += (not pos) and not true
        count_bad += c != ConfusionCounts(tp, fp, fn, tn)
        m = metrics(c)
        if tp + fp + fn > 0:
            ident_worst = max(ident_worst, abs(m.jaccard - m.dice / (2 - m.dice)))
        order_bad += m.jaccard > m.dice
    ok = count_bad == 0 and ident_worst < 1e-12 and order_bad == 0
    verdict(6, ok, f"1000 random masks: {count_bad} count mismatches vs pixel loop, "
                   f"max |J - D/(2-D)| {ident_worst:.1e} (<1e-12), {order_bad} cases with J > D")


OVERFIT = dict(img_size=64, epochs=200, batch_size=4, encoder_channels=(4, 4, 8, 8),
               bottleneck_channels=8, decoder_channels=(8, 8, 4, 4, 4), involution_k=3,
               involution_r=2, seed=0, prefetch=0)


def test_c07_overfit(verdict):
    data = synth_dataset(16, 64, seed=0).as_dataset()
    cfg = RunConfig(**OVERFIT)
    t0 = time.perf_counter()
    result = train(cfg, data, None, write_files=False)
    elapsed = time.perf_counter() - t0
    dice = result.history[-1]["dice"]
    losses = np.array([h["train_loss"] for h in result.history])
    windows = losses.reshape(-1, 20).mean(axis=1)
    ok = dice >= 0.95 and elapsed < 600
    verdict(7, ok, f"16 synthetic 64x64 images, toy config, 200 epochs: train dice {dice:.4f} (>=0.95), "
                   f"{elapsed:.0f}s (<600s); loss {losses[0]:.3f} -> {losses[-1]:.4f}, "
                   f"20-epoch window means non-increasing: {bool(np.all(np.diff(windows) <= 0))}")


def test_c08_scheduler(verdict):
    s = PlateauScheduler(lr=1e-3)
    lrs = [s.step(1.0)]
    lrs += [s.step(1.0) for _ in range(12)]
    decays = sum(b < a for a, b in zip([1e-3] + lrs, lrs))
    after_first_plateau = lrs[-1]
    lrs += [s.step(1.0 - 0.01 * i) for i in range(1, 20)]
    increases = sum(b > a for a, b in zip(lrs, lrs[1:]))
    ok = after_first_plateau == pytest.approx(1e-4, rel=1e-12) and decays == 1 and increases == 0 \
        and lrs[-1] == after_first_plateau
    verdict(8, ok, f"12 flat epochs: lr 1e-3 -> {after_first_plateau:.0e} with {decays} decay; "
                   f"{increases} increases over {len(lrs)} epochs")


def test_c09_determinism(verdict, tmp_path, monkeypatch):
    data = tmp_path / "data"
    with redirect_stdout(io.StringIO()):
        main(["synth", "--out", str(data), "--n", "8", "--size", "32", "--seed", "9"])
    cfg_text = "\n".join(f"{k} = {','.join(map(str, v)) if isinstance(v, tuple) else v}"
                         for k, v in {**OVERFIT, "img_size": 32, "epochs": 4, "prefetch": 2}.items())
    cfg_text += f"\ndata_root = {data}\ncheckpoint_out = run.ckpt\n"
    blobs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        (d / "synth.cfg").write_text(cfg_text)
        monkeypatch.chdir(d)
        with redirect_stdout(io.StringIO()):
            assert main(["train", "--config", "synth.cfg"]) == 0
        blobs.append([(d / n).read_bytes() for n in ("run.ckpt", "run.ckpt.best", "run.ckpt.log")])
    same = [x == y for x, y in zip(*blobs)]
    verdict(9, all(same), f"two 4-epoch CLI runs: checkpoint/best/log byte-identical = {same}")


def test_c10_mutation_sensitivity(verdict):
    caught, missed = [], []
    for op in sorted(gradcheck.BACKWARDS):
        buf = io.StringIO()
        with redirect_stdout(buf):
            rc = main(["gradcheck", "--mutate", op])
        failed_line = next((l for l in buf.getvalue().splitlines() if "FAILED" in l), "")
        named = op in failed_line.split(":", 1)[-1].replace(",", " ").split()
        (caught if rc != 0 and named else missed).append(op)
    verdict(10, not missed, f"{len(caught)}/{len(gradcheck.BACKWARDS)} sign-flipped backwards fail "
                            f"gradcheck naming the op" + (f"; missed {missed}" if missed else ""))
