"""One test per acceptance criterion; each prints a single PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from duformer import gradcheck as gc
from duformer import losses as L
from duformer import netpbm
from duformer.blocks import BISCSE_VARIANTS, BiscSE, fuse_stage, tokenize
from duformer.checkpoint import Checkpoint, snapshot
from duformer.data import GeneratorConfig, generate_corpus
from duformer.layers import ParamStore
from duformer.losses import LossWeights
from duformer.metrics import evaluate_dataset, f_score
from duformer.model import DUFormer, ModelConfig, duformer_forward
from duformer.tensor import Tensor
from duformer.train import TrainConfig, poly_lr, train
from reference_rows import COMPARISON, LOSS_ABLATION, PLAB_STAGES, SE_VARIANTS, printed_f


def test_criterion_1_f_score_reproduction(verdict):
    checked, misses, unprinted = 0, [], []
    for row in COMPARISON + LOSS_ABLATION + PLAB_STAGES + SE_VARIANTS:
        computed = f_score(row.p, row.r, beta=2.0)
        printed = row.f if row.f is not None else printed_f(row.p, row.r)
        if printed is None:
            unprinted.append(f"{row.group}/{row.name}={computed:.2f}")
            continue
        checked += 1
        if abs(computed - printed) > 0.02:
            misses.append(f"{row.group}/{row.name} printed {printed} computed {computed:.3f}")
    ok = not misses
    detail = f"{checked - len(misses)}/{checked} rows within 0.02"
    if misses:
        detail += "; off: " + "; ".join(misses)
    detail += f"; no printed F: {', '.join(unprinted)}"
    verdict("criterion 1 F-score arithmetic", ok, detail)
    assert ok, detail


def test_criterion_2_heavy_encoder_ratio(verdict):
    heavy = DUFormer(ModelConfig()).count_params()
    light = DUFormer(ModelConfig(heavy_encoder=False)).count_params()
    ok = heavy["ratio"] >= 0.70 and light["ratio"] < heavy["ratio"] and light["transformer"] == heavy["transformer"]
    verdict(
        "criterion 2 token-encoder/transformer ratio",
        ok,
        f"heavy {float(heavy['ratio']):.3f} (>= 0.70), light {float(light['ratio']):.3f}, "
        f"transformer {heavy['transformer']} vs {light['transformer']}",
    )
    assert ok


def test_criterion_3_gradient_checks(verdict):
    start = time.time()
    results = gc.run("all", seed=0)
    elapsed = time.time() - start
    failed = [f"{r.name} {r.max_rel_error:.2e}" for r in results if not r.passed]
    worst = max(results, key=lambda r: r.max_rel_error)
    names = {r.name for r in results}
    required = {"conv2d", "stem", "dub", "transition", "plab", "transformer_block", "focal_loss", "phi_loss",
                "dice_loss", "cross_entropy_loss", "joint_loss", "full-model"}
    required |= {f"biscse_{v}" for v in BISCSE_VARIANTS}
    ok = not failed and required <= names and elapsed < 300
    verdict(
        "criterion 3 gradient checks",
        ok,
        f"{len(results) - len(failed)}/{len(results)} targets < {gc.TOLERANCE:g} in float64, worst {worst.name} "
        f"{worst.max_rel_error:.2e}, {elapsed:.0f}s" + (f"; failed: {', '.join(failed)}" if failed else ""),
    )
    assert ok


def test_criterion_4_shapes_and_contracts(verdict):
    problems = []
    cfg = ModelConfig()
    rng = np.random.default_rng(0)
    for hw in ((64, 64), (128, 128)):
        out = duformer_forward(Tensor(rng.random((1, 3, *hw)).astype(np.float32)), cfg, seed=0)
        shapes = [lg.shape for lg in out.all_logits]
        if len(out.stage_logits) != 5 or any(s != (1, 2, *hw) for s in shapes):
            problems.append(f"{hw}: {shapes}")
        grid = cfg.grid_for(*hw)
        tok = tokenize(out.stage_features, grid)
        if tok.shape != (1, grid[0] * grid[1], sum(cfg.stage_channels)):
            problems.append(f"tokens {tok.shape} for grid {grid}")
    d = Tensor(rng.standard_normal((2, 8, 5, 5)))
    fused = fuse_stage(d, Tensor(np.ones((2, 8, 5, 5))))
    if fused.data.tobytes() != d.data.tobytes() or not np.array_equal(fused.data.argmax(1), d.data.argmax(1)):
        problems.append("fusion with all-ones enhancement is not the identity")
    ok = not problems
    verdict("criterion 4 shapes and contracts", ok, "; ".join(problems) or "6 maps at input size for 64 and 128, T = h*w, D = sum(channels), fusion identity exact")
    assert ok


def test_criterion_5_loss_properties(verdict):
    problems = []
    target = np.array([[[1, 0, 0, 1], [0, 1, 0, 0], [0, 0, 0, 0], [0, 0, 1, 0]]])
    t = target.astype(np.float64)
    perfect = Tensor(np.stack([1 - t, t], axis=1))
    inverted = Tensor(np.stack([t, 1 - t], axis=1))
    flat = Tensor(np.full((1, 2, 4, 4), 0.5))
    for name, v in [
        ("focal", L.focal_loss(perfect, target)),
        ("ce", L.cross_entropy_loss(perfect, target)),
        ("phi", L.phi_loss(perfect, target)),
        ("dice", L.dice_loss(perfect, target)),
    ]:
        if abs(v.item()) > 1e-9:
            problems.append(f"{name} at perfect = {v.item():.3g}")
    logits = Tensor(np.stack([np.where(target, -50.0, 50.0), np.where(target, 50.0, -50.0)], axis=1))
    joint_perfect = L.joint_loss([logits] * 6, target).total.item()
    if abs(joint_perfect) > 1e-6:
        problems.append(f"joint at perfect = {joint_perfect:.3g}")
    for theta in (1.0, 2.0, 0.5):
        if abs(L.phi_loss(flat, target, theta).item() - 1.0) > 1e-9:
            problems.append(f"phi at MCC 0, theta {theta}")
        if abs(L.phi_loss(inverted, target, theta).item() - 2**theta) > 1e-9:
            problems.append(f"phi at MCC -1, theta {theta}")
    if abs(L.combine(0.1, 0.2, 0.3) - 1.5) > 1e-12:
        problems.append("combine(0.1, 0.2, 0.3) != 1.5")
    r = np.random.default_rng(1)
    lg = Tensor(r.standard_normal((1, 2, 4, 4)))
    parts = L.map_loss(lg, target, LossWeights())
    hand = 3.0 * parts["focal"].item() + 1.5 * parts["phi"].item() + 3.0 * parts["dice"].item()
    if abs(parts["total"].item() - hand) > 1e-12:
        problems.append("map loss differs from 3.0 F + 1.5 P + 3.0 D")
    if abs(L.joint_loss([lg] * 6, target).total.item() - 6 * hand) > 1e-9:
        problems.append("six identical maps != 6x single map")
    for n, h, w in ((1, 4, 4), (3, 7, 5)):
        fg = r.random((n, h, w))
        c = L.soft_confusion(Tensor(np.stack([1 - fg, fg], axis=1)), r.integers(0, 2, (n, h, w)))
        if abs((c.tp + c.fp + c.fn + c.tn).item() - n * h * w) > 1e-6:
            problems.append(f"soft counts for {n}x{h}x{w}")
    ok = not problems
    verdict("criterion 5 loss properties", ok, "; ".join(problems) or "zero at perfect, phi 1 / 2^theta, (3.0, 1.5, 3.0) combination, counts sum to pixels")
    assert ok


def test_criterion_6_training_smoke(default_runs, verdict):
    runs, _, val, elapsed = default_runs
    a, b = runs
    ratio = a.log[-1]["total"] / a.log[0]["total"]
    iou = evaluate_dataset(a.model, val).iou / 100.0
    identical = a.log == b.log and a.checkpoint.to_bytes() == b.checkpoint.to_bytes()
    ok = ratio < 0.30 and iou >= 0.50 and identical and len(a.log) == 500
    verdict(
        "criterion 6 training smoke test",
        ok,
        f"final/first loss {ratio:.3f} (< 0.30), val IoU {iou:.3f} (>= 0.50), identical logs {identical}, "
        f"{elapsed:.0f}s for two runs",
    )
    assert ok


def test_criterion_7_ablation_plumbing(corpus, verdict):
    from duformer.data import load_split

    out, _ = corpus
    train_split = load_split(out / "manifest.tsv", "train")
    tiny = ModelConfig.tiny()
    matrix = {
        "loss ce": dict(loss=LossWeights(kind="ce")),
        "loss multi": dict(),
        "plab none": dict(model=tiny.replace(plab_stages=frozenset())),
        "plab 1-3": dict(model=tiny.replace(plab_stages=frozenset({1, 2, 3}))),
        "plab 1-5": dict(model=tiny.replace(plab_stages=frozenset(range(1, 6)), biscse_stages=frozenset())),
        "encoder heavy": dict(model=tiny.replace(heavy_encoder=True)),
        "encoder light": dict(model=tiny.replace(heavy_encoder=False)),
    }
    for v in BISCSE_VARIANTS:
        matrix[f"se {v}"] = dict(model=tiny.replace(biscse_variant=v))
    failures = []
    for name, changes in matrix.items():
        try:
            res = train(TrainConfig(max_iters=20, **changes), train_split)
            if len(res.log) != 20 or not all(math.isfinite(e["total"]) for e in res.log):
                failures.append(name)
        except Exception as e:  # report every failing config, not just the first
            failures.append(f"{name}: {e}")

    probe = np.full((1, 4, 8, 8), 0.1)
    probe[0, 1, 3, 5] = 25.0
    outs = {v: BiscSE(ParamStore(np.float64), "token_encoder.se", 4, np.random.default_rng(0), v)(Tensor(probe)).data for v in BISCSE_VARIANTS}
    gaps = [np.abs(outs[u] - outs[v]).max() for i, u in enumerate(BISCSE_VARIANTS) for v in BISCSE_VARIANTS[i + 1 :]]
    distinct = min(gaps) > 1e-6
    ok = not failures and distinct
    verdict(
        "criterion 7 ablation plumbing",
        ok,
        f"{len(matrix) - len(failures)}/{len(matrix)} configs ran 20 iterations; smallest pairwise BiscSE gap on spike probe {min(gaps):.3g}"
        + (f"; failed: {failures}" if failures else ""),
    )
    assert ok


def test_criterion_8_reproducibility_and_formats(tmp_path, verdict):
    problems = []
    cfg = GeneratorConfig(seed=11)
    generate_corpus(cfg, tmp_path / "a", 6)
    generate_corpus(cfg, tmp_path / "b", 6)
    for p in sorted((tmp_path / "a").iterdir()):
        if p.read_bytes() != (tmp_path / "b" / p.name).read_bytes():
            problems.append(f"corpus file {p.name} differs")

    blobs = []
    for _ in range(2):
        m = DUFormer(ModelConfig.tiny(), seed=4)
        blobs.append(Checkpoint(TrainConfig().to_dict(), snapshot(m.store), 0).to_bytes())
    (tmp_path / "c1.ckpt").write_bytes(blobs[0])
    Checkpoint.load(tmp_path / "c1.ckpt").save(tmp_path / "c2.ckpt")
    if blobs[0] != blobs[1] or (tmp_path / "c2.ckpt").read_bytes() != blobs[0]:
        problems.append("checkpoint bytes differ")

    r = np.random.default_rng(2)
    for arr in (r.integers(0, 256, (5, 7), dtype=np.uint8), r.integers(0, 256, (4, 3, 3), dtype=np.uint8)):
        netpbm.write(tmp_path / "x.pnm", arr)
        buf = (tmp_path / "x.pnm").read_bytes()
        back = netpbm.read(tmp_path / "x.pnm")
        if not np.array_equal(back, arr) or netpbm.encode(back) != buf:
            problems.append(f"netpbm round trip {arr.shape}")

    tc = TrainConfig(max_iters=500)
    for it, want in ((0, 9e-4), (250, 4.5e-4), (500, 0.0)):
        closed = tc.initial_lr * (1 - it / tc.max_iters) ** tc.lr_power
        if not (math.isclose(poly_lr(it, tc), want, rel_tol=1e-12, abs_tol=1e-18) and poly_lr(it, tc) == closed):
            problems.append(f"poly_lr({it}) = {poly_lr(it, tc)}")
    ok = not problems
    verdict("criterion 8 reproducibility and formats", ok, "; ".join(problems) or "corpus, checkpoint and netpbm byte-identical; poly_lr exact at 0, 250, 500")
    assert ok
