"""End-to-end acceptance checks for the whole pipeline.

Each test prints one ``[criterion NN] PASS/FAIL`` line with the measured
numbers, then asserts. Criterion 07 trains nine full runs and dominates
the suite's wall time, so it sits at the end of the file.
"""

import math
import os
import shutil
import statistics
import time

import numpy as np
import pytest
from scipy import stats as sps

from oracles import (
    BankReplayOracle,
    batch_nce_oracle,
    finite_difference_gradient,
    max_rel_error,
    memory_nce_oracle,
    multi_pair_oracle,
    otb_oracle,
)
from test_evaluate import _object_frames
from test_tensor import GRAD_CASES, run_gradcheck

from vidnce import tensor as T
from vidnce.data import CurationConfig, FrameStore, curate_videos, extract_gap_frames
from vidnce.encoder import EncoderConfig, EncoderParams, encode, init_params
from vidnce.evaluate import (
    Box,
    ProbeConfig,
    TrackConfig,
    center_error,
    embed_frames,
    otb_metrics,
    probe_accuracy,
    siamfc_track,
    split_by_video,
    train_linear_probe,
)
from vidnce.moco import MemoryBank, init_momentum_encoder, momentum_update
from vidnce.nce import (
    BatchLayout,
    NceConfig,
    batch_nce_loss,
    build_pair_mask,
    memory_nce_loss,
    multi_pair_nce_loss,
)
from vidnce.synthetic import SyntheticConfig, generate_corpus
from vidnce.tensor import Tensor
from vidnce.train import TrainConfig, init_state, load_checkpoint, train_loop, train_step

TAU = NceConfig().temperature


def _verdict(num: int, ok: bool, detail: str) -> None:
    print(f"[criterion {num:02d}] {'PASS' if ok else 'FAIL'}: {detail}", flush=True)
    assert ok, f"criterion {num:02d}: {detail}"


def _unit_rows(gen: np.random.Generator, n: int, d: int) -> np.ndarray:
    rows = gen.normal(size=(n, d))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    rows = rows.astype(np.float32)
    rows /= np.linalg.norm(rows, axis=1, keepdims=True).astype(np.float32)
    return rows


def test_criterion_01_loss_oracle_equivalence():
    started = time.perf_counter()
    worst = 0.0
    configs = 0
    for trial in range(50):
        gen = np.random.default_rng(1000 + trial)
        d = int(gen.choice([16, 24, 32]))
        n = int(gen.integers(2, 17))
        m = int(gen.integers(0, 33))
        k = int(gen.choice([1, 2, 4]))
        v = int(gen.integers(2, 16 // k + 1))

        anchors = _unit_rows(gen, n, d)
        positives = _unit_rows(gen, n, d)
        bank = _unit_rows(gen, m, d) if m else np.zeros((0, d), dtype=np.float32)

        got = float(batch_nce_loss(Tensor(anchors), Tensor(positives)).data)
        worst = max(worst, abs(got - batch_nce_oracle(anchors, positives, TAU)))

        got = float(memory_nce_loss(Tensor(anchors), Tensor(positives), bank).data)
        worst = max(worst, abs(got - memory_nce_oracle(anchors, positives, bank, TAU)))

        rows = v * k
        f_rows = _unit_rows(gen, rows, d)
        g_cols = _unit_rows(gen, rows, d)
        mask = build_pair_mask(BatchLayout(num_videos=v, pairs_per_video=k, memory_size=m))
        got = float(multi_pair_nce_loss(Tensor(f_rows), g_cols, bank, mask).data)
        video_of = np.repeat(np.arange(v), k).tolist()
        expected, _ = multi_pair_oracle(f_rows, g_cols, bank, video_of, video_of, TAU)
        worst = max(worst, abs(got - expected))
        configs += 1
    elapsed = time.perf_counter() - started
    _verdict(
        1,
        configs == 50 and worst < 1e-6 and elapsed < 10.0,
        f"{configs} configs, max |loss - oracle| {worst:.3g} (tol 1e-6), {elapsed:.1f}s (< 10s)",
    )


def test_criterion_02_reduction_identity():
    worst_memory = 0.0
    worst_batch = 0.0
    for seed in range(20):
        gen = np.random.default_rng(2000 + seed)
        v = int(gen.integers(2, 7))
        m = int(gen.integers(1, 11))
        d = 32
        f_rows = _unit_rows(gen, v, d)
        g_cols = _unit_rows(gen, v, d)
        bank = _unit_rows(gen, m, d)
        layout = BatchLayout(num_videos=v, pairs_per_video=1, memory_size=m)
        mask = build_pair_mask(layout)
        mp = float(multi_pair_nce_loss(Tensor(f_rows), g_cols, bank, mask).data)

        # k=1 row i competes with the other videos' columns plus the bank,
        # which is exactly a one-anchor memory loss over that widened bank
        per_anchor = []
        for i in range(v):
            others = np.delete(g_cols, i, axis=0)
            widened = np.concatenate([others, bank], axis=0)
            pair_f = np.stack([f_rows[i], f_rows[i]])
            pair_g = np.stack([g_cols[i], g_cols[i]])
            per_anchor.append(float(memory_nce_loss(Tensor(pair_f), Tensor(pair_g), widened).data))
        worst_memory = max(worst_memory, abs(mp - sum(per_anchor) / v))

        empty = np.zeros((0, d), dtype=np.float32)
        mask0 = build_pair_mask(BatchLayout(num_videos=v, pairs_per_video=1, memory_size=0))
        mp0 = float(multi_pair_nce_loss(Tensor(f_rows), g_cols, empty, mask0).data)
        b = float(batch_nce_loss(Tensor(f_rows), Tensor(g_cols)).data)
        worst_batch = max(worst_batch, abs(mp0 - b))
    _verdict(
        2,
        worst_memory < 1e-6 and worst_batch < 1e-6,
        f"k=1 vs memory loss max diff {worst_memory:.3g}, k=1 m=0 vs batch loss max diff "
        f"{worst_batch:.3g} over 20 seeds (tol 1e-6)",
    )


def test_criterion_03_uniform_analytic_values():
    worst = 0.0
    d = 16
    row = np.zeros(d, dtype=np.float32)
    row[0] = 1.0
    for n in (2, 5, 16):
        rows = np.tile(row, (n, 1))
        got = float(batch_nce_loss(Tensor(rows), Tensor(rows)).data)
        worst = max(worst, abs(got - math.log(n)))
    for m in (1, 7, 32):
        rows = np.tile(row, (3, 1))
        bank = np.tile(row, (m, 1))
        got = float(memory_nce_loss(Tensor(rows), Tensor(rows), bank).data)
        worst = max(worst, abs(got - math.log(1 + m)))
    for v, k, m in ((4, 2, 6), (2, 2, 9), (5, 1, 4), (16, 4, 32)):
        n = v * k
        rows = np.tile(row, (n, 1))
        bank = np.tile(row, (m, 1))
        mask = build_pair_mask(BatchLayout(num_videos=v, pairs_per_video=k, memory_size=m))
        got = float(multi_pair_nce_loss(Tensor(rows), rows, bank, mask).data)
        worst = max(worst, abs(got - math.log(n + m - k + 1)))
    _verdict(3, worst < 1e-5, f"max |loss - ln(...)| {worst:.3g} (tol 1e-5)")


def test_criterion_04_gradient_suite():
    started = time.perf_counter()
    worst_op = 0.0
    seeds_used = set()
    for index, case in enumerate(GRAD_CASES):
        for seed in (2 * index, 2 * index + 1):
            worst_op = max(worst_op, run_gradcheck(case, seed))
            seeds_used.add(seed)

    # encoder + multi-pair loss composition: analytic float32 gradients of
    # every parameter against a float64 finite-difference twin
    enc = EncoderConfig(input_size=8, trunk=((3, 3, 2), (4, 3, 2)), hidden_dim=6, embed_dim=4)
    params = init_params(enc, seed=123)
    gen = np.random.default_rng(7)
    images = gen.uniform(0.05, 0.95, size=(4, 3, 8, 8)).astype(np.float32)
    g_cols = _unit_rows(gen, 4, 4)
    bank = _unit_rows(gen, 3, 4)
    mask = build_pair_mask(BatchLayout(num_videos=2, pairs_per_video=2, memory_size=3))

    loss = multi_pair_nce_loss(
        T.l2_normalize_rows(encode(params, enc, Tensor(images))), g_cols, bank, mask
    )
    loss.backward()
    names = list(params.names)

    def scalar(arrays: list[np.ndarray]) -> float:
        twin = EncoderParams()
        for name, arr in zip(names, arrays):
            twin.add(name, Tensor(arr, dtype=np.float64))
        emb = T.l2_normalize_rows(encode(twin, enc, Tensor(images, dtype=np.float64)))
        out = multi_pair_nce_loss(emb, g_cols.astype(np.float64), bank.astype(np.float64), mask)
        return float(out.data)

    # h=1e-5: the temperature multiplier makes the loss stiff enough that
    # a 1e-3 step picks up visible truncation error in the bias gradients
    reference = finite_difference_gradient(
        scalar, [t.data.astype(np.float64) for t in params.tensors], h=1e-5
    )
    worst_comp = max(max_rel_error(t.grad, g) for t, g in zip(params.tensors, reference))
    elapsed = time.perf_counter() - started
    _verdict(
        4,
        worst_op < 1e-3 and worst_comp < 1e-3 and len(seeds_used) >= 20 and elapsed < 120.0,
        f"{len(GRAD_CASES)} ops x {len(seeds_used)} seeds max rel err {worst_op:.3g}, "
        f"composition max rel err {worst_comp:.3g} (tol 1e-3), {elapsed:.1f}s (< 2min)",
    )


def test_criterion_05_positive_count_law():
    gen = np.random.default_rng(5)
    counts = []
    for v, k in ((16, 4), (8, 8), (64, 1)):
        n = v * k
        m = int(gen.integers(0, 20))
        stats: dict = {}
        mask = build_pair_mask(BatchLayout(num_videos=v, pairs_per_video=k, memory_size=m))
        bank = _unit_rows(gen, m, 8) if m else np.zeros((0, 8), dtype=np.float32)
        multi_pair_nce_loss(Tensor(_unit_rows(gen, n, 8)), _unit_rows(gen, n, 8), bank, mask, stats=stats)
        counts.append((v, k, stats["positive_scores"], k * k * v, n * n // v))
    ok = all(got == kkv == nnv for _, _, got, kkv, nnv in counts)
    _verdict(5, ok, "; ".join(f"v={v} k={k}: {got} == k^2*v == n^2/v" for v, k, got, _, _ in counts))


def test_criterion_06_moco_mechanics():
    gen = np.random.default_rng(6)
    replays = 0
    for _ in range(1000):
        capacity = int(gen.integers(1, 9))
        bank = MemoryBank(capacity, 2)
        oracle = BankReplayOracle(capacity)
        for _ in range(int(gen.integers(1, 7))):
            b = int(gen.integers(0, capacity + 1))
            batch = _unit_rows(gen, b, 2) if b else np.zeros((0, 2), dtype=np.float32)
            bank.enqueue(batch)
            oracle.enqueue(batch)
            got = sorted(tuple(float(x) for x in row) for row in bank.negatives_view())
            assert got == oracle.contents()
        replays += 1

    enc = EncoderConfig(input_size=16, trunk=((4, 3, 2),), hidden_dim=8, embed_dim=4)
    worst_excess = float("-inf")
    for alpha in (0.9, 0.99, 0.999):
        f = init_params(enc, seed=1)
        g = init_momentum_encoder(init_params(enc, seed=2))
        gap0 = max(np.abs(gt.data - ft.data).max() for gt, ft in zip(g.tensors, f.tensors))
        for step in range(1, 41):
            momentum_update(g, f, alpha)
            gap = max(np.abs(gt.data - ft.data).max() for gt, ft in zip(g.tensors, f.tensors))
            bound = alpha**step * gap0 * (1 + 1e-5) + 1e-7
            worst_excess = max(worst_excess, gap - bound)
    _verdict(
        6,
        replays == 1000 and worst_excess <= 0.0,
        f"{replays} replay sequences match FIFO oracle; convergence bound slack {worst_excess:.3g} <= 0 "
        "for alpha in (0.9, 0.99, 0.999)",
    )


def test_criterion_08_tracking_harness():
    # metric integration against the hand-built oracle, exact float equality
    exact = True
    gen = np.random.default_rng(8)
    for _ in range(3):
        gts, preds = [], []
        cx, cy = 40.0, 40.0
        for t in range(30):
            g = Box(cx + 2.0 * t, cy + 1.0 * t, 12 + float(gen.uniform(-2, 2)), 12 + float(gen.uniform(-2, 2)))
            p = Box(g.cx + float(gen.normal(0, 6)), g.cy + float(gen.normal(0, 6)), g.w * 1.1, g.h * 0.9)
            gts.append(g)
            preds.append(p)
        m = otb_metrics(preds, gts)
        o_prec, o_succ, o_pauc, o_sauc = otb_oracle(preds, gts)
        exact = exact and m.precision_curve == o_prec and m.success_curve == o_succ
        exact = exact and m.precision_auc == o_pauc and m.success_auc == o_sauc

    enc = EncoderConfig(input_size=28, trunk=((8, 3, 2), (16, 3, 2), (32, 3, 2)), hidden_dim=64, embed_dim=16)
    params = init_params(enc, seed=0)

    frames, gts = _object_frames(8, step=(0.0, 0.0))
    boxes = siamfc_track(params, enc, frames, gts[0])
    static = otb_metrics(boxes, gts)

    frames, gts = _object_frames(10, step=(3.0, 0.0))
    boxes = siamfc_track(params, enc, frames, gts[0], TrackConfig(scale_candidates=(1.0,)))
    stride = enc.total_stride()
    worst_center = max(center_error(b, g) for b, g in zip(boxes, gts))
    _verdict(
        8,
        exact and static.precision_auc > 0.95 and worst_center <= stride,
        f"otb curves exactly match oracle: {exact}; static precision_auc {static.precision_auc:.3f} "
        f"(> 0.95); translation worst center error {worst_center:.2f}px (<= stride {stride})",
    )


def test_criterion_09_curation(tmp_path):
    all_static = generate_corpus(
        tmp_path / "static",
        SyntheticConfig(num_classes=2, videos_per_class=3, frames_per_video=6, image_size=32, seed=3, static_classes=2),
    )
    cfg = CurationConfig(frames_per_video=3, frame_gap=2)
    static_result = curate_videos(all_static, cfg, seed=0)
    fully_filtered = len(static_result.kept) == 0 and len(static_result.dropped) == 6

    mixed = generate_corpus(
        tmp_path / "mixed",
        SyntheticConfig(num_classes=2, videos_per_class=3, frames_per_video=6, image_size=32, seed=4, static_classes=1),
    )
    mixed_result = curate_videos(mixed, cfg, seed=0)
    conserved = len(mixed_result.kept) + len(mixed_result.dropped) == mixed_result.total == 6

    gap_cfg = CurationConfig(frames_per_video=4, frame_gap=5)
    num_frames = 40
    span = (gap_cfg.frames_per_video - 1) * gap_cfg.frame_gap + 1
    starts = [extract_gap_frames(num_frames, gap_cfg, seed=i)[0] for i in range(10000)]
    bins = np.bincount(starts, minlength=num_frames - span + 1)
    chi = sps.chisquare(bins)
    _verdict(
        9,
        fully_filtered and conserved and chi.pvalue > 0.01,
        f"static corpus fully filtered: {fully_filtered}; kept+dropped == total: {conserved}; "
        f"start-index chi2 p={chi.pvalue:.3f} (> 0.01) over 10k draws, {len(bins)} bins",
    )


def test_criterion_10_determinism_and_resume(tiny_records, tmp_path):
    enc = EncoderConfig(input_size=16, trunk=((4, 3, 2), (8, 3, 2)), hidden_dim=16, embed_dim=8)
    config = TrainConfig(
        regime="multi_frame",
        num_videos=4,
        pairs_per_video=1,
        total_iterations=6,
        memory_size=16,
        checkpoint_every=3,
        encoder=enc,
        seed=0,
    )
    train_loop(config, tiny_records, tmp_path / "a")
    train_loop(config, tiny_records, tmp_path / "b")
    a_metrics = (tmp_path / "a" / "metrics.csv").read_bytes()
    identical = a_metrics == (tmp_path / "b" / "metrics.csv").read_bytes()
    identical_ckpt = (
        (tmp_path / "a" / "checkpoint_final.ckpt").read_bytes()
        == (tmp_path / "b" / "checkpoint_final.ckpt").read_bytes()
    )

    # resume in place from the midpoint checkpoint; the replayed rows must
    # leave the metrics file and final checkpoint byte-identical
    final_ckpt = (tmp_path / "a" / "checkpoint_final.ckpt").read_bytes()
    train_loop(config, tiny_records, tmp_path / "a", resume_from=tmp_path / "a" / "checkpoint_0000003.ckpt")
    resumed_ok = (tmp_path / "a" / "metrics.csv").read_bytes() == a_metrics
    resumed_ckpt_ok = (tmp_path / "a" / "checkpoint_final.ckpt").read_bytes() == final_ckpt
    mid = load_checkpoint(tmp_path / "a" / "checkpoint_0000003.ckpt")
    _verdict(
        10,
        identical and identical_ckpt and resumed_ok and resumed_ckpt_ok and mid.iteration == 3,
        f"repeat run metrics byte-identical: {identical}; checkpoints byte-identical: {identical_ckpt}; "
        f"resume from iteration {mid.iteration} reproduces metrics: {resumed_ok} and final checkpoint: "
        f"{resumed_ckpt_ok}",
    )


ABLATION_ITERATIONS = 20000
ABLATION_SEEDS = (0, 1, 2)


def _ablation_encoder() -> EncoderConfig:
    return EncoderConfig(input_size=28, trunk=((8, 3, 2), (16, 3, 2), (32, 3, 2)), hidden_dim=64, embed_dim=16)


def _ablation_config(regime: str, seed: int) -> TrainConfig:
    videos, pairs = (16, 2) if regime == "multi_pair" else (32, 1)
    return TrainConfig(
        regime=regime,
        num_videos=videos,
        pairs_per_video=pairs,
        total_iterations=ABLATION_ITERATIONS,
        lr=0.03,
        memory_size=1024,
        seed=seed,
        encoder=_ablation_encoder(),
        checkpoint_every=0,
    )


def test_criterion_07_ablation_trend(tmp_path):
    started = time.perf_counter()
    corpus = SyntheticConfig(num_classes=8, videos_per_class=50, frames_per_video=4, image_size=64, seed=0)
    records = generate_corpus(tmp_path / "corpus", corpus)
    assert len(records) == 400 and len(records[0].frame_paths) == 4

    enc = _ablation_encoder()
    store = FrameStore()
    top1: dict[str, list[float]] = {"same_frame": [], "multi_frame": [], "multi_pair": []}
    for seed in ABLATION_SEEDS:
        for regime in ("same_frame", "multi_frame", "multi_pair"):
            state = init_state(_ablation_config(regime, seed))
            for _ in range(ABLATION_ITERATIONS):
                train_step(state, records, store=store)
            emb = embed_frames(state.f_params, enc, records, store=store)
            train_mask, held_mask = split_by_video(emb, 0.25, seed=0)
            head = train_linear_probe(
                emb.vectors[train_mask], emb.labels[train_mask], 8, ProbeConfig(epochs=60, seed=0)
            )
            acc = probe_accuracy(head, emb.vectors[held_mask], emb.labels[held_mask])
            top1[regime].append(acc)
            print(
                f"  seed {seed} {regime:11s} top1 {acc:.4f} ({time.perf_counter() - started:.0f}s elapsed)",
                flush=True,
            )

    med = {regime: statistics.median(values) for regime, values in top1.items()}
    gap_frame = med["multi_frame"] - med["same_frame"]
    gap_pair = med["multi_pair"] - med["same_frame"]
    elapsed_min = (time.perf_counter() - started) / 60.0
    _verdict(
        7,
        gap_frame >= 0.02 and gap_pair >= 0.02,
        f"median top1 same_frame {med['same_frame']:.4f}, multi_frame {med['multi_frame']:.4f} "
        f"(gap {gap_frame:+.4f}), multi_pair {med['multi_pair']:.4f} (gap {gap_pair:+.4f}); "
        f"gaps >= +0.02 over {len(ABLATION_SEEDS)} seeds; {elapsed_min:.0f} min total",
    )
