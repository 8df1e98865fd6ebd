"""Acceptance suite. Every test prints one ``ACCEPTANCE <n> ... PASS|FAIL`` line.

The learning criteria (4-6) train nine models on the default corpus and take
roughly 40 minutes on one core; they are marked ``slow``.
"""
import json
import time

import numpy as np
import pytest

from oracles import closest_hit, greedy_oracle
from viewfuse.cli import main
from viewfuse.core import knn, knn_bruteforce, project_points, unproject
from viewfuse.eval import density_robustness, evaluate_scenes
from viewfuse.gradsuite import run_suite
from viewfuse.net2d import Unet2d, pretrain2d
from viewfuse.pipeline import TrainConfig, chunk_view_report, infer_scene, train
from viewfuse.pointnet2 import Fusion
from viewfuse.synth import CLASS_NAMES, TWIN_CLASSES, SynthConfig, cast_rays, generate_corpus
from viewfuse.viewsel import CoverageIndex, greedy_select

from conftest import make_frame, random_pose
from test_pipeline import NET, brute_force_votes, model as small_model
from test_synth import _random_objects

SEEDS = (0, 1, 2)
MODES = (Fusion.EARLY, Fusion.LATE, Fusion.XYZ_ONLY)
PINNED_COVERAGE = {1: 0.5779224058480016, 3: 0.8044548053872445, 5: 0.8486508177223185}


def report(capsys, n, name, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {n} {name}: {'PASS' if ok else 'FAIL'} ({detail})")


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(SynthConfig())


@pytest.fixture(scope="module")
def net2d(corpus):
    scenes = corpus["train"]
    images = np.stack([f.rgb for s in scenes for f in s.frames])
    labels = np.stack([lab for s in scenes for lab in s.labels2d])
    net, _ = pretrain2d(images, labels, epochs=10, batch_size=16, seed=0)
    return net


@pytest.fixture(scope="module")
def fusion_runs(corpus, net2d):
    t0 = time.time()
    out = {}
    for seed in SEEDS:
        for mode in MODES:
            cfg = TrainConfig(seed=seed, eval_every=TrainConfig().epochs)
            model, rows = train(corpus["train"], corpus["val"], mode, cfg,
                                net2d if mode.needs_lifted else None)
            val = [r for r in rows if r["split"] == "val"][-1]
            out[mode, seed] = {"model": model, "miou": val["miou"], "ious": np.array(val["ious"])}
    return out, time.time() - t0


def test_1_gradient_suite(capsys):
    t = time.time()
    results = run_suite(0)
    elapsed = time.time() - t
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.max_rel_error < 1e-4 for r in results) and elapsed < 120
    report(capsys, 1, "gradient suite", ok, f"{len(results)} checks, worst {worst.name} "
           f"{worst.max_rel_error:.2e}, {elapsed:.0f}s")
    assert ok


def _round_trip_error(rng):
    depth = rng.uniform(0.1, 8.0, (12, 16)) * (rng.random((12, 16)) > 0.1)
    frame = make_frame(depth, random_pose(rng), fx=rng.uniform(5, 20), fy=rng.uniform(5, 20),
                       cx=rng.uniform(0, 16), cy=rng.uniform(0, 12))
    u, v, z, _ = project_points(unproject(frame).positions, frame.intrinsics, frame.pose)
    vv, uu = np.divmod(np.flatnonzero(depth > 0), 16)
    return max(np.abs(u - uu).max(), np.abs(v - vv).max(),
               (np.abs(z - depth[depth > 0]) / depth[depth > 0]).max())


def _greedy_instance(rng):
    n_frames, n_coarse = int(rng.integers(1, 13)), int(rng.integers(1, 301))
    base = [np.flatnonzero(rng.random(n_coarse) < rng.random()) for _ in range(3)]
    sets = [base[int(rng.integers(0, 3))] if rng.random() < 0.5
            else np.flatnonzero(rng.random(n_coarse) < 0.3) for _ in range(n_frames)]
    ids = rng.permutation(2 * n_frames)[:n_frames].tolist()
    target = np.flatnonzero(rng.random(n_coarse) < 0.7)
    m = int(rng.integers(1, n_frames + 1))
    index = CoverageIndex(np.arange(n_coarse), np.zeros((n_coarse, 3)), ids, sets, 0.1, 0.2)
    got = greedy_select(index, target, m)
    want = greedy_oracle([set(s.tolist()) for s in sets], ids, set(target.tolist()), m)
    tie = len(set(map(tuple, map(list, sets)))) < n_frames
    return got == want, tie


def test_2_geometry_oracles(capsys):
    rng = np.random.default_rng(2024)
    rt = max(_round_trip_error(rng) for _ in range(50))

    knn_ok = 0
    for i in range(1000):
        n, k = int(rng.integers(1, 200)), int(rng.integers(1, 9))
        ref = rng.random((n, 3))
        if i % 4 == 0:
            ref = np.round(ref * 3) / 3  # lattice: many equal distances
        q = rng.random((int(rng.integers(1, 30)), 3))
        k = min(k, n)
        i1, d1 = knn(q, ref, k)
        i2, d2 = knn_bruteforce(q, ref, k)
        knn_ok += bool(np.array_equal(i1, i2) and np.allclose(d1, d2, rtol=0, atol=1e-12))

    greedy = [_greedy_instance(rng) for _ in range(100)]
    greedy_ok = sum(g for g, _ in greedy)
    ties = sum(t for _, t in greedy)

    depth_err = 0.0
    for _ in range(10):
        objs = _random_objects(rng)
        o = np.column_stack([rng.uniform(0.2, 2.8, 1000), rng.uniform(0.2, 3.3, 1000),
                             rng.uniform(1.3, 1.9, 1000)])
        d = rng.normal(size=(1000, 3))
        t, _, _ = cast_rays(o, d, objs)
        for i in range(1000):
            ref, _ = closest_hit(o[i], d[i], objs)
            if np.isfinite(ref) or np.isfinite(t[i]):
                depth_err = max(depth_err, abs(t[i] - ref) / max(1.0, ref))

    ok = rt <= 1e-6 and knn_ok == 1000 and greedy_ok == 100 and ties > 0 and depth_err <= 1e-9
    report(capsys, 2, "geometry oracles", ok,
           f"round trip {rt:.1e}, knn {knn_ok}/1000, greedy {greedy_ok}/100 ({ties} with ties), "
           f"ray depth {depth_err:.1e}")
    assert ok


def test_3_coverage_increases_with_m(capsys, corpus):
    cov = {m: float(np.mean([w["coverage"] for s in corpus["val"]
                             for w in chunk_view_report(s, m)])) for m in (1, 3, 5)}
    increasing = cov[1] < cov[3] < cov[5]
    pinned = all(cov[m] == pytest.approx(PINNED_COVERAGE[m], rel=1e-9) for m in cov)
    report(capsys, 3, "coverage vs M", increasing and pinned,
           ", ".join(f"M={m}: {v:.4f}" for m, v in cov.items()))
    assert increasing and pinned


def _mean(runs, mode):
    return float(np.mean([runs[mode, s]["miou"] for s in SEEDS]))


@pytest.mark.slow
def test_4_fusion_ordering(capsys, fusion_runs):
    runs, elapsed = fusion_runs
    e, l, x = (_mean(runs, m) for m in MODES)
    ok = e > l > x and e >= x + 0.05 and elapsed <= 3600
    per_seed = "; ".join(f"{m.value} " + "/".join(f"{runs[m, s]['miou']:.4f}" for s in SEEDS)
                         for m in MODES)
    report(capsys, 4, "fusion ordering", ok,
           f"early {e:.4f}, late {l:.4f}, xyz {x:.4f}; per seed {per_seed}; {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_5_twins(capsys, fusion_runs):
    runs, _ = fusion_runs
    early = np.mean([runs[Fusion.EARLY, s]["ious"] for s in SEEDS], axis=0)
    xyz = np.mean([runs[Fusion.XYZ_ONLY, s]["ious"] for s in SEEDS], axis=0)
    gaps = {CLASS_NAMES[c]: early[c] - xyz[c] for c in TWIN_CLASSES}
    ok = all(g >= 0.15 for g in gaps.values())
    report(capsys, 5, "twin classes", ok, ", ".join(
        f"{n}: early {early[c]:.3f} vs xyz {xyz[c]:.3f}" for n, c in zip(gaps, TWIN_CLASSES)))
    assert ok


@pytest.mark.slow
def test_6_density_robustness(capsys, corpus, fusion_runs):
    runs, _ = fusion_runs
    model = runs[Fusion.EARLY, 0]["model"]
    rows = density_robustness(model, corpus["val"], len(CLASS_NAMES), keep_ratios=(1.0, 0.25))
    ref = evaluate_scenes(model, corpus["val"], len(CLASS_NAMES))
    exact = (rows[0]["miou"] == ref.miou == runs[Fusion.EARLY, 0]["miou"]
             and np.array_equal(np.array(rows[0]["ious"]), ref.ious, equal_nan=True))
    kept = rows[1]["miou"] / rows[0]["miou"]
    ok = exact and kept >= 0.8
    report(capsys, 6, "density robustness", ok, f"ratio 1.0 {rows[0]['miou']:.4f}, "
           f"ratio 0.25 {rows[1]['miou']:.4f} ({100 * kept:.1f}%), bit-exact {exact}")
    assert ok


def test_7_inference_protocol(capsys, tiny_corpus):
    net = Unet2d(NET, np.random.default_rng(0))
    ok, checked = True, 0
    for fusion in (Fusion.EARLY, Fusion.XYZ_ONLY):
        m = small_model(fusion, net if fusion.needs_lifted else None)
        for scene in tiny_corpus["val"] + tiny_corpus["train"][:1]:
            res = infer_scene(scene, m, stride=0.5, n_chunk=256)
            again = infer_scene(scene, m, stride=0.5, n_chunk=256)
            tally = brute_force_votes(scene, m, 0.5, 0, 256)
            for i, t in enumerate(tally):
                if t:
                    ok &= all(res.votes[i, c] == n for c, n in t.items())
                    ok &= int(res.votes[i].sum()) == sum(t.values())
                    best = max(t.items(), key=lambda kv: (kv[1], -kv[0]))[0]
                    ok &= res.labels[i] == best
            ok &= res.labels.shape == (scene.points.n,)
            ok &= bool(np.all((res.labels >= 0) & (res.labels < len(CLASS_NAMES))))
            ok &= np.array_equal(res.labels, again.labels) and np.array_equal(res.votes, again.votes)
            checked += scene.points.n
    report(capsys, 7, "inference protocol", bool(ok), f"{checked} points, 2 fusion modes")
    assert ok


TINY_CONFIG = {"synth": {"num_train": 2, "num_val": 1, "frames_per_scene": 6},
               "net2d": {"epochs": 1},
               "train": {"epochs": 2, "chunks_per_epoch": 2, "batch_size": 2, "eval_every": 1,
                         "n_chunk": 256},
               "eval": {"stride": 1.0, "keep_ratios": [1.0, 0.5]}}


def test_8_reproducibility(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    w = ["--workers", "1"]
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "c"), *w]) == 0
    first = {
        "pretrain2d": ["--corpus", str(tmp_path / "c")],
        "train": ["--corpus", str(tmp_path / "c"), "--fusion", "early",
                  "--net2d", str(tmp_path / "runs" / "pretrain2d")],
    }
    csvs = {"pretrain2d": "pretrain.csv", "train": "metrics.csv", "eval": "metrics.csv",
            "robustness": "robustness_early.csv"}
    first["eval"] = ["--corpus", str(tmp_path / "c"), "--model", str(tmp_path / "runs" / "train")]
    first["robustness"] = first["eval"]
    same = {}
    for cmd, extra in first.items():
        run = tmp_path / "runs" / cmd
        assert main([cmd, "--config", str(cfg), "--out", str(run), *extra, *w]) == 0
        rerun = tmp_path / "rerun" / cmd
        assert main([cmd, "--config", str(run / "config.json"), "--out", str(rerun), *w]) == 0
        same[cmd] = (run / csvs[cmd]).read_bytes() == (rerun / csvs[cmd]).read_bytes()
    ok = all(same.values())
    report(capsys, 8, "reproducibility", ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}"
                                                         for k, v in same.items()))
    assert ok
