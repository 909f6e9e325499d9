"""Acceptance criteria: one test per criterion, each emitting a PASS/FAIL line.

The verdict lines are printed and also collected in ``VERDICTS``; conftest
repeats them in the terminal summary so they show up under plain ``pytest -v``.
Criteria 7 to 9 train 5 seeds x 5 variants at desk scale (roughly half an hour).
"""
import functools
import json
import time

import numpy as np

import metric_fixture as fx
from squat import numerics as nx
from squat.cli import main as cli_main
from squat.datagen import (
    SynthConfig,
    dataset_header,
    load_checkpoint,
    read_dataset,
    save_checkpoint,
    synthesize,
    write_dataset,
)
from squat.evaluation import MatchRule, compute_report, evaluate, f_at_k, random_baseline
from squat.gradcheck import gradcheck, random_scene, small_config
from squat.graph import edge_position
from squat.model import ModelConfig, SquatModel
from squat.scenes import task_view
from squat.selection import keep_count, select_top_rho
from squat.training import LossConfig, TrainSchedule, prepare, scene_losses, train

VERDICTS: list[str] = []

SEEDS = range(5)
VARIANTS = ("esm", "full", "none", "oracle", "esm:n2n+n2e")
# distractor-heavy eval set: half of all detections are distractors
HEAVY = {"distractor_rate": 0.5}
HEAVY_SCENES = 200


def verdict(num: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {num:>2}  {title}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------- shared training runs

@functools.cache
def train_data(seed: int):
    return synthesize(SynthConfig(seed=seed), "train")


@functools.cache
def default_eval(seed: int):
    return synthesize(SynthConfig(num_scenes=50, seed=seed), "eval")


@functools.cache
def heavy_eval(seed: int):
    return synthesize(SynthConfig(num_scenes=HEAVY_SCENES, seed=seed, **HEAVY), "eval")


@functools.cache
def trained(seed: int, variant: str):
    """(model, train result, wall seconds) for one seed and one ablation variant."""
    source, _, mask = variant.partition(":")
    attention = tuple(mask.split("+")) if mask else ModelConfig().attention
    model = SquatModel(ModelConfig(attention=attention), seed=seed)
    start = time.perf_counter()
    result = train(train_data(seed), TrainSchedule(seed=seed, edge_source=source), model)
    return model, result, time.perf_counter() - start


@functools.cache
def heavy_mr50(seed: int, variant: str) -> float:
    model, _, _ = trained(seed, variant)
    return evaluate(model, heavy_eval(seed), "sgdet", 0.35, variant.partition(":")[0]).mean_recall[50]


# ---------------------------------------------------------------- 1-2 gradients

def test_c01_gradient_correctness():
    start = time.perf_counter()
    report = gradcheck(SquatModel(small_config(d=16, layers=2), seed=0), n=4, seed=0)
    seconds = time.perf_counter() - start
    worst = max(report.worst.values())
    ok = report.passed and worst < 1e-4 and seconds < 60
    verdict(1, "gradient check d=16 n=4 T=2", ok,
            f"max rel err {worst:.2e} over {len(report.worst)} groups, {seconds:.1f}s")


def test_c02_gradient_isolation():
    report = gradcheck(SquatModel(small_config(), seed=1), n=4, seed=1, entries_per_tensor=1)
    pce_max, esm_norms = [report.pce_esm_max], [report.esm_grad_norm]
    model = SquatModel(ModelConfig(), seed=0)
    esm_tensors = [t for k, t in model.named_parameters() if model.is_esm_param(k)]
    for item in prepare(synthesize(SynthConfig(num_scenes=5, seed=0)), "sgdet"):
        with nx.Tape() as tape:
            l_pce, l_esm, _ = scene_losses(model, item, 0.35, LossConfig())
            l_esm_sum = nx.add(nx.add(l_esm["q"], l_esm["n2e"]), l_esm["e2e"])
        g_pce = nx.backward(l_pce, tape)
        g_esm = nx.backward(l_esm_sum, tape)
        pce_max.append(max(float(np.abs(g_pce[t]).max()) for t in esm_tensors))
        esm_norms.append(float(np.sqrt(sum(float((g_esm[t] ** 2).sum()) for t in esm_tensors))))
    ok = all(v == 0.0 for v in pce_max) and all(v > 0.0 for v in esm_norms)
    verdict(2, "dL_PCE/dESM exactly zero", ok,
            f"max |dL_PCE/dESM| = {max(pce_max)!r}, min |dL_ESM/dESM| = {min(esm_norms):.3e} over {len(pce_max)} inputs")


# ---------------------------------------------------------------- 3-5 structure

def test_c03_selection_arithmetic():
    rng = np.random.default_rng(0)
    anchor = len(select_top_rho(rng.normal(size=30), 0.35)) == 10 and keep_count(30, 0.35) == 10
    full = select_top_rho(rng.normal(size=30), 1.0).selected.tolist() == list(range(30))
    mismatches = 0
    for _ in range(1000):
        m = int(rng.integers(1, 200))
        pct = int(rng.integers(1, 101))
        # coarse values force ties, which must go to the earlier edge
        scores = np.round(rng.normal(size=m), int(rng.integers(0, 3)))
        k = max(1, pct * m // 100)
        oracle = sorted(sorted(range(m), key=lambda e: (-scores[e], e))[:k])
        if select_top_rho(scores, pct / 100).selected.tolist() != oracle:
            mismatches += 1
    ok = anchor and full and mismatches == 0
    verdict(3, "top-rho selection", ok,
            f"30 @ 0.35 -> 10: {anchor}, 30 @ 1.0 -> all: {full}, sort-oracle mismatches {mismatches}/1000")


def test_c04_passthrough():
    cfg = ModelConfig()
    broken = 0
    for seed in range(20):
        model = SquatModel(cfg, seed=seed)
        dets = random_scene(4 + seed % 5, cfg.d_v, 8, seed)
        out = model.run(dets, 0.2 + 0.03 * seed, keep_states=True)
        E0, ET = out.prediction.states[0].E.data, out.prediction.states[-1].E.data
        outside = np.setdiff1d(np.arange(len(E0)), out.omegas[0])
        broken += not np.array_equal(ET[outside], E0[outside])
    verdict(4, "unselected edge rows pass through bitwise", broken == 0, f"{20 - broken}/20 passes exact")


def test_c05_permutation_equivariance():
    model = SquatModel(ModelConfig(), seed=0)
    rng = np.random.default_rng(5)
    worst = 0.0
    for scene in synthesize(SynthConfig(num_scenes=10, seed=5), "eval"):
        dets = task_view(scene, "sgdet").detections
        n = len(dets)
        base = model.run(dets, 0.35).prediction.probs
        for _ in range(10):
            perm = rng.permutation(n)
            probs = model.run([dets[p] for p in perm], 0.35).prediction.probs
            for i in range(n):
                for j in range(n):
                    if i != j:
                        diff = np.abs(probs[edge_position(n, i, j)] - base[edge_position(n, perm[i], perm[j])]).max()
                        worst = max(worst, float(diff))
    verdict(5, "permutation equivariance, 10 scenes x 10 perms", worst <= 1e-9, f"max deviation {worst:.2e}")


# ---------------------------------------------------------------- 6 metrics

def test_c06_metric_oracle():
    ks = (2, 5, 20, 50, 100)
    rule = MatchRule("gt_boxes")
    report = compute_report(fx.results(), fx.scenes(), rule, fx.P, ks=ks)
    oracle = fx.brute_force(fx.probabilities(), ks)
    exact = all(
        report.recall[K] == oracle["R"][K]
        and report.mean_recall[K] == oracle["mR"][K]
        and report.ng_mean_recall[K] == oracle["ng-mR"][K]
        and report.f[K] == oracle["F"][K]
        for K in ks
    ) and report.wmap_rel == oracle["wmap_rel"] and report.wmap_phr == oracle["wmap_phr"]
    combo = report.score_wtd == 0.2 * report.recall[50] + 0.4 * report.wmap_rel + 0.4 * report.wmap_phr
    combo = combo and abs(report.score_wtd - oracle["score_wtd"]) < 1e-15
    f100 = 100 * f_at_k(0.358, 0.126)
    anchor = abs(f100 - 18.7) <= 0.05
    ok = exact and combo and anchor
    verdict(6, "metrics vs brute force", ok,
            f"fixture exact: {exact}, score_wtd 0.2/0.4/0.4: {combo}, "
            f"F@100(35.8, 12.6) = {f100:.4f} vs 18.7 +- 0.05: {anchor}")


# ---------------------------------------------------------------- 7-9 training runs

def test_c07_learnability():
    rows, good = [], 0
    for seed in SEEDS:
        model, result, seconds = trained(seed, "esm")
        ev = default_eval(seed)
        mr = evaluate(model, ev, "sgdet", 0.35, "esm").mean_recall[50]
        base = random_baseline(ev, model.config.num_predicates).mean_recall[50]
        loss = result.totals(2)
        tenth = max(1, len(loss) // 10)
        falling = loss[-tenth:].mean() < loss[:tenth].mean()
        ok = mr >= 3 * base and falling and seconds < 600
        good += ok
        rows.append(f"s{seed} {mr:.3f}/{base:.3f} {'ok' if ok else 'x'} {seconds:.0f}s")
    verdict(7, "learnability mR@50 >= 3x random, loss falls", good >= 4, f"{good}/5 seeds [{'; '.join(rows)}]")


def test_c08_edge_source_ablation():
    order_wins, esm_wins, rows = 0, 0, []
    for seed in SEEDS:
        m = {v: heavy_mr50(seed, v) for v in ("oracle", "esm", "full", "none")}
        order_wins += m["oracle"] >= m["esm"] >= m["full"]
        esm_wins += m["esm"] > m["none"]
        rows.append("s{} o {oracle:.3f} e {esm:.3f} f {full:.3f} n {none:.3f}".format(seed, **m))
    ok = order_wins >= 4 and esm_wins >= 4
    verdict(8, "oracle >= esm >= full and esm > none (distractor-heavy mR@50)", ok,
            f"ordering {order_wins}/5, esm>none {esm_wins}/5 [{'; '.join(rows)}]")


def test_c09_quad_attention_ablation():
    wins, rows = 0, []
    for seed in SEEDS:
        full, reduced = heavy_mr50(seed, "esm"), heavy_mr50(seed, "esm:n2n+n2e")
        wins += full > reduced
        rows.append(f"s{seed} {full:.3f} vs {reduced:.3f}")
    verdict(9, "four attentions beat {n2n, n2e} (mR@50)", wins >= 4, f"{wins}/5 seeds [{'; '.join(rows)}]")


# ---------------------------------------------------------------- 10 determinism

SMALL_RUN = {
    "model": {"d": 16, "heads": 2, "d_h": 8, "d_g": 4},
    "synth": {"d_v": 6, "num_scenes": 12, "object_count_range": [3, 5], "num_object_classes": 5,
              "num_predicate_classes": 3},
    "schedule": {"esm_pretrain_iters": 3, "main_iters": 8},
    "eval_scenes": 6,
    "layers": 1,
}


def test_c10_determinism_and_round_trips(tmp_path):
    checks = {}

    scenes = synthesize(SynthConfig(num_scenes=20, seed=3, d_v=8), "train")
    states = []
    for _ in range(2):
        model = SquatModel(ModelConfig(d_v=8, d=16, heads=2, d_h=8, d_g=4, layers=2), seed=3)
        result = train(scenes, TrainSchedule(esm_pretrain_iters=10, main_iters=40, seed=3), model)
        states.append((model.state_dict(), result.totals()))
    (a, ta), (b, tb) = states
    checks["training bitwise"] = all(np.array_equal(a[k], b[k]) for k in a) and np.array_equal(ta, tb)

    header = dataset_header(8, 8, 6, split="train")
    first, second = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
    write_dataset(scenes, first, header)
    header_back, back = read_dataset(first)
    write_dataset(back, second, header_back)
    same_arrays = all(
        np.array_equal(getattr(d0, f), getattr(d1, f))
        for s0, s1 in zip(scenes, back) for d0, d1 in zip(s0.detections, s1.detections)
        for f in ("box", "visual_feature", "class_scores")
    )
    checks["dataset"] = first.read_bytes() == second.read_bytes() and same_arrays

    ck = tmp_path / "ck.json"
    save_checkpoint(model, ck, iteration=50)
    loaded, _ = load_checkpoint(ck)
    dets = task_view(scenes[0], "sgdet").detections
    same_state = all(np.array_equal(v, loaded.state_dict()[k]) for k, v in model.state_dict().items())
    same_out = np.array_equal(model.run(dets, 0.35).prediction.logits.data, loaded.run(dets, 0.35).prediction.logits.data)
    checks["checkpoint"] = same_state and same_out

    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(SMALL_RUN))
    data, run = tmp_path / "data", tmp_path / "run"
    rc = cli_main(["synth", "--config", str(cfg), "--out", str(data), "--seed", "4"])
    rc |= cli_main(["train", "--config", str(cfg), "--data", str(data / "train.ndjson"), "--out", str(run)])
    reports = []
    for k in range(2):
        out = tmp_path / f"eval{k}"
        rc |= cli_main(["eval", "--data", str(data / "eval.ndjson"), "--checkpoint", str(run / "checkpoint.json"),
                        "--out", str(out)])
        reports.append(((out / "report.json").read_bytes(), (out / "report.txt").read_bytes()))
    checks["eval bytes"] = rc == 0 and reports[0] == reports[1]

    verdict(10, "determinism and round-trips", all(checks.values()),
            ", ".join(f"{k}: {v}" for k, v in checks.items()))
