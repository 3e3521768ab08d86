"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Criteria 1-3 rerun the unit suite by marker in a fresh interpreter and time
it. Criteria 4-7 train real models on shared session data. Criterion 8 runs
the command line twice in separate processes and compares the outputs.
"""
import json
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from amodalseg.ablation import AblationSpec, ordering_checks, run_ablation
from amodalseg.config import TrainConfig
from amodalseg.pipeline import evaluate_predictions, predict_scenes
from amodalseg.scenes import DEFAULT_CATEGORIES, SceneConfig, generate_scenes
from amodalseg.train import cache_priors, run_diffusion_training, train

TESTS = Path(__file__).resolve().parent
UNIT_FILES = sorted(str(p) for p in TESTS.glob("test_*.py") if p.name != "test_acceptance.py")

TRAIN_SEED, TEST_SEED = 1, 2
DIFFUSION_SCENES = 400  # diffusion model training set
AIS_SCENES = 200  # AIS training set for criteria 5 and 6 (first scenes of the same split)
TEST_SCENES = 200
ABLATION_EVAL_SCENES = 100
OVERFIT_SCENES, OVERFIT_ITERS = 16, 5000
GAIN_ITERS = 20000
ABLATION_ITERS = 3000
SEEDS = (0, 1, 2)


def _pytest_by_marker(marker: str, limit_s: float):
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", "-m", marker,
                           *UNIT_FILES], capture_output=True, text=True, cwd=TESTS.parent)
    elapsed = time.perf_counter() - start
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    return proc.returncode == 0 and elapsed < limit_s, elapsed, summary, proc


def test_criterion_1_invariant_suite(acceptance):
    ok, elapsed, summary, proc = _pytest_by_marker("not oracle and not gradcheck", 120)
    acceptance(1, ok, f"unit/property suite {summary!r} in {elapsed:.1f}s (limit 120s)")
    assert ok, proc.stdout[-3000:]


def test_criterion_2_oracle_equivalence(acceptance):
    ok, elapsed, summary, proc = _pytest_by_marker("oracle", 120)
    acceptance(2, ok, f"oracle tests (matrix power 1e-8, exhaustive AP, bilinear 1e-6) {summary!r} "
                      f"in {elapsed:.1f}s (limit 120s)")
    assert ok, proc.stdout[-3000:]


def test_criterion_3_gradient_checks(acceptance):
    ok, elapsed, summary, proc = _pytest_by_marker("gradcheck", 300)
    acceptance(3, ok, f"gradient checks (1e-3 relative, >=20 weights/layer) {summary!r} "
                      f"in {elapsed:.1f}s (limit 300s)")
    assert ok, proc.stdout[-3000:]


# -- trained-model criteria ----------------------------------------------------------

@pytest.fixture(scope="session")
def data():
    train_scenes = generate_scenes(SceneConfig(seed=TRAIN_SEED), DIFFUSION_SCENES)
    test_scenes = generate_scenes(SceneConfig(seed=TEST_SEED), TEST_SCENES)
    return train_scenes, test_scenes, list(DEFAULT_CATEGORIES)


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def base_config(workdir):
    return TrainConfig(output_dir=str(workdir / "ais"), prior_cache_dir=str(workdir / "cache"),
                       diffusion_checkpoint=str(workdir / "diffusion.aisd"), log_interval=500)


@pytest.fixture(scope="session")
def diffusion(data, base_config):
    train_scenes, _, cats = data
    return run_diffusion_training(base_config, train_scenes, len(cats))


@pytest.mark.slow
def test_criterion_4_overfit(acceptance, data, diffusion, base_config):
    train_scenes, _, cats = data
    scenes = train_scenes[:OVERFIT_SCENES]
    cfg = base_config.replace(iterations=OVERFIT_ITERS)
    priors = cache_priors(diffusion, scenes, cfg)["priors"]
    ious = []
    for seed in SEEDS:
        result = train(cfg.replace(seed=seed), scenes, diffusion, cats, priors=priors, write_checkpoints=False)
        preds = predict_scenes(result.model, diffusion, scenes, cfg.T_sample, cfg.tau_exponent)
        ious.append(evaluate_predictions(scenes, preds, cats).mean_amodal_iou)
    ok = min(ious) >= 0.9
    acceptance(4, ok, f"{OVERFIT_SCENES} scenes x {OVERFIT_ITERS} it, mean training amodal IoU per seed "
                      f"{[round(v, 4) for v in ious]} (need >= 0.9 each)")
    assert ok


@pytest.mark.slow
def test_criterion_5_amodal_gain(acceptance, data, diffusion, base_config):
    train_scenes, test_scenes, cats = data
    scenes = train_scenes[:AIS_SCENES]
    cfg = base_config.replace(iterations=GAIN_ITERS, seed=0)
    result = train(cfg, scenes, diffusion, cats, write_checkpoints=False)
    preds = predict_scenes(result.model, diffusion, test_scenes, cfg.T_sample, cfg.tau_exponent)
    occ = evaluate_predictions(test_scenes, preds, cats).occluded
    gain = occ["paired_difference"]
    ok = gain >= 0.05
    acceptance(5, ok, f"{GAIN_ITERS} it, {occ['count']} occluded test instances: amodal IoU "
                      f"{occ['mean_amodal_iou']:.4f} vs visible copy {occ['mean_visible_copy_iou']:.4f}, "
                      f"paired gain {gain:.4f} (need >= 0.05)")
    assert ok


@pytest.fixture(scope="session")
def ablation_report(data, diffusion, base_config, workdir):
    train_scenes, test_scenes, cats = data
    spec = AblationSpec(seeds=list(SEEDS), T_sample=[10, 50], tau_exponent=[base_config.tau_exponent],
                        prior_diff_rois=64)
    cfg = base_config.replace(iterations=ABLATION_ITERS, T_sample=10)
    report = run_ablation(spec, cfg, train_scenes[:AIS_SCENES], test_scenes[:ABLATION_EVAL_SCENES], cats,
                          diffusion, work_dir=workdir / "ablation")
    (workdir / "ablation.json").write_text(json.dumps(report, indent=1))
    return report


@pytest.mark.slow
def test_criterion_6_condition_ablation(acceptance, ablation_report):
    checks = ordering_checks(ablation_report)
    rows = {r["label"]: (round(r["median_ap"], 4), [round(x["ap"], 4) for x in r["runs"]])
            for r in ablation_report["rows"]}
    ok = all(checks[k] for k in ("both_ge_category", "both_ge_occluding", "category_ge_none",
                                 "occluding_ge_none", "gap_ok"))
    acceptance(6, ok, f"median AP (per-seed) {rows}; both - none = {checks['both_minus_none'] * 100:.2f} "
                      f"AP points (need >= 1), ordering {({k: v for k, v in checks.items() if k != 'both_minus_none'})}")
    assert ok


@pytest.mark.slow
def test_criterion_7_timestep_stability(acceptance, ablation_report):
    sweep = ablation_report["sweeps"]["T_sample"]
    ap10 = float(np.median([e["ap"] for e in sweep if e["T_sample"] == 10]))
    ap50 = float(np.median([e["ap"] for e in sweep if e["T_sample"] == 50]))
    diffs = [e["prior_mean_abs_diff_vs_first"] for e in sweep if e["T_sample"] == 50]
    gap = abs(ap10 - ap50)
    ok = gap <= 0.02 and max(diffs) <= 0.1
    acceptance(7, ok, f"median AP T=10 {ap10:.4f}, T=50 {ap50:.4f}, gap {gap * 100:.2f} points (need <= 2); "
                      f"prior mean abs diff over 64 ROIs per seed {[round(d, 4) for d in diffs]} (need <= 0.1)")
    assert ok


# -- determinism -----------------------------------------------------------------------

def _cli(*argv):
    proc = subprocess.run([sys.executable, "-m", "amodalseg", *map(str, argv)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_determinism(acceptance, tmp_path):
    work = tmp_path / "run"
    snapshots = []
    for _ in range(2):
        if work.exists():
            shutil.rmtree(work)
        work.mkdir()
        cfg = {"train_dataset": str(work / "train"), "eval_dataset": str(work / "test"),
               "output_dir": str(work / "ais"), "diffusion_checkpoint": str(work / "diffusion.aisd"),
               "prior_cache_dir": str(work / "cache"), "iterations": 20, "checkpoint_interval": 10,
               "diffusion_iterations": 40, "diffusion_batch_size": 16, "T_sample": 3, "log_interval": 10}
        (work / "config.json").write_text(json.dumps(cfg))
        _cli("gen-data", "--seed", 11, "--scenes", 8, "--out", work / "train")
        _cli("gen-data", "--seed", 12, "--scenes", 4, "--out", work / "test")
        _cli("train-diffusion", "--config", work / "config.json")
        _cli("train-ais", "--config", work / "config.json")
        _cli("eval", "--checkpoint", work / "ais" / "model_final.aisd", "--dataset", work / "test",
             "--out", work / "report.json")
        snapshots.append(_tree(work))
    first, second = snapshots
    groups = {"gen-data": ("train/", "test/"), "train-diffusion": ("diffusion.aisd",),
              "train-ais": ("ais/",), "eval": ("report.",)}
    status = {}
    for name, prefixes in groups.items():
        files = [k for k in first if k.startswith(prefixes)]
        status[name] = bool(files) and all(first[k] == second.get(k) for k in files)
    ok = all(status.values()) and set(first) == set(second)
    acceptance(8, ok, f"two runs in fresh processes, byte-identical outputs: {status} "
                      f"({len(first)} files compared)")
    assert ok
