"""Acceptance gate. Each test records one PASS/FAIL line per criterion.

The study fixtures train every method on the default synthetic spec for
three seeds and are shared across the criteria that need them.
"""
import time

import numpy as np
import pytest
import torch
from conftest import make_unc, record_verdict
from oracles import brute_force_diffusion, central_difference, enumerate_instances, random_loss_case, relative_error

from tsphase.cli import main
from tsphase.core import AnnotationSet, TrainConfig
from tsphase.diffusion import temporal_diffusion
from tsphase.experiments import cleaned_ground_truth, run_method
from tsphase.metrics import phase_metrics
from tsphase.synthetic import SynthSpec, generate_split, reannotate
from tsphase.training import masked_cross_entropy, smoothing_loss

SEEDS = (0, 1, 2)
TIME_LIMIT = 600.0


@pytest.fixture(scope="session")
def studies():
    """Every training run the quantitative criteria need, per seed."""
    out = {}
    for seed in SEEDS:
        train, test = generate_split(seed, SynthSpec())
        cfg = TrainConfig.desk_scale(seed=seed)
        runs = {m: run_method(train, test, m, cfg) for m in ("uatd", "naive", "uniform")}
        pseudo = runs["uatd"].result.final_labels
        for kind in ("none", "uatd"):
            labels = cleaned_ground_truth(train, kind, pseudo)
            runs[f"gt_{kind}"] = run_method(train, test, "fixed", cfg, fixed_labels=labels)
        annotations = {"uatd": train, "naive": train, "uniform": train}
        for policy in ("start", "middle", "end"):
            placed = reannotate(train, policy, seed)
            runs[f"policy_{policy}"] = run_method(placed, test, "uatd", cfg)
            annotations[f"policy_{policy}"] = placed
        out[seed] = {"train": train, "runs": runs, "annotations": annotations}
    return out


def _accuracies(studies, name):
    return [studies[s]["runs"][name].accuracy for s in SEEDS]


def _fmt(values):
    return "[" + ", ".join(f"{v:.2f}" for v in values) + "]"


def test_01_diffusion_oracle_equivalence():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    mismatches = checked = 0
    for T, C, stamps, pred, unc, tau in enumerate_instances(rng, 1000):
        ann = AnnotationSet("x", T, C, tuple(stamps))
        u = make_unc(pred, unc, C)
        for mode in ("contiguous", "filter"):
            got = temporal_diffusion(u, ann, tau, mode).labels.tolist()
            mismatches += got != brute_force_diffusion(pred, unc, stamps, tau, mode)
            checked += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10.0
    record_verdict("01 diffusion oracle equivalence", ok,
                   f"{checked} cases, {mismatches} mismatches, {elapsed:.2f}s (< 10s)")
    assert ok


def test_02_anchor_preservation(studies):
    violations = snapshots = 0
    for seed in SEEDS:
        study = studies[seed]
        for name, videos in study["annotations"].items():
            for snap in study["runs"][name].result.history:
                snapshots += 1
                for _, ann in videos:
                    labels = snap.labels[ann.sequence_id].labels
                    violations += sum(labels[t - 1] != c for t, c in ann.timestamps)
    ok = violations == 0
    record_verdict("02 anchor preservation", ok, f"{snapshots} snapshots, {violations} violations")
    assert ok


def test_03_labelling_rate_growth(studies):
    details, ok = [], True
    for seed in SEEDS:
        train = studies[seed]["train"]
        rows = studies[seed]["runs"]["uatd"].history_quality([a for _, a in train])
        rates = [r["rate"] for r in rows]
        n = sum(len(a.timestamps) for _, a in train)
        t = sum(a.num_frames for _, a in train)
        starts = abs(rates[0] - 100.0 * n / t) < 1e-9
        grows = all(b > a for a, b in zip(rates, rates[1:]))
        ok &= starts and grows
        stalls = [
            f"{a['stage']} {a['loop']}.{a['round']} -> {b['stage']} {b['loop']}.{b['round']}: "
            f"{a['rate']:.4f}% -> {b['rate']:.4f}%"
            for a, b in zip(rows, rows[1:])
            if not b["rate"] > a["rate"]
        ]
        details.append(f"seed {seed}: {rates[0]:.2f}% -> {rates[-1]:.2f}%"
                       + (f" (not strictly increasing at {'; '.join(stalls)})" if stalls else ""))
    record_verdict("03 labelling-rate growth", ok, "; ".join(details))
    assert ok


def test_04_pseudo_label_accuracy_and_runtime(studies):
    spatial_end, overall, seconds = [], [], []
    for seed in SEEDS:
        train = studies[seed]["train"]
        run = studies[seed]["runs"]["uatd"]
        rows = run.history_quality([a for _, a in train])[1:]
        spatial = [r for r in rows if r["stage"] == "spatial"]
        spatial_end.append(spatial[-1]["accuracy"])
        overall.append(min(r["accuracy"] for r in rows))
        seconds.append(run.seconds)
    ok = min(spatial_end) >= 95.0 and min(overall) >= 95.0 and max(seconds) < TIME_LIMIT
    record_verdict(
        "04 pseudo-label accuracy >= 95% and runtime < 10 min", ok,
        f"after spatial phase {_fmt(spatial_end)}, min over all snapshots {_fmt(overall)}, "
        f"run time {_fmt(seconds)} s",
    )
    assert ok


def test_05_method_ordering(studies):
    ours, naive, uniform = (_accuracies(studies, m) for m in ("uatd", "naive", "uniform"))
    ok = all(o > n and o > u for o, n, u in zip(ours, naive, uniform))
    record_verdict("05 UATD > Uniform and UATD > Naive on every seed", ok,
                   f"UATD {_fmt(ours)}, Naive {_fmt(naive)}, Uniform {_fmt(uniform)}; "
                   f"means {np.mean(ours):.2f} / {np.mean(naive):.2f} / {np.mean(uniform):.2f}")
    assert ok


def test_06_cleaning_improves_training(studies):
    raw, cleaned = _accuracies(studies, "gt_none"), _accuracies(studies, "gt_uatd")
    ok = all(c >= r for c, r in zip(cleaned, raw))
    record_verdict("06 GT masked by UATD >= raw GT on every seed", ok,
                   f"masked {_fmt(cleaned)}, raw {_fmt(raw)}")
    assert ok


def test_07_gradient_checks():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        probs, labels, gamma = random_loss_case(rng)
        for fn in (
            lambda p: masked_cross_entropy(p, labels),
            lambda p: smoothing_loss(p, gamma),
        ):
            x = torch.tensor(probs, requires_grad=True)
            fn(x).backward()
            numeric = central_difference(lambda a: fn(torch.tensor(a)).item(), probs)
            worst = max(worst, relative_error(x.grad.numpy(), numeric))
    # truncation branch: |log 0.9 - log 0.001| > gamma contributes exactly gamma
    p = torch.tensor([[0.9, 0.1], [0.001, 0.999]], dtype=torch.float64)
    gamma = 4.0
    expected = (gamma + np.log(0.999 / 0.1) ** 2) / (2 * 2)
    exact = smoothing_loss(p, gamma).item() == pytest.approx(expected, abs=1e-15)
    ok = worst <= 1e-4 and exact
    record_verdict("07 loss gradient checks", ok,
                   f"max relative error {worst:.2e} (<= 1e-4), truncation branch exact: {exact}")
    assert ok


def test_08_metric_identities():
    rng = np.random.default_rng(8)
    violations = 0
    for _ in range(1000):
        T, C = int(rng.integers(1, 60)), int(rng.integers(1, 7))
        gt = rng.integers(1, C + 1, size=T)
        pred = rng.integers(1, C + 1, size=T)
        m = phase_metrics(pred, gt)
        violations += sum(m.jaccard[c] > min(m.precision[c], m.recall[c]) + 1e-12 for c in m.classes)
        p = phase_metrics(gt, gt)
        violations += p.accuracy != 100.0
        violations += any(p.precision[c] != 100.0 or p.recall[c] != 100.0 or p.jaccard[c] != 100.0
                          for c in p.classes)
    ok = violations == 0
    record_verdict("08 metric identities", ok, f"1000 pairs, {violations} violations")
    assert ok


def test_09_timestamp_position_effect(studies):
    start, middle, end = (_accuracies(studies, f"policy_{p}") for p in ("start", "middle", "end"))
    ok = all(m >= s and m >= e for s, m, e in zip(start, middle, end))
    record_verdict("09 middle policy >= start and end on every seed", ok,
                   f"start {_fmt(start)}, middle {_fmt(middle)}, end {_fmt(end)}")
    assert ok


CLI_CONFIG = """\
num_videos = 6
num_test = 2
t_min = 60
t_max = 80
phase_min = 12
phase_max = 25
ambiguity = 2
hidden = 16
layers = 4
channels = 16
spatial_epochs = 5
temporal_epochs = 2
"""


def _snapshot(folder):
    return {str(p.relative_to(folder)): p.read_bytes() for p in sorted(folder.rglob("*"))
            if p.is_file() and p.suffix != ".npz"}


def test_10_cli_determinism(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(CLI_CONFIG)

    def run(tag):
        root = tmp_path / tag
        data = str(root / "data")
        steps = [
            ["synth", "--seed", "5", "--out", data],
            ["train", "--data", data, "--seed", "5", "--out", str(root / "train")],
            ["diffuse", "--data", data, "--checkpoint", str(root / "train" / "model.npz"),
             "--out", str(root / "diffuse")],
            ["baseline", "--kind", "uniform", "--data", data, "--out", str(root / "uniform")],
            ["clean", "--kind", "uatd", "--data", data, "--pseudo", str(root / "diffuse" / "labels"),
             "--out", str(root / "clean")],
            ["eval", "--data", data, "--pred", str(root / "train" / "pred"), "--out", str(root / "eval")],
        ]
        codes = [main(step + ["--config", str(cfg)]) for step in steps]
        return codes, _snapshot(root)

    codes_a, files_a = run("a")
    codes_b, files_b = run("b")
    differing = sorted(k for k in files_a if files_a[k] != files_b.get(k))
    ok = codes_a == codes_b == [0] * len(codes_a) and not differing and files_a.keys() == files_b.keys()
    record_verdict("10 CLI determinism", ok,
                   f"{len(files_a)} output files compared, {len(differing)} differ; exit codes {codes_a}")
    assert ok
