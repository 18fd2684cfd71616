"""End-to-end acceptance checks on the default synthetic benchmark.

Each test prints one ``PASS``/``FAIL`` line with the measured numbers, then
asserts. The ablation grid (seven trained rows plus the random-category
and no-intra variants, five seeds) is trained once per session and shared.
"""

import json
import time
from dataclasses import dataclass, field
from dataclasses import replace as dc_replace

import numpy as np
import pytest

from nestlab import losses as L
from nestlab.cli import main
from nestlab.data import ClassPrior
from nestlab.experiments import ENSEMBLE_ROW, random_selection_config, row_config, run_rows
from nestlab.metrics import hardest_negative_scores
from nestlab.train import TrainConfig, train

import oracles
from gradsuite import run_suite

SEEDS = (1, 2, 3, 4, 5)
MARGIN = 0.5  # accuracy points
GRID_BUDGET_S = 15 * 60
GRADIENT_BUDGET_S = 60
HARD_THRESHOLD = 0.4


def _verdict(capsys, name: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[acceptance] {'PASS' if ok else 'FAIL'} {name}: {detail}")


def _benchmark() -> TrainConfig:
    cfg = TrainConfig()
    d, lc = cfg.dataset, cfg.loss
    assert (d.num_classes, d.feature_dim, d.n_max, d.imbalance_factor, d.test_per_class) == (20, 16, 500, 100.0, 50)
    assert (lc.num_experts, lc.copies, lc.beta, lc.lam, cfg.epochs) == (2, 4, 0.3, 0.6, 100)
    return cfg


@dataclass
class Grid:
    acc: dict = field(default_factory=dict)  # label -> list of points per seed
    runs: dict = field(default_factory=dict)  # label -> list of RunResult per seed
    seconds: float = 0.0


@pytest.fixture(scope="module")
def grid() -> Grid:
    base = _benchmark()
    g = Grid()
    started = time.perf_counter()
    for seed in SEEDS:
        for label, (single, _, res) in run_rows(base, seed).items():
            g.acc.setdefault(label, []).append(100 * single)
            g.runs.setdefault(label, []).append(res)
    g.seconds = time.perf_counter() - started
    full = row_config(base, "full")
    extra = {
        "full/random": random_selection_config(full),
        # the complete method with only intra-expert distillation switched off
        "full/no-intra": dc_replace(full, loss=dc_replace(full.loss, use_intra=False)),
    }
    for label, cfg in extra.items():
        for seed in SEEDS:
            res = train(cfg.with_seed(seed))
            g.acc.setdefault(label, []).append(100 * res.final.single_accuracy)
            g.runs.setdefault(label, []).append(res)
    return g


# ----------------------------------------------------------------- 1


def test_gradient_suite(capsys):
    started = time.perf_counter()
    worst = run_suite(instances=100, seed=2024)
    elapsed = time.perf_counter() - started
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    ok = not bad and elapsed < GRADIENT_BUDGET_S
    top = max(worst.values())
    _verdict(capsys, "1 gradient suite", ok,
             f"{len(worst)} (op, detach) pairs x 100 instances, worst rel err {top:.2e}, {elapsed:.1f}s")
    assert not bad, bad
    assert elapsed < GRADIENT_BUDGET_S


# ----------------------------------------------------------------- 2


def _grid_instance(rng, K, T, B, C):
    return rng.uniform(-4, 4, size=(K, T, B, C)), rng.integers(0, C, size=B), ClassPrior(
        tuple(int(c) for c in rng.integers(1, 500, size=C))
    )


def test_reduction_identities(capsys):
    rng = np.random.default_rng(7)
    worst = {"balanced": 0.0, "partial": 0.0, "inter": 0.0, "intra": 0.0}
    exact = True
    for _ in range(50):
        C = int(rng.integers(2, 9))
        K, T, B = (int(v) for v in rng.integers(1, 4, size=3))
        z, y, prior = _grid_instance(rng, K, T, B, C)
        uniform = ClassPrior((int(rng.integers(1, 100)),) * C)
        worst["balanced"] = max(
            worst["balanced"], float(np.abs(L.balanced_prob(z, uniform).values - L.softmax_prob(z).values).max())
        )
        cfg = L.LossConfig(beta=1.0, num_experts=K, copies=T)
        assert cfg.c_hard(C) == C - 1
        b = L.total_loss(z, y, prior, cfg).values()
        worst["partial"] = max(
            worst["partial"], *(abs(b[f"{n}_p"] - b[f"{n}_g"]) for n in ("bil", "inter", "intra"))
        )
        one_k = L.total_loss(z[:1], y, prior, dc_replace(cfg, num_experts=1, use_inter=False)).values()
        full_k1 = L.total_loss(z[:1], y, prior, dc_replace(cfg, num_experts=1)).values()
        worst["inter"] = max(worst["inter"], abs(one_k["inter_g"]), abs(full_k1["inter_g"]), abs(full_k1["inter_p"]))
        one_t = L.total_loss(z[:, :1], y, prior, dc_replace(cfg, copies=1)).values()
        worst["intra"] = max(worst["intra"], abs(one_t["intra_g"]), abs(one_t["intra_p"]))
        plain = L.total_loss(z, y, prior, L.LossConfig(lam=0.0, use_nfl=False, num_experts=K, copies=T))
        exact &= plain.values()["total"] == plain.values()["bil_g"]
    ok = (worst["balanced"] <= 1e-12 and worst["partial"] <= 1e-9 and worst["inter"] == 0.0
          and worst["intra"] == 0.0 and exact)
    _verdict(capsys, "2 reduction identities", ok,
             f"balanced-softmax {worst['balanced']:.1e}, partial-global {worst['partial']:.1e}, "
             f"K=1 inter {worst['inter']}, T=1 intra {worst['intra']}, lambda=0 exact {exact}")
    assert ok


# ----------------------------------------------------------------- 3


def test_oracle_equivalence(capsys):
    rng = np.random.default_rng(11)
    rows, C = 10_000, 12
    # even rows come from a small integer range and are full of ties
    z = rng.normal(size=(1, 1, rows, C))
    z[0, 0, ::2] = rng.integers(-3, 4, size=(rows // 2, C))
    y = rng.integers(0, C, size=rows)
    c_hard = rng.integers(1, C, size=rows)
    mismatches = 0
    ties = 0
    for i in range(rows):
        expected = oracles.mine(z[0, 0, i], int(y[i]), int(c_hard[i]))
        got = list(L.hard_category_mine(z[0, 0, i], int(y[i]), int(c_hard[i])).indices)
        mismatches += got != expected
        ties += len(set(z[0, 0, i])) < C
    vec = L.hard_category_mask(z, y, 4)
    vec_bad = int(sum(
        sorted(np.flatnonzero(vec[0, 0, i]).tolist()) != oracles.mine(z[0, 0, i], int(y[i]), 4) for i in range(rows)
    ))

    worst = 0.0
    for _ in range(200):
        C = int(rng.integers(2, 7))
        K, T, B = (int(v) for v in rng.integers(1, 4, size=3))
        grid_z, labels, prior = _grid_instance(rng, K, T, B, C)
        cfg = L.LossConfig(beta=float(rng.uniform(0.05, 1.0)), num_experts=K, copies=T)
        ch = cfg.c_hard(C)
        log_n = prior.log_counts()
        got_inter = L.inter_partial_loss(grid_z, labels, prior, cfg).item()
        got_g, got_p = (t.item() for t in L.intra_losses(grid_z, labels, prior, cfg))
        exp_g, exp_p = oracles.enumerate_intra(grid_z, labels, log_n, ch)
        worst = max(
            worst,
            abs(got_inter - oracles.enumerate_inter_partial(grid_z, labels, log_n, ch)),
            abs(got_g - exp_g),
            abs(got_p - exp_p),
        )
    ok = mismatches == 0 and vec_bad == 0 and worst <= 1e-9
    _verdict(capsys, "3 oracle equivalence", ok,
             f"mining {rows} rows ({ties} with ties): {mismatches} row / {vec_bad} vectorized mismatches; "
             f"enumeration max abs err {worst:.1e}")
    assert ok


# ----------------------------------------------------------------- 4


def _inequality(acc, lo: str, hi: str, strict: bool, lo_values=None):
    a = np.asarray(lo_values if lo_values is not None else acc[lo])
    b = np.asarray(acc[hi])
    mean_ok = b.mean() > a.mean() if strict else b.mean() >= a.mean()
    seeds_ok = int((b - a >= MARGIN).sum())
    return mean_ok and seeds_ok >= 4, a.mean(), b.mean(), seeds_ok


def test_ablation_ordering(grid, capsys):
    acc = grid.acc
    best_single = np.max([acc["bil+nfl"], acc["bil+inter"], acc["bil+intra"]], axis=0)
    checks = [
        ("CE < BIL", _inequality(acc, "ce", "bil", True)),
        ("BIL < BIL+Inter", _inequality(acc, "bil", "bil+inter", True)),
        ("BIL < BIL+Intra", _inequality(acc, "bil", "bil+intra", True)),
        ("max(single component) <= full", _inequality(acc, None, "full", False, lo_values=best_single)),
        ("full <= ensemble", _inequality(acc, "full", ENSEMBLE_ROW, False)),
    ]
    means = ", ".join(f"{k} {np.mean(v):.2f}" for k, v in acc.items())
    all_ok = grid.seconds < GRID_BUDGET_S
    for name, (ok, a, b, n) in checks:
        all_ok &= ok
        _verdict(capsys, f"4 ordering {name}", ok, f"means {a:.2f} vs {b:.2f}, margin >= {MARGIN} on {n}/5 seeds")
    _verdict(capsys, "4 ordering runtime", grid.seconds < GRID_BUDGET_S, f"{grid.seconds:.0f}s; row means: {means}")
    assert all_ok


# ----------------------------------------------------------------- 5


def _ratios(pairs) -> str:
    return ", ".join(f"{f / b:.2f}" for f, b in pairs)


def test_uncertainty_reduction(grid, capsys):
    full = grid.runs["full"]
    inter = [(f.kl.inter_overall, b.kl.inter_overall) for f, b in zip(full, grid.runs["bil"])]
    intra = [(f.kl.intra_overall, b.kl.intra_overall) for f, b in zip(full, grid.runs["full/no-intra"])]
    n_inter = sum(f <= 0.5 * b for f, b in inter)
    n_intra = sum(f <= 0.5 * b for f, b in intra)
    ok = n_inter >= 4 and n_intra >= 4
    _verdict(capsys, "5 uncertainty reduction", ok,
             f"inter ratio full/BIL [{_ratios(inter)}] ({n_inter}/5); "
             f"intra ratio full/no-intra [{_ratios(intra)}] ({n_intra}/5)")
    assert ok


# ----------------------------------------------------------------- 6


def test_few_split_gain(grid, capsys):
    def few(label):
        return np.mean([100 * r.final.split_accuracy["few"] for r in grid.runs[label]])

    gain = few("full") - few("ce")
    ok = gain >= 10.0
    _verdict(capsys, "6 few-split gain", ok, f"full {few('full'):.2f} vs CE {few('ce'):.2f}, gain {gain:.2f} points")
    assert ok


# ----------------------------------------------------------------- 7


def test_hardest_negative_contraction(grid, capsys):
    fracs = []
    for full, bil in zip(grid.runs["full"], grid.runs["bil"]):
        f = float((hardest_negative_scores(full.model, full.test, 0)[0] > HARD_THRESHOLD).mean())
        b = float((hardest_negative_scores(bil.model, bil.test, 0)[0] > HARD_THRESHOLD).mean())
        fracs.append((f, b))
    ok = all(f < b for f, b in fracs)
    _verdict(capsys, "7 hardest-negative contraction", ok,
             "fraction > 0.4 full vs BIL: " + ", ".join(f"{f:.3f}/{b:.3f}" for f, b in fracs))
    assert ok


# ----------------------------------------------------------------- 8


def test_mined_beats_random_categories(grid, capsys):
    mined, rand = np.mean(grid.acc["full"]), np.mean(grid.acc["full/random"])
    ok = mined - rand >= MARGIN
    _verdict(capsys, "8 mined vs random categories", ok,
             f"mined {mined:.2f} vs random {rand:.2f} (diff {mined - rand:+.2f}, need >= {MARGIN})")
    assert ok


# ----------------------------------------------------------------- 9


def test_manifest_replay_is_bit_identical(tmp_path, capsys):
    first, replay = tmp_path / "first", tmp_path / "replay"
    assert main(["train", "--out", str(first), "--seed", "3"]) == 0
    assert main(["train", "--config", str(first / "manifest.json"), "--out", str(replay)]) == 0
    same = {
        name: (first / name).read_bytes() == (replay / name).read_bytes()
        for name in ("result.json", "history.csv", "checkpoint.json")
    }
    manifest = json.loads((replay / "manifest.json").read_text())
    ok = all(same.values()) and manifest["checksums"]["result.json"] == json.loads(
        (first / "manifest.json").read_text()
    )["checksums"]["result.json"]
    _verdict(capsys, "9 determinism", ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
    assert ok


# ----------------------------------------------------------------- training sanity


def test_full_model_loss_decreases(grid, capsys):
    drops = [r.history[-1]["total"] < r.history[0]["total"] for r in grid.runs["full"]]
    ok = sum(drops) >= 4
    _verdict(capsys, "loss sanity", ok, f"final < first epoch total loss on {sum(drops)}/5 seeds")
    assert ok
