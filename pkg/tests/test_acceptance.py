"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The "standard ensemble" is 10 vanilla models x 5 retain channels, C=1000
classes, correlated per-input difficulty, seeded; protocol points average 20
seeded trials.
"""

import itertools
import json
import math

import numpy as np
import pytest

from fbi import cli
from fbi import distance as di
from fbi import family_sim as fs
from fbi import open_world as ow
from fbi import walled_garden as wg

S = di.SurjectedSeq


def report(num, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"[acceptance {num:>2}] {name}: {status}" + (f" ({detail})" if detail else ""))
    assert ok, f"criterion {num} ({name}): {detail}"


# --- shared fixtures --------------------------------------------------------

STANDARD_DETECT_CFG = {
    "task": "detect",
    "n_vanilla": 10,
    "retain_grid": "0.9,0.85,0.8,0.75,0.7",
    "classes": 1000,
    "top_k": 1,
    "n_inputs": 4000,
    "l_grid": "20,50,100,500",
    "repetitions": 20,
    "calibration_negatives": 200,
    "negatives_per_trial": 10,
    "strategies": "entropy,split3070,all",
    "holdout_families": 2,
    "entropy_pool": 1000,
    "difficulty_spread": 0.6,
    "alpha": 0.05,
    "seed": 0,
}


@pytest.fixture(scope="module")
def standard_rows():
    return ow.run_protocol(dict(STANDARD_DETECT_CFG))


def _metric(rows, strategy, L, metric):
    vals = [r["value"] for r in rows
            if r["strategy"] == strategy and r["L"] == L and r["metric"] == metric]
    return vals


# --- criteria ---------------------------------------------------------------


def test_criterion_1_distance_extremes():
    r_self = di.model_distance(S((0, 1, 0, 2), 2), S((0, 1, 0, 2), 2))
    # joint factorizes exactly: marginals 1/2-1/2, every cell 1/4
    r_indep = di.model_distance(S((0, 1, 0, 1), 1), S((0, 0, 1, 1), 1))
    ok = r_self.distance == 0.0 and r_indep.distance == 1.0
    report(1, "distance extremes", ok,
           f"self={r_self.distance}, factorizing={r_indep.distance}")


def test_criterion_2_mi_consistency_oracle():
    n, A, p = 10000, 0.8, 0.8
    inputs = [f"x{i:05d}" for i in range(n)]
    rng = np.random.default_rng(0)
    gt = {x: int(rng.integers(1000)) for x in inputs}
    gl = [gt[x] for x in inputs]
    parent = fs.gen_vanilla(fs.VanillaSpec("m", 1000, A, seed=1), inputs, gt)
    channel = fs.retain_channel(1, p)
    col = fs.gen_variant(parent, fs.VariantSpec("v", "m", channel, seed=2), gl, 1000)
    y = di.surject_column(parent, gl, 1)
    z = di.surject_column(col, gl, 1)
    hist = di.joint_histogram(z, y)
    mi_emp = di.empirical_mi(hist)
    mi_ana = di.channel_mi(channel.W, np.array([1 - A, A]))
    rep = di.distance_from_histogram(hist)
    W, p_y = channel.W, np.array([1 - A, A])
    p_z = p_y @ W
    h = lambda q: -sum(v * math.log2(v) for v in q if v > 0)
    d_ana = 1 - mi_ana / min(h(p_y), h(p_z))
    ok = abs(mi_emp - mi_ana) <= 0.05 and abs(rep.distance - d_ana) <= 0.05
    report(2, "MI consistency vs analytic channel", ok,
           f"|dMI|={abs(mi_emp - mi_ana):.4f}, |dD|={abs(rep.distance - d_ana):.4f}")


def test_criterion_3_theory_bound():
    grid = np.round(np.arange(0.45, 0.951, 0.05), 4)
    worst = 0.0
    n_checked = 0
    for A, B in itertools.product(grid, repeat=2):
        if A + B <= 1.0:
            continue
        bound = di.theory_lower_bound(di.BoundInput(float(A), float(B)))
        mi_max = di.max_mi_over_joint(float(A), float(B))
        denom = min(di._h(float(A)), di._h(float(B)))
        worst = max(worst, abs(bound - (1 - mi_max / denom)))
        n_checked += 1
    diag_ok = all(
        di.theory_lower_bound(di.BoundInput(float(a), float(a))) == 0.0
        for a in grid if 2 * a > 1.0
    )
    # measured same-family distances on a seeded ensemble at L = 10000
    ens = fs.gen_ensemble(
        5, [("retain", fs.retain_channel(1, p)) for p in (0.9, 0.8, 0.7)],
        n_classes=1000, k=1, n_inputs=10000, seed=3,
    )
    gl = [ens.table.ground_truth[x] for x in ens.table.inputs]
    acc = {m: fs.accuracy(ens.table.column(m), gl) for m in ens.table.models}
    V = di.surjected_matrix(ens.table)
    row = {m: i for i, m in enumerate(ens.table.models)}
    slack_ok = True
    for m, doc in ens.manifest["models"].items():
        if doc["parent"] is None:
            continue
        d = di.model_distance(S(tuple(int(v) for v in V[row[m]]), 1),
                              S(tuple(int(v) for v in V[row[doc["parent"]]]), 1)).distance
        b = di.theory_lower_bound(di.BoundInput(acc[m], acc[doc["parent"]]))
        slack_ok &= d >= b - 0.05
    ok = worst <= 1e-5 and diag_ok and slack_ok
    report(3, "Appendix-style lower bound vs grid oracle", ok,
           f"max|closed-form - grid|={worst:.2e} over {n_checked} pairs; "
           f"diag zero={diag_ok}; measured >= bound-0.05: {slack_ok}")


def test_criterion_4_sequential_baseline_mc():
    rng = np.random.default_rng(7)
    trials = 1_000_000
    worst = 0.0
    for _ in range(5):
        n = int(rng.integers(2, 11))
        pos = rng.uniform(0.5, 6.0, n)
        neg = rng.uniform(0.5, 6.0, n)
        exact = wg.sequential_expected_queries(pos, neg)
        fam = rng.integers(0, n, size=trials)
        keys = rng.random((trials, n), dtype=np.float32)
        key_j = keys[np.arange(trials), fam]
        before = keys < key_j[:, None]
        before[np.arange(trials), fam] = False
        mc = (before @ neg + pos[fam]).mean()
        worst = max(worst, abs(mc - exact) / exact)
    ok = worst <= 0.005
    report(4, "sequential baseline vs 1e6-trial Monte-Carlo", ok,
           f"worst relative error {worst:.4%}")


def _toy_tables(n_tables=200, seed=42):
    rng = np.random.default_rng(seed)
    from conftest import make_table
    for _ in range(n_tables):
        n_models = int(rng.integers(2, 7))
        n_inputs = int(rng.integers(2, 11))
        k = int(rng.integers(1, 3))
        n_cls = int(rng.integers(k + 1, k + 4))
        cols = {}
        for i in range(n_models):
            if i > 0 and rng.random() < 0.25:  # force occasional duplicates
                cols[f"m{i}"] = list(cols[f"m{int(rng.integers(i))}"])
                continue
            cols[f"m{i}"] = [
                tuple(rng.permutation(n_cls)[:k].tolist()) for _ in range(n_inputs)
            ]
        t = make_table(cols, k=k)
        fam = {f"m{i}" for i in range(max(1, int(rng.integers(1, n_models))))}
        if fam < set(t.models):
            yield t, fam


def test_criterion_5_walled_garden_soundness():
    checked = separators = failures = 0
    ok = True
    why = ""
    for t, fam in _toy_tables():
        col = {m: tuple(t.cells[(m, x)] for x in t.inputs) for m in t.models}
        for target in t.models:
            out = wg.detect(t, fam, wg.replay_oracle(t, target))
            checked += 1
            in_f = target in fam
            dup = any(col[m] == col[target] for m in fam) and any(
                col[m] == col[target] for m in t.models if m not in fam
            )
            expected = (wg.Verdict.FAILURE if dup
                        else wg.Verdict.POSITIVE if in_f else wg.Verdict.NEGATIVE)
            if out.verdict != expected:
                ok, why = False, f"verdict {out.verdict} != {expected}"
                break
            if dup:
                failures += 1
            sep = any(
                not ({t.cells[(m, x)] for m in fam}
                     & {t.cells[(m, x)] for m in t.models if m not in fam})
                for x in t.inputs
            )
            if sep:
                separators += 1
                if out.queries_used != 1:
                    ok, why = False, f"separator but {out.queries_used} queries"
                    break
        if not ok:
            break
    report(5, "walled-garden soundness sweep", ok,
           why or f"{checked} runs, {separators} separator cases, {failures} failure cases")


def test_criterion_6_walled_garden_scale_shape():
    grid = (0.97, 0.94, 0.91, 0.88, 0.85)
    det_frac = {}
    ide_mean = {}
    for k in (1, 3, 5):
        ens = fs.gen_ensemble(
            10, [("retain", fs.retain_channel(k, p)) for p in grid],
            n_classes=1000, k=k, n_inputs=1500, seed=0, difficulty_spread=0.6,
        )
        t = ens.table
        part = ens.partitions["vanilla"]
        fam_ids = sorted(part.as_dict())
        det_q = []
        for fid in fam_ids:
            members = sorted(part.members(fid))
            variants = [m for m in members if m != fid]
            out = wg.detect(t, set(members), wg.replay_oracle(t, variants[0]))
            assert out.verdict is wg.Verdict.POSITIVE
            det_q.append(out.queries_used)
            other = fam_ids[(fam_ids.index(fid) + 1) % len(fam_ids)]
            out = wg.detect(t, set(members), wg.replay_oracle(t, other))
            assert out.verdict is wg.Verdict.NEGATIVE
            det_q.append(out.queries_used)
        det_frac[k] = float(np.mean(np.asarray(det_q) <= 3))
        rng = np.random.default_rng(1)
        targets = rng.choice(t.models, size=30, replace=False)
        single = ens.partitions["singleton"]
        qs = []
        for m in targets:
            out = wg.identify(t, single, wg.replay_oracle(t, m))
            assert out.family_id == m
            qs.append(out.queries_used)
        ide_mean[k] = float(np.mean(qs))
    ok = all(v >= 0.95 for v in det_frac.values()) and ide_mean[5] < ide_mean[1]
    report(6, "walled-garden scale shape", ok,
           f"detect<=3 queries: {det_frac}; identify mean queries: "
           f"{ {k: round(v, 2) for k, v in ide_mean.items()} }")


def test_criterion_7_open_world_fpr(standard_rows):
    fps = n = 0
    for strategy in ("entropy", "split3070", "all"):
        for L in (20, 50, 100, 500):
            per_trial = _metric(standard_rows, strategy, L, "fpr")
            fps += sum(v * STANDARD_DETECT_CFG["negatives_per_trial"] for v in per_trial)
            n += len(per_trial) * STANDARD_DETECT_CFG["negatives_per_trial"]
    fpr = fps / n
    limit = 0.05 + 3 * math.sqrt(0.05 * 0.95 / 200)
    ok = n >= 200 and fpr <= limit
    report(7, "open-world calibrated FPR", ok,
           f"FPR {fpr:.4f} over {n} fresh negatives, limit {limit:.3f}")


def test_criterion_8_open_world_tpr_shape(standard_rows):
    ok = True
    detail = []
    for strategy in ("entropy", "split3070", "all"):
        curve = [float(np.mean(_metric(standard_rows, strategy, L, "tpr")))
                 for L in (20, 50, 100, 500)]
        ok &= all(a <= b + 1e-12 for a, b in zip(curve, curve[1:]))
        ok &= curve[-1] >= 0.95
        detail.append(f"{strategy}: {[round(v, 3) for v in curve]}")
    report(8, "open-world TPR monotone, >=0.95 at L=500", ok, "; ".join(detail))


def test_criterion_9_strategy_ordering(standard_rows):
    ok = True
    detail = []
    for L in (20, 100):
        tprs = {s: np.array(_metric(standard_rows, s, L, "tpr"))
                for s in ("entropy", "split3070", "all")}
        for hi, lo in (("entropy", "split3070"), ("split3070", "all")):
            d = tprs[hi] - tprs[lo]
            sem = d.std(ddof=1) / math.sqrt(len(d)) if d.std(ddof=1) > 0 else 0.0
            stat = d.mean() + 1.645 * sem  # one-sided paired test
            ok &= stat >= 0
            detail.append(f"L={L} {hi}-{lo}: mean {d.mean():+.3f}")
    report(9, "selection-strategy TPR ordering", ok, "; ".join(detail))


def test_criterion_10_compound_boost_direction():
    cfg = {
        "task": "identify-variation", "n_vanilla": 10, "classes": 1000,
        "n_inputs": 3000, "l_grid": "60", "trials": 200, "seed": 0,
        "difficulty_spread": 0.6, "entropy_pool": 1000,
        "variation_procedures": "psiA:0.03,0.06,0.09,0.12;psiB:0.03,0.06,0.09,0.12",
    }
    rates = {r["metric"]: r["value"] for r in ow.run_protocol(cfg)}
    two = rates["correct_rate[close,median]"]
    one = rates["correct_rate[median]"]
    ok = two >= one
    report(10, "two-delegate compound boost direction", ok,
           f"close+median {two:.3f} vs median {one:.3f} over 200 trials")


def test_criterion_11_cli_determinism(tmp_path):
    spec = tmp_path / "spec.cfg"
    spec.write_text(
        "task = detect\nn_vanilla = 4\nretain_grid = 0.9,0.8\nclasses = 150\n"
        "n_inputs = 600\nl_grid = 50\nrepetitions = 3\ncalibration_negatives = 25\n"
        "strategies = all\nholdout_families = 1\nentropy_pool = 200\nseed = 5\n"
    )
    outputs = []
    for run_dir in ("a", "b"):
        d = tmp_path / run_dir
        d.mkdir()
        argsets = [
            ["simulate", "--spec", spec, "--out", d / "t.csv", "--gt-out", d / "gt.csv",
             "--partition-out", d / "p.json", "--manifest-out", d / "m.json"],
            ["distance-matrix", d / "t.csv", "--gt", d / "gt.csv", "--out", d / "dm.csv",
             "-L", "200", "--seed", "3"],
            ["detect-wg", d / "t.csv", "--family", "m01,m01v00,m01v01",
             "--blackbox", "replay:m01v00", "--out", d / "wg.json"],
            ["protocol", "--config", spec, "--out-csv", d / "rep.csv",
             "--out-json", d / "rep.json"],
        ]
        for argv in argsets:
            assert cli.main([str(a) for a in argv]) == 0
        outputs.append(b"".join(
            (d / f).read_bytes()
            for f in ("t.csv", "gt.csv", "p.json", "m.json", "dm.csv",
                      "wg.json", "rep.csv", "rep.json")
        ))
    ok = outputs[0] == outputs[1]
    report(11, "CLI reruns byte-identical", ok,
           f"{len(outputs[0])} bytes compared across 8 artifacts")
