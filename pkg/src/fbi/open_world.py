"""Statistical detection and identification when the black-box may be unknown.

The decision statistic is the normalized distance between the black-box's
surjected outputs and those of one or two delegate models per family. A
threshold tau is calibrated on negative pairs so the false positive rate
stays below a target alpha; identification takes the argmin family and
abstains when even the best distance is above tau.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass

import numpy as np

from . import distance, family_sim
from .corpus import PredictionTable, select_inputs
from .distance import SurjectedSeq, model_distance
from .errors import (
    ConfigError,
    DegenerateEvidence,
    EmptyDelegateSet,
    ParseError,
    TooFewNegatives,
)

DELEGATE_OPTIONS = ("close", "median", "far")


@dataclass(frozen=True)
class CalibratedTest:
    tau: float
    alpha: float
    L: int
    strategy: str
    negatives_used: int

    def as_dict(self):
        return {
            "tau": self.tau,
            "alpha": self.alpha,
            "L": self.L,
            "strategy": self.strategy,
            "negatives_used": self.negatives_used,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            tau=float(doc["tau"]),
            alpha=float(doc["alpha"]),
            L=int(doc["L"]),
            strategy=str(doc["strategy"]),
            negatives_used=int(doc["negatives_used"]),
        )


@dataclass(frozen=True)
class DelegateChoice:
    option: str
    delegate_ids: tuple[str, ...]


@dataclass(frozen=True)
class DetectionResult:
    positive: bool
    distance: float


@dataclass(frozen=True)
class IdentificationVerdict:
    decision: str | None  # family id, or None to abstain
    distances: dict[str, float]
    margin: float


def calibrate_from_distances(distances_neg, alpha, L=0, strategy="all") -> CalibratedTest:
    """Largest tau whose empirical FPR on the negative distances is <= alpha.

    A positive decision is distance < tau, so tau is the lower (inclusive)
    alpha-quantile of the sorted negative distances.
    """
    ds = sorted(float(d) for d in distances_neg)
    n = len(ds)
    if n < 20:
        raise TooFewNegatives(f"need at least 20 negative pairs, got {n}")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1): {alpha}")
    tau = ds[int(np.floor(alpha * n))]
    assert sum(d < tau for d in ds) <= alpha * n
    return CalibratedTest(tau=tau, alpha=alpha, L=L, strategy=strategy, negatives_used=n)


def calibrate_threshold(negative_pairs, alpha, L=0, strategy="all") -> CalibratedTest:
    """Calibrate tau from negative (black-box sequence, model sequence) pairs."""
    ds = [model_distance(z, y).distance for z, y in negative_pairs]
    return calibrate_from_distances(ds, alpha, L=L, strategy=strategy)


def detect_variant(blackbox_seq: SurjectedSeq, delegate_seqs, test: CalibratedTest) -> DetectionResult:
    """Compound-distance detection of the black-box against family delegates."""
    delegate_seqs = list(delegate_seqs)
    if not delegate_seqs:
        raise EmptyDelegateSet("need at least one delegate sequence")
    reports = [model_distance(blackbox_seq, d) for d in delegate_seqs]
    if all(r.degenerate for r in reports):
        raise DegenerateEvidence("all observed sequences are constant")
    d = min(r.distance for r in reports)
    return DetectionResult(positive=d < test.tau, distance=d)


def choose_delegate(
    family,
    anchor: str,
    table: PredictionTable,
    option: str,
    L: int,
    seed: int = 0,
    strategy: str = "all",
) -> DelegateChoice:
    """Pick the family member(s) at min / lower-median / max distance to the
    anchor model. `option` may combine choices, e.g. "close,median"."""
    members = sorted(family)
    if not members:
        raise EmptyDelegateSet("family is empty")
    options = [o.strip() for o in option.split(",") if o.strip()]
    for o in options:
        if o not in DELEGATE_OPTIONS:
            raise ConfigError(f"unknown delegate option {o!r}")
    subset = select_inputs(table, strategy, L, anchor_model=anchor, seed=seed,
                           known_set=table.models)
    refs = table.reference_classes()
    ref_list = [refs[x] for x in subset.input_ids]
    anchor_seq = distance.surject_column(
        [table.cells[(anchor, x)] for x in subset.input_ids], ref_list, table.k
    )
    ranked = []
    for m in members:
        seq = distance.surject_column(
            [table.cells[(m, x)] for x in subset.input_ids], ref_list, table.k
        )
        ranked.append((model_distance(anchor_seq, seq).distance, m))
    ranked.sort()
    by_option = {
        "close": ranked[0][1],
        "median": ranked[(len(ranked) - 1) // 2][1],
        "far": ranked[-1][1],
    }
    ids = []
    for o in options:
        m = by_option[o]
        if m not in ids:
            ids.append(m)
    return DelegateChoice(option=",".join(options), delegate_ids=tuple(ids))


def identify_family(blackbox_seq, known, test: CalibratedTest) -> IdentificationVerdict:
    """Argmin-compound-distance identification over known families.

    `known` lists (family id, delegate sequences) sharing one query list.
    Abstains when even the closest family is at distance >= tau.
    """
    known = list(known)
    if len(known) < 2:
        raise ConfigError("identification needs at least two known families")
    dists = {}
    any_evidence = False
    for fid, delegate_seqs in known:
        reports = [model_distance(blackbox_seq, d) for d in delegate_seqs]
        if not reports:
            raise EmptyDelegateSet(f"family {fid} has no delegates")
        if any(not r.degenerate for r in reports):
            any_evidence = True
        dists[fid] = min(r.distance for r in reports)
    if not any_evidence:
        raise DegenerateEvidence("all observed sequences are constant")
    order = sorted(dists.items(), key=lambda t: (t[1], t[0]))
    best_fid, best_d = order[0]
    margin = (order[1][1] - best_d) if len(order) > 1 else 0.0
    decision = best_fid if best_d < test.tau else None
    return IdentificationVerdict(decision=decision, distances=dists, margin=margin)


def identify_variation(blackbox_seq, variation_families) -> str:
    """Second-stage variation identification: plain argmin, no threshold."""
    variation_families = list(variation_families)
    if not variation_families:
        raise EmptyDelegateSet("no variation families given")
    dists = []
    for fid, delegate_seqs in variation_families:
        if not delegate_seqs:
            raise EmptyDelegateSet(f"variation family {fid} has no delegates")
        dists.append((min(model_distance(blackbox_seq, d).distance for d in delegate_seqs), fid))
    return min(dists)[1]


# --- protocol harness -------------------------------------------------------

PROTOCOL_DEFAULTS = {
    "task": "detect",
    "n_vanilla": 10,
    "retain_grid": "0.9,0.85,0.8,0.75,0.7",
    "classes": 1000,
    "top_k": 1,
    "n_inputs": 3000,
    "eta": 0.15,
    "accuracy_min": 0.70,
    "accuracy_max": 0.85,
    "difficulty_spread": 0.6,
    "alpha": 0.05,
    "strategies": "entropy,split3070,all",
    "l_grid": "20,50,100,500",
    "repetitions": 20,
    "holdout_families": 2,
    "calibration_negatives": 200,
    "negatives_per_trial": 10,
    "entropy_pool": 1000,
    "variation_procedures": "psiA:0.03,0.06,0.09,0.12;psiB:0.03,0.06,0.09,0.12",
    "delegate": "median",
    "trials": 200,
    "seed": 0,
}


def parse_kv_config(path) -> dict[str, str]:
    """Flat `key = value` config file; '#' starts a comment."""
    cfg = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            cfg[key.strip()] = value.strip()
    return cfg


def _cfg(config: dict, key: str, cast=str):
    raw = config.get(key, PROTOCOL_DEFAULTS[key])
    try:
        return cast(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def _floats(raw) -> list[float]:
    return [float(v) for v in str(raw).split(",") if str(v).strip()]


def _ints(raw) -> list[int]:
    return [int(v) for v in str(raw).split(",") if str(v).strip()]


def _names(raw) -> list[str]:
    return [v.strip() for v in str(raw).split(",") if v.strip()]


def _stream(seed, *tags):
    return np.random.default_rng(
        [int(seed)] + [zlib.crc32(str(t).encode()) for t in tags]
    )


def ensemble_from_config(config: dict) -> family_sim.EnsembleResult:
    k = _cfg(config, "top_k", int)
    task = _cfg(config, "task")
    if task == "identify-variation":
        channels = []
        for block in str(config.get("variation_procedures",
                                    PROTOCOL_DEFAULTS["variation_procedures"])).split(";"):
            if not block.strip():
                continue
            name, _, grid = block.partition(":")
            for g in _floats(grid):
                channels.append((name.strip(), family_sim.nested_flip_channel(g)))
    else:
        channels = [("retain", family_sim.retain_channel(k, p))
                    for p in _floats(_cfg(config, "retain_grid"))]
    eta = _cfg(config, "eta", float)
    if not 0.0 < eta < 1.0:
        raise ConfigError(f"eta must lie in (0, 1): {eta}")
    return family_sim.gen_ensemble(
        n_vanilla=_cfg(config, "n_vanilla", int),
        channels=channels,
        n_classes=_cfg(config, "classes", int),
        k=k,
        n_inputs=_cfg(config, "n_inputs", int),
        eta=eta,
        accuracy_range=(_cfg(config, "accuracy_min", float), _cfg(config, "accuracy_max", float)),
        difficulty_spread=_cfg(config, "difficulty_spread", float),
        seed=_cfg(config, "seed", int),
    )


class _Sampler:
    """Per-trial query sampling over a fixed ensemble."""

    def __init__(self, table, known_models, entropy_pool):
        self.table = table
        self.n = len(table.inputs)
        refs = table.reference_classes()
        self.idx_of = {x: i for i, x in enumerate(table.inputs)}
        self.correct_idx = {}
        for m in table.models:
            mask = [self.idx_of[x] for x in table.inputs
                    if table.cells[(m, x)][0] == refs[x]]
            self.correct_idx[m] = np.array(mask, dtype=int)
        pool_size = min(entropy_pool, self.n)
        subset = select_inputs(table, "entropy", pool_size, known_set=known_models)
        self.entropy_pool = np.array([self.idx_of[x] for x in subset.input_ids])

    def sample(self, strategy, L, anchor, rng) -> np.ndarray:
        if strategy == "all":
            return rng.choice(self.n, size=L, replace=False)
        if strategy == "entropy":
            return rng.choice(self.entropy_pool, size=min(L, len(self.entropy_pool)),
                              replace=False)
        if strategy in ("split5050", "split3070"):
            ratio = 0.5 if strategy == "split5050" else 0.3
            n_c = int(round(L * ratio))
            corr = self.correct_idx[anchor]
            wrong = np.setdiff1d(np.arange(self.n), corr, assume_unique=True)
            n_c = min(n_c, len(corr))
            n_w = min(L - n_c, len(wrong))
            return np.concatenate([
                rng.choice(corr, size=n_c, replace=False),
                rng.choice(wrong, size=n_w, replace=False),
            ])
        raise ConfigError(f"unknown strategy {strategy!r}")


def _seq(V, model_row, q, k) -> SurjectedSeq:
    return SurjectedSeq(tuple(int(v) for v in V[model_row][q]), k)


def run_protocol(config: dict) -> list[dict]:
    """Run repeated seeded trials and return report rows.

    Row schema: task, family_flavor, strategy, top_k, L, seed, metric, value.
    """
    task = _cfg(config, "task")
    if task == "detect":
        return _protocol_detect(config)
    if task == "identify":
        return _protocol_identify(config)
    if task == "identify-variation":
        return _protocol_identify_variation(config)
    raise ConfigError(f"unknown task {task!r}")


def _detect_setup(config):
    ens = ensemble_from_config(config)
    table = ens.table
    part = ens.partitions["vanilla"]
    V = distance.surjected_matrix(table)
    row_of = {m: i for i, m in enumerate(table.models)}
    fams = sorted(part.as_dict().items())
    seed = _cfg(config, "seed", int)
    n_hold = _cfg(config, "holdout_families", int)
    if not 0 < n_hold < len(fams):
        raise ConfigError(f"holdout_families must lie in 1..{len(fams) - 1}")
    order = _stream(seed, "holdout").permutation(len(fams))
    holdout = [fams[i] for i in order[:n_hold]]
    known = [fams[i] for i in order[n_hold:]]
    sampler = _Sampler(table, [fid for fid, _ in known], _cfg(config, "entropy_pool", int))
    return ens, table, V, row_of, known, holdout, sampler, seed


def _protocol_detect(config) -> list[dict]:
    ens, table, V, row_of, known, holdout, sampler, seed = _detect_setup(config)
    k = table.k
    alpha = _cfg(config, "alpha", float)
    reps = _cfg(config, "repetitions", int)
    n_calib = _cfg(config, "calibration_negatives", int)
    neg_per_trial = _cfg(config, "negatives_per_trial", int)
    rows = []

    def safe_positive(b_seq, delegate_seqs, test):
        # Constant sequences carry no evidence; score them as non-positive.
        try:
            return detect_variant(b_seq, delegate_seqs, test).positive
        except DegenerateEvidence:
            return False

    def base(strategy, L, trial_seed, metric, value):
        return {
            "task": "detect", "family_flavor": "vanilla", "strategy": strategy,
            "top_k": k, "L": L, "seed": trial_seed, "metric": metric,
            "value": round(float(value), 6),
        }

    for strategy in _names(_cfg(config, "strategies")):
        for L in _ints(_cfg(config, "l_grid")):
            crng = _stream(seed, "calibrate", strategy, L)
            neg = []
            for _ in range(n_calib):
                i, j = crng.choice(len(known), size=2, replace=False)
                anchor = known[i][0]
                b = known[j][1][int(crng.integers(len(known[j][1])))]
                q = sampler.sample(strategy, L, anchor, crng)
                neg.append(model_distance(_seq(V, row_of[b], q, k),
                                          _seq(V, row_of[anchor], q, k)).distance)
            test = calibrate_from_distances(neg, alpha, L=L, strategy=strategy)
            fresh_fp = 0
            fresh_n = 0
            for t in range(reps):
                trng = _stream(seed, "trial", strategy, L, t)
                tp = npos = 0
                for fid, members in known:
                    variants = [m for m in members if m != fid]
                    if not variants:
                        continue
                    b = variants[int(trng.integers(len(variants)))]
                    q = sampler.sample(strategy, L, fid, trng)
                    tp += safe_positive(
                        _seq(V, row_of[b], q, k), [_seq(V, row_of[fid], q, k)], test
                    )
                    npos += 1
                fp = nneg = 0
                for i in range(neg_per_trial):
                    fid, members = holdout[i % len(holdout)]
                    b = members[int(trng.integers(len(members)))]
                    target = known[int(trng.integers(len(known)))][0]
                    q = sampler.sample(strategy, L, target, trng)
                    fp += safe_positive(
                        _seq(V, row_of[b], q, k), [_seq(V, row_of[target], q, k)], test
                    )
                    nneg += 1
                fresh_fp += fp
                fresh_n += nneg
                rows.append(base(strategy, L, t, "tpr", tp / npos))
                rows.append(base(strategy, L, t, "fpr", fp / nneg))
            rows.append(base(strategy, L, -1, "tau", test.tau))
            rows.append(base(strategy, L, -1, "fpr_overall", fresh_fp / fresh_n))
            tprs = [r["value"] for r in rows
                    if r["metric"] == "tpr" and r["strategy"] == strategy and r["L"] == L]
            rows.append(base(strategy, L, -1, "tpr_mean", float(np.mean(tprs))))
    return rows


def _protocol_identify(config) -> list[dict]:
    ens, table, V, row_of, known, holdout, sampler, seed = _detect_setup(config)
    k = table.k
    alpha = _cfg(config, "alpha", float)
    reps = _cfg(config, "repetitions", int)
    rows = []

    for L in _ints(_cfg(config, "l_grid")):
        correct = abstain = wrong = n_cases = 0
        for t in range(reps):
            trng = _stream(seed, "identify", L, t)
            q = sampler.sample("entropy", L, None, trng)
            delegates = [(fid, [_seq(V, row_of[fid], q, k)]) for fid, _ in known]
            # Negative calibration: held-out variants must trigger abstention.
            neg = []
            for fid, members in holdout:
                for b in members:
                    dmin = min(
                        model_distance(_seq(V, row_of[b], q, k), seqs[0]).distance
                        for _, seqs in delegates
                    )
                    neg.append(dmin)
            while len(neg) < 20:  # pad by resampling queries for small ensembles
                prng = _stream(seed, "identify-pad", L, t, len(neg))
                q2 = sampler.sample("entropy", L, None, prng)
                fid, members = holdout[int(prng.integers(len(holdout)))]
                b = members[int(prng.integers(len(members)))]
                neg.append(min(
                    model_distance(_seq(V, row_of[b], q2, k),
                                   _seq(V, row_of[f2], q2, k)).distance
                    for f2, _ in known
                ))
            test = calibrate_from_distances(neg, alpha, L=L, strategy="entropy")
            for fid, members in known:
                variants = [m for m in members if m != fid]
                if not variants:
                    continue
                b = variants[int(trng.integers(len(variants)))]
                try:
                    verdict = identify_family(_seq(V, row_of[b], q, k), delegates, test)
                except DegenerateEvidence:
                    verdict = IdentificationVerdict(None, {}, 0.0)
                n_cases += 1
                if verdict.decision is None:
                    abstain += 1
                elif verdict.decision == fid:
                    correct += 1
                else:
                    wrong += 1
        for metric, num in (("correct_rate", correct), ("abstain_rate", abstain),
                            ("wrong_rate", wrong)):
            rows.append({
                "task": "identify", "family_flavor": "vanilla", "strategy": "entropy",
                "top_k": k, "L": L, "seed": -1, "metric": metric,
                "value": round(num / n_cases, 6),
            })
    return rows


def _protocol_identify_variation(config) -> list[dict]:
    ens = ensemble_from_config(config)
    table = ens.table
    k = table.k
    seed = _cfg(config, "seed", int)
    trials = _cfg(config, "trials", int)
    l_grid = _ints(_cfg(config, "l_grid"))
    manifest = ens.manifest["models"]
    gt_list = [table.ground_truth[x] for x in table.inputs]
    V = distance.surjected_matrix(table)
    row_of = {m: i for i, m in enumerate(table.models)}
    vanillas = sorted(m for m, doc in manifest.items() if doc["parent"] is None)
    sampler = _Sampler(table, vanillas, _cfg(config, "entropy_pool", int))

    # Group variants per (vanilla, procedure), ordered by channel strength.
    groups: dict[tuple[str, str], list[tuple[float, str]]] = {}
    procedures = set()
    for m, doc in manifest.items():
        if doc["parent"] is None or doc["channel"] != "nested-flip":
            continue
        fid, _, proc = _family_of_variation(ens, m)
        procedures.add(proc)
        groups.setdefault((doc["parent"], proc), []).append((doc["params"]["fraction"], m))
    for key in groups:
        groups[key].sort()
    procedures = sorted(procedures)
    if len(procedures) < 2:
        raise ConfigError("identify-variation needs at least two procedures")

    g_lo, g_hi = 0.02, 0.14
    rows = []
    for L in l_grid:
        hits = {"median": 0, "close,median": 0}
        for t in range(trials):
            trng = _stream(seed, "variation", L, t)
            parent = vanillas[int(trng.integers(len(vanillas)))]
            true_proc = procedures[int(trng.integers(len(procedures)))]
            g_b = float(trng.uniform(g_lo, g_hi))
            spec = family_sim.VariantSpec(
                model_id=f"bb{t}", parent=parent,
                channel=family_sim.nested_flip_channel(g_b),
                seed=seed + 1000 + t, procedure=true_proc,
            )
            col = family_sim.gen_variant(
                table.column(parent), spec, gt_list, table.num_classes,
                eta=0.99, family_seed=seed,
            )
            q = sampler.sample("entropy", L, None, trng)
            refs = table.reference_classes()
            b_seq = SurjectedSeq(
                tuple(distance.surject(col[i], refs[table.inputs[i]]) for i in q), k
            )
            for mode in hits:
                fams = []
                for proc in procedures:
                    members = groups[(parent, proc)]
                    picks = {"close": members[0][1],
                             "median": members[(len(members) - 1) // 2][1]}
                    ids = [picks[o] for o in mode.split(",")]
                    seqs = [_seq(V, row_of[m], q, k) for m in dict.fromkeys(ids)]
                    fams.append((proc, seqs))
                guess = identify_variation(b_seq, fams)
                hits[mode] += guess == true_proc
        for mode, n_hit in hits.items():
            rows.append({
                "task": "identify-variation", "family_flavor": "variation",
                "strategy": "entropy", "top_k": k, "L": L, "seed": -1,
                "metric": f"correct_rate[{mode}]", "value": round(n_hit / trials, 6),
            })
    return rows


def _family_of_variation(ens, model):
    fam_of = ens.partitions["variation"].family_of()
    fid = fam_of[model]
    parent, _, proc = fid.partition(":")
    return fid, parent, proc


REPORT_COLUMNS = ["task", "family_flavor", "strategy", "top_k", "L", "seed", "metric", "value"]


def write_report(rows, csv_path=None, json_path=None):
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
            fh.write("\n")
