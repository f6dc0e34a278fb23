"""Exact-knowledge detection and identification with adaptive greedy queries.

The black-box is assumed to be one of the known models. Each query eliminates
every candidate that disagrees with the observed output; the greedy picks the
un-queried input whose score promises the largest reduction of the candidate
set outside (detection) or across (identification) the hypothesis families.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .corpus import FamilyPartition, PredictionTable
from .errors import BudgetExhausted, ConsistencyError, EmptyInput, OracleOutputInvalid

SCORE_RULES = ("expectation", "worst-case")
_EPS = 1e-9


class Verdict(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    FAILURE = "failure"


def replay_oracle(table: PredictionTable, model: str):
    """Query oracle that replays a stored table column."""
    if model not in table.models:
        raise ConsistencyError(f"unknown model {model!r}")

    def oracle(input_id: str):
        return table.cells[(model, input_id)]

    return oracle


@dataclass
class DetectionOutcome:
    verdict: Verdict
    queries_used: int
    transcript: list = field(default_factory=list)  # (input id, output) per step
    candidate_sizes: list = field(default_factory=list)  # (|F|, |A\F|) after each step
    remaining_family: tuple = ()
    remaining_outside: tuple = ()


@dataclass
class IdentificationOutcome:
    family_id: str | None  # None on failure
    queries_used: int
    transcript: list = field(default_factory=list)
    surviving_families: list = field(default_factory=list)  # count after each step
    remaining_models: tuple = ()

    @property
    def failed(self) -> bool:
        return self.family_id is None


def _pick(scored, tie_break, rng):
    """Input of minimal score; ties go to the smallest input id, or to a
    seeded random choice when tie_break='random'."""
    best = min(s for _, s in scored)
    tied = sorted(x for x, s in scored if s <= best + _EPS)
    if tie_break == "random":
        return tied[int(rng.integers(len(tied)))]
    return tied[0]


def _detect_score(groups_f, groups_out, n_f, rule):
    terms = [groups_out.get(y, 0) * c / n_f for y, c in groups_f.items()]
    return max(terms, default=0.0) if rule == "worst-case" else sum(terms)


def detect(
    table: PredictionTable,
    family,
    blackbox,
    rule: str = "expectation",
    max_queries: int | None = None,
    tie_break: str = "id",
    seed: int = 0,
) -> DetectionOutcome:
    """Greedy detection of whether the black-box lies inside the family.

    Stops on the first of: no candidate left outside the family (positive),
    no candidate left inside (negative), or no remaining input able to
    distinguish the survivors (failure).
    """
    family = set(family)
    if not family or not family < set(table.models):
        raise ConsistencyError("family must be a nonempty strict subset of the table models")
    if rule not in SCORE_RULES:
        raise ConsistencyError(f"unknown score rule {rule!r}")
    if max_queries is None:
        max_queries = len(table.inputs)
    rng = np.random.default_rng(seed)

    f_rem = [m for m in table.models if m in family]
    out_rem = [m for m in table.models if m not in family]
    outcome = DetectionOutcome(Verdict.FAILURE, 0)
    unqueried = list(table.inputs)

    while True:
        if not out_rem:
            outcome.verdict = Verdict.POSITIVE
            break
        if not f_rem:
            outcome.verdict = Verdict.NEGATIVE
            break
        if not unqueried:
            outcome.verdict = Verdict.FAILURE
            break
        scored = []
        for x in unqueried:
            gf = Counter(table.cells[(m, x)] for m in f_rem)
            go = Counter(table.cells[(m, x)] for m in out_rem)
            scored.append((x, _detect_score(gf, go, len(f_rem), rule)))
        if min(s for _, s in scored) >= len(out_rem) - _EPS:
            # Every remaining input leaves all survivors in agreement.
            outcome.verdict = Verdict.FAILURE
            break
        if outcome.queries_used >= max_queries:
            raise BudgetExhausted(f"no verdict within {max_queries} queries")
        x = _pick(scored, tie_break, rng)
        unqueried.remove(x)
        answer = tuple(blackbox(x))
        new_f = [m for m in f_rem if table.cells[(m, x)] == answer]
        new_out = [m for m in out_rem if table.cells[(m, x)] == answer]
        if not new_f and not new_out:
            raise OracleOutputInvalid(
                f"output {answer} on {x} matches no remaining candidate"
            )
        f_rem, out_rem = new_f, new_out
        outcome.queries_used += 1
        outcome.transcript.append((x, answer))
        outcome.candidate_sizes.append((len(f_rem), len(out_rem)))

    outcome.remaining_family = tuple(f_rem)
    outcome.remaining_outside = tuple(out_rem)
    return outcome


def _identify_score(groups, fam_of, n_rem, rule):
    terms = []
    for _, members in groups.items():
        fams = len({fam_of[m] for m in members})
        terms.append(fams * len(members) / n_rem)
    return max(terms) if rule == "worst-case" else sum(terms)


def identify(
    table: PredictionTable,
    partition: FamilyPartition,
    blackbox,
    rule: str = "expectation",
    max_queries: int | None = None,
    tie_break: str = "id",
    seed: int = 0,
) -> IdentificationOutcome:
    """Greedy identification of the family the black-box belongs to.

    Narrows the candidate set by output agreement until a single family
    survives; fails when the survivors are indistinguishable on every
    remaining input.
    """
    fam_of = partition.family_of()
    if set(fam_of) != set(table.models):
        raise ConsistencyError("partition must cover exactly the table models")
    if rule not in SCORE_RULES:
        raise ConsistencyError(f"unknown score rule {rule!r}")
    if max_queries is None:
        max_queries = len(table.inputs)
    rng = np.random.default_rng(seed)

    a_rem = list(table.models)
    outcome = IdentificationOutcome(None, 0)
    unqueried = list(table.inputs)

    while True:
        surviving = {fam_of[m] for m in a_rem}
        if len(surviving) == 1:
            outcome.family_id = surviving.pop()
            break
        splittable = [
            x for x in unqueried if len({table.cells[(m, x)] for m in a_rem}) > 1
        ]
        if not splittable:
            break  # failure: survivors agree everywhere
        if outcome.queries_used >= max_queries:
            raise BudgetExhausted(f"no verdict within {max_queries} queries")
        scored = []
        for x in splittable:
            groups: dict[tuple, list] = {}
            for m in a_rem:
                groups.setdefault(table.cells[(m, x)], []).append(m)
            scored.append((x, _identify_score(groups, fam_of, len(a_rem), rule)))
        x = _pick(scored, tie_break, rng)
        unqueried.remove(x)
        answer = tuple(blackbox(x))
        a_rem = [m for m in a_rem if table.cells[(m, x)] == answer]
        if not a_rem:
            raise OracleOutputInvalid(f"output {answer} on {x} matches no remaining candidate")
        outcome.queries_used += 1
        outcome.transcript.append((x, answer))
        outcome.surviving_families.append(len({fam_of[m] for m in a_rem}))

    outcome.remaining_models = tuple(a_rem)
    return outcome


def sequential_expected_queries(pos, neg) -> float:
    """Expected queries of the identify-by-sequential-detection baseline.

    `pos[j]` / `neg[j]` are the expected query counts for a positive /
    negative detection of family j; families are tested in random order and
    the black-box family is uniform.
    """
    pos, neg = list(pos), list(neg)
    if not pos or len(pos) != len(neg):
        raise EmptyInput("need equal-length nonempty positive and negative lists")
    if any(v < 0 for v in pos + neg):
        raise EmptyInput("expected query counts must be non-negative")
    n = len(pos)
    return sum(pos) / n + (n - 1) / (2 * n) * sum(neg)
