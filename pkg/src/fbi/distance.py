"""Surjection, empirical information measures, and the normalized model distance.

Two models are compared through the rank their outputs give to a per-input
reference class. The resulting integer sequences feed an empirical mutual
information estimate, normalized into a distance in [0, 1]: 0 means identical
behavior, 1 means statistically independent outputs.

All entropies and mutual informations are in bits; 0 * log 0 is taken as 0.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyDelegateSet,
    InfeasibleAccuracies,
    LengthMismatch,
    OutOfRegime,
)

_DEGENERATE_EPS = 1e-12


@dataclass(frozen=True)
class SurjectedSeq:
    """Sequence of values in {0..k}: the reference-class rank, or 0 if absent."""

    values: tuple[int, ...]
    k: int

    def __post_init__(self):
        if len(self.values) < 1:
            raise LengthMismatch("surjected sequence must have length >= 1")
        if any(v < 0 or v > self.k for v in self.values):
            raise LengthMismatch(f"surjected values must lie in 0..{self.k}")

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class JointHistogram:
    counts: np.ndarray  # (k+1, k+1), counts[z][y]
    L: int


@dataclass(frozen=True)
class DistanceReport:
    mi_bits: float
    h_z_bits: float
    h_y_bits: float
    distance: float
    L: int
    degenerate: bool


def surject(output: tuple[int, ...], reference: int) -> int:
    """1-based rank of the reference class in a top-k list, else 0."""
    for j, c in enumerate(output, start=1):
        if c == reference:
            return j
    return 0


def surject_column(column, references, k: int) -> SurjectedSeq:
    """Apply the surjection to one model column against per-input references."""
    return SurjectedSeq(tuple(surject(out, ref) for out, ref in zip(column, references)), k)


def surjected_matrix(table, input_ids=None) -> np.ndarray:
    """(models x inputs) matrix of surjected values against the table's references."""
    refs = table.reference_classes()
    ids = table.inputs if input_ids is None else tuple(input_ids)
    mat = np.empty((len(table.models), len(ids)), dtype=np.int8)
    for i, m in enumerate(table.models):
        mat[i] = [surject(table.cells[(m, x)], refs[x]) for x in ids]
    return mat


def joint_histogram(z: SurjectedSeq, y: SurjectedSeq) -> JointHistogram:
    if z.k != y.k:
        raise LengthMismatch(f"rank depths differ: {z.k} vs {y.k}")
    if len(z) != len(y):
        raise LengthMismatch(f"sequence lengths differ: {len(z)} vs {len(y)}")
    n = z.k + 1
    zv = np.asarray(z.values, dtype=np.int64)
    yv = np.asarray(y.values, dtype=np.int64)
    counts = np.bincount(zv * n + yv, minlength=n * n).reshape(n, n)
    return JointHistogram(counts=counts, L=len(z))


def _entropy_bits(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def _mi_bits(joint: np.ndarray) -> float:
    pz = joint.sum(axis=1)
    py = joint.sum(axis=0)
    mask = joint > 0
    ratio = joint[mask] / np.outer(pz, py)[mask]
    return float((joint[mask] * np.log2(ratio)).sum())


def empirical_mi(hist: JointHistogram) -> float:
    """Empirical mutual information of the joint histogram, in bits.

    Averaged with the transposed evaluation so that swapping the two
    sequences yields the bit-identical value (summation order otherwise
    differs in the last ulp).
    """
    joint = hist.counts / hist.L
    return max(0.0, 0.5 * (_mi_bits(joint) + _mi_bits(joint.T)))


def marginal_entropies(hist: JointHistogram) -> tuple[float, float]:
    joint = hist.counts / hist.L
    return _entropy_bits(joint.sum(axis=1)), _entropy_bits(joint.sum(axis=0))


def distance_from_histogram(hist: JointHistogram) -> DistanceReport:
    h_z, h_y = marginal_entropies(hist)
    mi = empirical_mi(hist)
    h_min = min(h_z, h_y)
    if h_min <= _DEGENERATE_EPS:
        # A constant sequence carries no identification evidence; callers must
        # treat the resulting distance of 1 as void, not as a mismatch.
        return DistanceReport(mi, h_z, h_y, 1.0, hist.L, degenerate=True)
    nz = hist.counts > 0
    if (nz.sum(axis=0) <= 1).all() and (nz.sum(axis=1) <= 1).all():
        # Permutation-structured joint: one sequence is a bijection of the
        # other, so MI = min(H) and the distance is exactly 0 (float error in
        # the two separately-summed entropies would otherwise leave an ulp).
        return DistanceReport(mi, h_z, h_y, 0.0, hist.L, degenerate=False)
    d = 1.0 - mi / h_min
    return DistanceReport(mi, h_z, h_y, min(1.0, max(0.0, d)), hist.L, degenerate=False)


def model_distance(z: SurjectedSeq, y: SurjectedSeq) -> DistanceReport:
    """Normalized distance between the models producing z and y."""
    return distance_from_histogram(joint_histogram(z, y))


def compound_distance(b: SurjectedSeq, delegates) -> float:
    """Minimum distance of the black-box sequence to any delegate sequence."""
    delegates = list(delegates)
    if not delegates:
        raise EmptyDelegateSet("compound distance needs at least one delegate")
    return min(model_distance(b, d).distance for d in delegates)


# --- theory: closed-form lower bound for top-1 -----------------------------


@dataclass(frozen=True)
class BoundInput:
    A: float  # accuracy of the known model
    B: float  # accuracy of the black-box


def _f(x: float) -> float:
    return 0.0 if x <= 0.0 else -x * math.log2(x)


def _h(p: float) -> float:
    return _f(p) + _f(1.0 - p)


def theory_lower_bound(inp: BoundInput) -> float:
    """Closed-form lower bound of the top-1 distance from the two accuracies.

    Only valid for A + B > 1 (after ordering A >= B); outside that regime the
    derivation does not apply and OutOfRegime is raised.
    """
    A, B = max(inp.A, inp.B), min(inp.A, inp.B)
    if not (0.0 < B <= A < 1.0):
        raise InfeasibleAccuracies(f"accuracies must lie strictly in (0, 1): A={A}, B={B}")
    if max(0.0, 1.0 - (A + B)) > min(1.0 - A, 1.0 - B) + 1e-12:
        raise InfeasibleAccuracies(f"no feasible joint for A={A}, B={B}")
    if A + B <= 1.0:
        raise OutOfRegime(f"bound requires A + B > 1, got {A} + {B}")
    numer = _f(A) + max(_f(B) - _f(A + B - 1.0), _f(1.0 - B) - _f(A - B))
    denom = min(_h(A), _h(B))
    bound = 1.0 - numer / denom
    if bound < 0.0:
        # Tiny negatives from floating error only; anything larger is a bug.
        bound = 0.0 if bound > -1e-9 else bound
    return min(1.0, bound)


def max_mi_over_joint(A: float, B: float, grid_step: float = 1e-6) -> float:
    """Brute-force maximum of I(a) over the feasible joint table, in bits.

    Independent oracle for theory_lower_bound: scans the free parameter
    a = P(z=0, y=0) on a uniform grid including both interval endpoints.
    """
    lo = max(0.0, 1.0 - (A + B))
    hi = min(1.0 - A, 1.0 - B)
    a = np.arange(lo, hi, grid_step)
    a = np.append(a, hi)
    b = 1.0 - B - a
    c = 1.0 - A - a
    d = A + B - 1.0 + a
    joint_ent = sum(_vec_f(p) for p in (a, b, c, d))
    mi = _h(A) + _h(B) - joint_ent
    return float(mi.max())


def _vec_f(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = -p[pos] * np.log2(p[pos])
    return out


# --- channels ---------------------------------------------------------------


def channel_mi(W: np.ndarray, p_y: np.ndarray) -> float:
    """Exact mutual information of the joint p_y(y) * W(z|y), in bits.

    W is row-stochastic with W[y, z] = P(Z = z | Y = y). Serves as the
    analytic oracle for the empirical estimator on simulated variants.
    """
    W = np.asarray(W, dtype=float)
    p_y = np.asarray(p_y, dtype=float)
    if not np.allclose(W.sum(axis=1), 1.0, atol=1e-9):
        raise LengthMismatch("channel rows must sum to 1")
    if not math.isclose(p_y.sum(), 1.0, abs_tol=1e-9):
        raise LengthMismatch("input law must sum to 1")
    joint = p_y[:, None] * W  # joint[y, z]
    pz = joint.sum(axis=0)
    mask = joint > 0
    ratio = joint[mask] / (p_y[:, None] * pz[None, :])[mask]
    return max(0.0, float((joint[mask] * np.log2(ratio)).sum()))


# --- pairwise matrices ------------------------------------------------------


def pairwise_distance_matrix(values: np.ndarray, k: int, threads: int = 1) -> np.ndarray:
    """Symmetric matrix of distances between rows of a surjected-value matrix.

    `values` is (models x L) with entries in 0..k. The diagonal is 0 for any
    non-degenerate row (self-distance), 1 with the degenerate convention
    otherwise.
    """
    values = np.asarray(values)
    n_models, L = values.shape
    out = np.zeros((n_models, n_models))

    def fill_row(i):
        zi = SurjectedSeq(tuple(int(v) for v in values[i]), k)
        for j in range(i, n_models):
            zj = SurjectedSeq(tuple(int(v) for v in values[j]), k)
            d = model_distance(zi, zj).distance
            out[i, j] = out[j, i] = d

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill_row, range(n_models)))
    else:
        for i in range(n_models):
            fill_row(i)
    return out
