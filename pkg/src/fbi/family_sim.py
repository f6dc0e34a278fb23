"""Synthetic model families: vanilla generators and channel-based variants.

Variants are defined directly through a transition law on the surjected
symbol (the statistic the detectors actually consume) and then lifted back to
top-k lists with a minimal rewrite. This makes the exact channel mutual
information an analytic oracle for the empirical distance.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from .corpus import FamilyPartition, PredictionTable
from .distance import surject
from .errors import AccuracyGateViolation, ConfigError, MissingGroundTruth

log = logging.getLogger(__name__)

DEFAULT_ETA = 0.15
DEFAULT_ACCURACY_RANGE = (0.70, 0.85)


def _stream(seed: int, *tags: str) -> np.random.Generator:
    # Per-tag RNG streams: parallel generation order never changes output.
    return np.random.default_rng([seed] + [zlib.crc32(t.encode()) for t in tags])


@dataclass(frozen=True)
class VanillaSpec:
    model_id: str
    n_classes: int
    accuracy: float
    k: int = 1
    seed: int = 0
    miss_profile: str = "absent"  # absent | ranked

    def __post_init__(self):
        if not 0.0 < self.accuracy < 1.0:
            raise ConfigError(f"accuracy must lie strictly in (0, 1): {self.accuracy}")
        if self.n_classes < self.k + 1:
            raise ConfigError(f"need n_classes >= k + 1, got C={self.n_classes}, k={self.k}")


@dataclass(frozen=True)
class ChannelSpec:
    """Row-stochastic (k+1)x(k+1) transition law over surjected symbols."""

    W: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        W = np.asarray(self.W, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ConfigError("channel matrix must be square")
        if (W < 0).any() or not np.allclose(W.sum(axis=1), 1.0, atol=1e-12):
            raise ConfigError("channel rows must be non-negative and sum to 1")
        object.__setattr__(self, "W", W)

    @property
    def k(self) -> int:
        return self.W.shape[0] - 1


def identity_channel(k: int) -> ChannelSpec:
    return ChannelSpec(np.eye(k + 1), kind="identity")


def retain_channel(k: int, p: float, resample: np.ndarray | None = None) -> ChannelSpec:
    """Keep the parent symbol with probability p, else resample independently.

    The resample law defaults to uniform over {0..k}, which degrades accuracy
    and lets the tolerance gate bite; pass the parent's symbol marginal to
    model accuracy-preserving variations instead.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"retain probability must lie in [0, 1]: {p}")
    q = np.full(k + 1, 1.0 / (k + 1)) if resample is None else np.asarray(resample, float)
    W = p * np.eye(k + 1) + (1.0 - p) * np.tile(q, (k + 1, 1))
    return ChannelSpec(W, kind="retain", params={"p": p})


def nested_flip_channel(fraction: float) -> ChannelSpec:
    """Toggle the symbol on a shared, nested input subset of the given size.

    Variants of the same procedure share a per-(family, procedure) difficulty
    ordering of the inputs; a variant of strength g toggles the first g
    fraction of it. Marginally this is a symmetric flip channel, but two
    variants of one procedure disagree only on the symmetric difference of
    their subsets, so they stay strongly correlated. Top-1 only.
    """
    if not 0.0 <= fraction <= 0.5:
        raise ConfigError(f"flip fraction must lie in [0, 0.5]: {fraction}")
    g = fraction
    W = np.array([[1 - g, g], [g, 1 - g]])
    return ChannelSpec(W, kind="nested-flip", params={"fraction": fraction})


@dataclass(frozen=True)
class VariantSpec:
    model_id: str
    parent: str
    channel: ChannelSpec
    seed: int = 0
    procedure: str = "theta"  # groups variants of one family into F(m, psi)


def gen_vanilla(spec: VanillaSpec, inputs, ground_truth: dict[str, int],
                difficulty=None, difficulty_spread: float = 0.0):
    """Generate one vanilla model column: top-1 hits the ground truth with
    probability `accuracy`, other ranks are random distinct labels.

    Distinct model ids draw from independent RNG streams. When a per-input
    `difficulty` array in [0, 1] is given, the hit probability is tilted to
    accuracy + spread * (0.5 - difficulty): sharing one difficulty array
    across models correlates their correctness the way real models correlate
    on easy and hard inputs.
    """
    rng = _stream(spec.seed, "vanilla", spec.model_id)
    C, k = spec.n_classes, spec.k
    if difficulty is None or difficulty_spread == 0.0:
        p_hit = {x: spec.accuracy for x in inputs}
    else:
        p_hit = {
            x: float(np.clip(spec.accuracy + difficulty_spread * (0.5 - d), 0.01, 0.99))
            for x, d in zip(inputs, difficulty)
        }
    column = []
    for x in inputs:
        gt = ground_truth[x]
        hit = rng.random() < p_hit[x]
        others = _distinct_labels(rng, C, k, exclude={gt})
        if hit:
            out = (gt,) + others[: k - 1]
        elif spec.miss_profile == "ranked" and k > 1:
            pos = int(rng.integers(1, k))
            filler = others[: k - 1]
            out = filler[:pos] + (gt,) + filler[pos:]
        else:
            out = others[:k]
        column.append(out)
    return column


def _distinct_labels(rng, C, k, exclude):
    # Rejection sampling; fine while k << C.
    picked = []
    seen = set(exclude)
    while len(picked) < k:
        c = int(rng.integers(C))
        if c not in seen:
            seen.add(c)
            picked.append(c)
    return tuple(picked)


def accuracy(column, ground_truth_labels) -> float:
    """Fraction of inputs whose rank-1 label matches the ground truth."""
    if len(ground_truth_labels) != len(column):
        raise MissingGroundTruth("ground truth must cover every input")
    hits = sum(out[0] == gt for out, gt in zip(column, ground_truth_labels))
    return hits / len(column)


def gen_variant(
    parent_column,
    spec: VariantSpec,
    ground_truth_labels,
    n_classes: int,
    eta: float = DEFAULT_ETA,
    family_seed: int | None = None,
):
    """Derive a variant column by passing the parent's surjected symbols
    through the channel and rewriting each top-k list minimally.

    Raises AccuracyGateViolation when the result loses more than the eta
    fraction of the parent's accuracy.
    """
    k = len(parent_column[0])
    rng = _stream(spec.seed, "variant", spec.model_id)
    y = np.array([surject(out, gt) for out, gt in zip(parent_column, ground_truth_labels)])

    if spec.channel.kind == "nested-flip":
        if k != 1:
            raise ConfigError("nested-flip channels are defined for top-1 only")
        z = _nested_flip_symbols(y, spec, family_seed if family_seed is not None else spec.seed)
    else:
        z = y.copy()
        for sym in range(k + 1):
            idx = np.flatnonzero(y == sym)
            if idx.size:
                z[idx] = rng.choice(k + 1, size=idx.size, p=spec.channel.W[sym])

    column = []
    for out, gt, zi, yi in zip(parent_column, ground_truth_labels, z, y):
        column.append(out if zi == yi else _rewrite(out, int(zi), gt, rng, n_classes))

    acc_parent = accuracy(parent_column, ground_truth_labels)
    acc_v = accuracy(column, ground_truth_labels)
    if acc_v <= (1.0 - eta) * acc_parent:
        raise AccuracyGateViolation(
            f"{spec.model_id}: accuracy {acc_v:.4f} below gate "
            f"{(1.0 - eta) * acc_parent:.4f} (parent {acc_parent:.4f}, eta {eta})"
        )
    return column


def _nested_flip_symbols(y, spec: VariantSpec, family_seed: int):
    fraction = spec.channel.params["fraction"]
    order = _stream(family_seed, "difficulty", spec.parent, spec.procedure).permutation(len(y))
    flip = order[: int(round(fraction * len(y)))]
    z = y.copy()
    z[flip] = 1 - z[flip]
    return z


def _rewrite(parent_out, z, reference, rng, n_classes):
    """Realize surjected symbol z with the smallest change to the top-k list."""
    k = len(parent_out)
    rest = [c for c in parent_out if c != reference]
    if z == 0:
        out = rest
    else:
        out = rest[: z - 1] + [reference] + rest[z - 1:]
    out = out[:k]
    exclude = set(out) | ({reference} if z == 0 else set())
    while len(out) < k:
        c = int(rng.integers(n_classes))
        if c not in exclude:
            exclude.add(c)
            out.append(c)
    return tuple(out)


@dataclass(frozen=True)
class EnsembleResult:
    table: PredictionTable
    partitions: dict[str, FamilyPartition]
    manifest: dict


def gen_ensemble(
    n_vanilla: int,
    channels,
    n_classes: int = 1000,
    k: int = 1,
    n_inputs: int = 2000,
    eta: float = DEFAULT_ETA,
    accuracy_range=DEFAULT_ACCURACY_RANGE,
    difficulty_spread: float = 0.0,
    seed: int = 0,
    miss_profile: str = "absent",
) -> EnsembleResult:
    """Generate vanillas, their channel variants, partitions, and a manifest.

    `channels` is a list of (procedure id, ChannelSpec) applied to every
    vanilla. Variants failing the accuracy gate are dropped and logged, and
    noted in the manifest. Deterministic under `seed`.
    """
    lo, hi = accuracy_range
    if not (0.0 < lo <= hi < 1.0) or not 0.0 < eta < 1.0:
        raise ConfigError(f"bad accuracy range {accuracy_range} or eta {eta}")
    rng = _stream(seed, "ensemble")
    inputs = [f"x{i:05d}" for i in range(n_inputs)]
    ground_truth = {x: int(rng.integers(n_classes)) for x in inputs}
    gt_list = [ground_truth[x] for x in inputs]
    difficulty = rng.uniform(size=n_inputs) if difficulty_spread else None

    columns: dict[str, list] = {}
    manifest: dict[str, dict] = {}
    vanilla_fams: dict[str, list[str]] = {}
    variation_fams: dict[str, list[str]] = {}
    dropped: list[str] = []

    for v in range(n_vanilla):
        mid = f"m{v:02d}"
        acc = float(rng.uniform(lo, hi))
        vspec = VanillaSpec(mid, n_classes, acc, k=k, seed=seed, miss_profile=miss_profile)
        columns[mid] = gen_vanilla(vspec, inputs, ground_truth,
                                   difficulty=difficulty,
                                   difficulty_spread=difficulty_spread)
        measured = accuracy(columns[mid], gt_list)
        manifest[mid] = {"parent": None, "channel": None, "params": {}, "accuracy": measured}
        vanilla_fams[mid] = [mid]
        variation_fams[f"{mid}:vanilla"] = [mid]
        for j, (procedure, channel) in enumerate(channels):
            vid = f"{mid}v{j:02d}"
            spec = VariantSpec(vid, parent=mid, channel=channel, seed=seed, procedure=procedure)
            try:
                col = gen_variant(columns[mid], spec, gt_list, n_classes, eta=eta, family_seed=seed)
            except AccuracyGateViolation as exc:
                log.warning("variant discarded: %s", exc)
                dropped.append(vid)
                continue
            columns[vid] = col
            manifest[vid] = {
                "parent": mid,
                "channel": channel.kind,
                "params": dict(channel.params),
                "accuracy": accuracy(col, gt_list),
            }
            vanilla_fams[mid].append(vid)
            variation_fams.setdefault(f"{mid}:{procedure}", []).append(vid)

    models = sorted(columns)
    cells = {(m, x): columns[m][i] for m in models for i, x in enumerate(inputs)}
    table = PredictionTable(models, inputs, k, cells, ground_truth=ground_truth)
    partitions = {
        "vanilla": FamilyPartition.from_dict(vanilla_fams, flavor="vanilla"),
        "variation": FamilyPartition.from_dict(variation_fams, flavor="variation"),
        "singleton": FamilyPartition.from_dict({m: [m] for m in models}, flavor="singleton"),
    }
    manifest_doc = {"models": manifest, "dropped": sorted(dropped), "eta": eta, "seed": seed}
    return EnsembleResult(table=table, partitions=partitions, manifest=manifest_doc)
