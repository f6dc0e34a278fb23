"""Prediction tables: loading, validation, reference classes, input selection.

A prediction table is the entire observable universe of this toolkit: an
immutable map (model, input) -> ordered top-k class list, optionally paired
with a ground-truth annotation per input.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, InsufficientPool, ParseError

STRATEGIES = ("all", "split5050", "split3070", "entropy")

TopK = tuple[int, ...]


class PredictionTable:
    """Immutable top-k prediction table over a set of models and inputs.

    Cells map (model id, input id) to an ordered tuple of class labels of
    uniform length k. Ground truth, when given, maps input ids to labels.
    """

    def __init__(self, models, inputs, k, cells, ground_truth=None):
        self.models: tuple[str, ...] = tuple(models)
        self.inputs: tuple[str, ...] = tuple(inputs)
        self.k: int = int(k)
        self.cells: dict[tuple[str, str], TopK] = dict(cells)
        self.ground_truth: dict[str, int] | None = (
            dict(ground_truth) if ground_truth is not None else None
        )
        self._validate()
        self._reference: dict[str, int] | None = None

    def _validate(self):
        if self.k < 1:
            raise ConsistencyError(f"rank depth must be >= 1, got {self.k}")
        if len(set(self.inputs)) != len(self.inputs):
            raise ConsistencyError("duplicate input ids")
        if len(set(self.models)) != len(self.models):
            raise ConsistencyError("duplicate model ids")
        for m in self.models:
            for x in self.inputs:
                out = self.cells.get((m, x))
                if out is None:
                    raise ConsistencyError(f"missing cell ({m}, {x})")
                if len(out) != self.k:
                    raise ConsistencyError(
                        f"cell ({m}, {x}) has depth {len(out)}, expected k={self.k}"
                    )
                if len(set(out)) != len(out):
                    raise ConsistencyError(f"cell ({m}, {x}) repeats a label")
                if any(c < 0 for c in out):
                    raise ConsistencyError(f"cell ({m}, {x}) has a negative label")
        if len(self.cells) != len(self.models) * len(self.inputs):
            raise ConsistencyError("table has cells outside models x inputs")
        if self.ground_truth is not None:
            for x, c in self.ground_truth.items():
                if c < 0:
                    raise ConsistencyError(f"negative ground-truth label for {x}")

    @property
    def num_classes(self) -> int:
        labels = [c for out in self.cells.values() for c in out]
        if self.ground_truth:
            labels.extend(self.ground_truth.values())
        return max(2, max(labels) + 1)

    def output(self, model: str, input_id: str) -> TopK:
        return self.cells[(model, input_id)]

    def column(self, model: str) -> list[TopK]:
        return [self.cells[(model, x)] for x in self.inputs]

    def with_ground_truth(self, ground_truth: dict[str, int]) -> "PredictionTable":
        return PredictionTable(self.models, self.inputs, self.k, self.cells, ground_truth)

    def reference_classes(self) -> dict[str, int]:
        """Reference class per input, memoized on first use."""
        if self._reference is None:
            self._reference = {x: self.reference_class(x) for x in self.inputs}
        return self._reference

    def reference_class(self, input_id: str) -> int:
        """Ground truth if annotated, else majority top-1 vote over all models.

        Vote ties break toward the smallest label id, which makes the result
        independent of model ordering.
        """
        if self._reference is not None:
            return self._reference[input_id]
        if self.ground_truth is not None and input_id in self.ground_truth:
            return self.ground_truth[input_id]
        votes = Counter(self.cells[(m, input_id)][0] for m in self.models)
        best = max(votes.values())
        return min(c for c, n in votes.items() if n == best)


@dataclass(frozen=True)
class FamilyPartition:
    """Disjoint grouping of model ids into named families."""

    families: tuple[tuple[str, frozenset[str]], ...]
    flavor: str = "vanilla"

    def __post_init__(self):
        seen: set[str] = set()
        for fid, members in self.families:
            if not members:
                raise ConsistencyError(f"family {fid} is empty")
            if seen & members:
                raise ConsistencyError(f"family {fid} overlaps another family")
            seen |= members

    @classmethod
    def from_dict(cls, mapping: dict[str, list[str]], flavor: str = "vanilla"):
        fams = tuple(sorted((fid, frozenset(ms)) for fid, ms in mapping.items()))
        return cls(families=fams, flavor=flavor)

    def as_dict(self) -> dict[str, list[str]]:
        return {fid: sorted(ms) for fid, ms in self.families}

    def family_of(self) -> dict[str, str]:
        return {m: fid for fid, ms in self.families for m in ms}

    def members(self, fid: str) -> frozenset[str]:
        for f, ms in self.families:
            if f == fid:
                return ms
        raise KeyError(fid)


@dataclass(frozen=True)
class SelectionSubset:
    strategy: str
    input_ids: tuple[str, ...]
    seed: int


def _top1_entropy_bits(labels) -> float:
    counts = Counter(labels)
    n = len(labels)
    return -sum((c / n) * math.log2(c / n) for c in counts.values())


def select_inputs(
    table: PredictionTable,
    strategy: str,
    size: int,
    anchor_model: str | None = None,
    known_set=None,
    seed: int = 0,
) -> SelectionSubset:
    """Build the query-selection subset X' for one strategy.

    all:        uniform sample without replacement.
    split5050 / split3070: stratified by whether the anchor model's top-1
                matches the reference class (ratio holds within one element).
    entropy:    the `size` inputs whose top-1 labels across `known_set` have
                the highest empirical entropy; deterministic, ties broken by
                input id.
    """
    if strategy not in STRATEGIES:
        raise ParseError(f"unknown strategy {strategy!r}")
    if size > len(table.inputs):
        raise InsufficientPool(f"requested {size} inputs, table has {len(table.inputs)}")
    rng = np.random.default_rng(seed)

    if strategy == "all":
        ids = rng.choice(len(table.inputs), size=size, replace=False)
        chosen = tuple(table.inputs[i] for i in ids)
    elif strategy in ("split5050", "split3070"):
        if anchor_model is None:
            raise ParseError(f"{strategy} requires an anchor model")
        refs = table.reference_classes()
        correct = [x for x in table.inputs if table.cells[(anchor_model, x)][0] == refs[x]]
        wrong = [x for x in table.inputs if table.cells[(anchor_model, x)][0] != refs[x]]
        ratio = 0.5 if strategy == "split5050" else 0.3
        n_correct = int(round(size * ratio))
        n_wrong = size - n_correct
        if n_correct > len(correct):
            raise InsufficientPool(
                f"anchor-correct stratum has {len(correct)} inputs, need {n_correct}"
            )
        if n_wrong > len(wrong):
            raise InsufficientPool(
                f"anchor-wrong stratum has {len(wrong)} inputs, need {n_wrong}"
            )
        pick_c = rng.choice(len(correct), size=n_correct, replace=False)
        pick_w = rng.choice(len(wrong), size=n_wrong, replace=False)
        chosen = tuple(correct[i] for i in pick_c) + tuple(wrong[i] for i in pick_w)
    else:  # entropy
        if known_set is None:
            raise ParseError("entropy strategy requires a known model set")
        known = sorted(known_set)
        scored = [
            (x, _top1_entropy_bits([table.cells[(m, x)][0] for m in known]))
            for x in table.inputs
        ]
        scored.sort(key=lambda t: (-t[1], t[0]))
        chosen = tuple(x for x, _ in scored[:size])

    return SelectionSubset(strategy=strategy, input_ids=chosen, seed=seed)


# --- file formats -----------------------------------------------------------

CSV_HEADER = ["model", "input", "rank", "label"]
GT_HEADER = ["input", "label"]


def _infer_format(path, fmt):
    if fmt is not None:
        return fmt
    return "json" if str(path).endswith(".json") else "csv"


def load_table(path, fmt: str | None = None, ground_truth=None) -> PredictionTable:
    """Load and validate a prediction table from CSV or JSON.

    `ground_truth` may be a path to a ground-truth CSV or an input->label dict.
    """
    fmt = _infer_format(path, fmt)
    if fmt == "csv":
        table = _load_csv(path)
    elif fmt == "json":
        table = _load_json(path)
    else:
        raise ParseError(f"unknown table format {fmt!r}")
    if ground_truth is not None:
        if not isinstance(ground_truth, dict):
            ground_truth = load_ground_truth(ground_truth)
        table = table.with_ground_truth(ground_truth)
    return table


def _load_csv(path) -> PredictionTable:
    raw: dict[tuple[str, str], dict[int, int]] = {}
    models: list[str] = []
    inputs: list[str] = []
    seen_models: set[str] = set()
    seen_inputs: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ParseError(f"bad header {header!r}, expected {CSV_HEADER}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            model, input_id, rank_s, label_s = row
            try:
                rank = int(rank_s)
                label = int(label_s)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-integer rank or label") from exc
            if rank < 1:
                raise ParseError(f"{path}:{lineno}: rank must be >= 1")
            if label < 0:
                raise ParseError(f"{path}:{lineno}: label must be >= 0")
            key = (model, input_id)
            if key not in raw:
                raw[key] = {}
                if model not in seen_models:
                    seen_models.add(model)
                    models.append(model)
                if input_id not in seen_inputs:
                    seen_inputs.add(input_id)
                    inputs.append(input_id)
            if rank in raw[key]:
                raise ConsistencyError(f"{path}:{lineno}: duplicate cell {key} rank {rank}")
            raw[key][rank] = label
    if not raw:
        raise ParseError(f"{path}: empty table")
    k = max(max(ranks) for ranks in raw.values())
    cells = {}
    for key, ranks in raw.items():
        if sorted(ranks) != list(range(1, k + 1)):
            raise ConsistencyError(f"cell {key} has ranks {sorted(ranks)}, expected 1..{k}")
        cells[key] = tuple(ranks[r] for r in range(1, k + 1))
    return PredictionTable(models, inputs, k, cells)


def _load_json(path) -> PredictionTable:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON") from exc
    try:
        k = int(doc["k"])
        cells_doc = doc["cells"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: missing or invalid 'k'/'cells'") from exc
    models = list(cells_doc)
    inputs: list[str] = []
    cells = {}
    for m, row in cells_doc.items():
        for x, labels in row.items():
            if x not in inputs:
                inputs.append(x)
            cells[(m, x)] = tuple(int(c) for c in labels)
    gt = doc.get("ground_truth")
    if gt is not None:
        gt = {x: int(c) for x, c in gt.items()}
    return PredictionTable(models, inputs, k, cells, ground_truth=gt)


def load_ground_truth(path) -> dict[str, int]:
    gt: dict[str, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != GT_HEADER:
            raise ParseError(f"bad ground-truth header {header!r}, expected {GT_HEADER}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 fields")
            input_id, label_s = row
            try:
                label = int(label_s)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-integer label") from exc
            if input_id in gt:
                raise ConsistencyError(f"{path}:{lineno}: duplicate input {input_id}")
            gt[input_id] = label
    return gt


def save_table(table: PredictionTable, path, fmt: str | None = None):
    """Write a table in canonical form (rows sorted by model, input, rank)."""
    fmt = _infer_format(path, fmt)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for m in sorted(table.models):
                for x in sorted(table.inputs):
                    for rank, label in enumerate(table.cells[(m, x)], start=1):
                        writer.writerow([m, x, rank, label])
    elif fmt == "json":
        doc = {
            "k": table.k,
            "cells": {
                m: {x: list(table.cells[(m, x)]) for x in sorted(table.inputs)}
                for m in sorted(table.models)
            },
        }
        if table.ground_truth is not None:
            doc["ground_truth"] = dict(sorted(table.ground_truth.items()))
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    else:
        raise ParseError(f"unknown table format {fmt!r}")


def save_ground_truth(ground_truth: dict[str, int], path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GT_HEADER)
        for x in sorted(ground_truth):
            writer.writerow([x, ground_truth[x]])
