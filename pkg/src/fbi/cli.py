"""Command-line front end.

Exit codes: 0 success, 1 other toolkit error, 2 malformed input or config,
3 query budget exhausted, 4 degenerate evidence (all sequences constant).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from . import corpus, distance, open_world, walled_garden
from .distance import SurjectedSeq
from .errors import (
    BudgetExhausted,
    ConfigError,
    ConsistencyError,
    DegenerateEvidence,
    FingerprintError,
    ParseError,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARSE = 2
EXIT_BUDGET = 3
EXIT_DEGENERATE = 4


def _seed_arg(parser):
    parser.add_argument("--seed", type=int, default=None,
                        help="RNG seed (default: FBI_SEED env var, else 0)")


def _resolve_seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("FBI_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"FBI_SEED must be an integer, got {env!r}") from exc
    return 0


def _load_table(args) -> corpus.PredictionTable:
    gt = getattr(args, "gt", None)
    return corpus.load_table(args.table, ground_truth=gt)


def _blackbox(spec: str, table):
    kind, _, rest = spec.partition(":")
    if kind != "replay" or not rest:
        raise ConfigError(f"unsupported black-box spec {spec!r}; use replay:<model>")
    return rest, walled_garden.replay_oracle(table, rest)


def _family_arg(raw: str) -> list[str]:
    ids = [m.strip() for m in raw.split(",") if m.strip()]
    if not ids:
        raise ConfigError("family must list at least one model id")
    return ids


def _load_partition(path) -> corpus.FamilyPartition:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON") from exc
    fams = doc.get("families", doc) if isinstance(doc, dict) else None
    if not isinstance(fams, dict):
        raise ParseError(f"{path}: expected a families object")
    return corpus.FamilyPartition.from_dict(
        {fid: list(ms) for fid, ms in fams.items()},
        flavor=doc.get("flavor", "vanilla") if isinstance(doc, dict) else "vanilla",
    )


def _save_partition(part: corpus.FamilyPartition, path):
    with open(path, "w") as fh:
        json.dump({"flavor": part.flavor, "families": part.as_dict()}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")


# --- subcommands ------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = open_world.parse_kv_config(args.spec) if args.spec else {}
    if args.seed is not None:
        cfg["seed"] = str(args.seed)
    cfg.setdefault("seed", str(_resolve_seed(args)))
    ens = open_world.ensemble_from_config(cfg)
    corpus.save_table(ens.table, args.out)
    if args.gt_out:
        corpus.save_ground_truth(ens.table.ground_truth, args.gt_out)
    if args.partition_out:
        _save_partition(ens.partitions[args.partition_flavor], args.partition_out)
    if args.manifest_out:
        with open(args.manifest_out, "w") as fh:
            json.dump(ens.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    n_dropped = len(ens.manifest["dropped"])
    print(f"simulated {len(ens.table.models)} models x {len(ens.table.inputs)} inputs "
          f"(k={ens.table.k}, dropped {n_dropped} variants)")
    return EXIT_OK


def cmd_ingest_check(args) -> int:
    table = _load_table(args)
    refs = table.reference_classes()
    gt_note = "ground truth" if table.ground_truth else "majority vote"
    print(f"ok: {len(table.models)} models, {len(table.inputs)} inputs, "
          f"k={table.k}, {table.num_classes} classes, references from {gt_note}")
    assert len(refs) == len(table.inputs)
    return EXIT_OK


def cmd_distance_matrix(args) -> int:
    table = _load_table(args)
    seed = _resolve_seed(args)
    size = args.L if args.L is not None else len(table.inputs)
    subset = corpus.select_inputs(table, args.strategy, size,
                                  anchor_model=args.anchor,
                                  known_set=table.models, seed=seed)
    values = distance.surjected_matrix(table, subset.input_ids)
    mat = distance.pairwise_distance_matrix(values, table.k, threads=args.threads)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model"] + list(table.models))
        for i, m in enumerate(table.models):
            writer.writerow([m] + [f"{v:.6f}" for v in mat[i]])
    print(f"wrote {len(table.models)}x{len(table.models)} distance matrix to {args.out}")
    return EXIT_OK


def _dump_json(doc, path):
    if path:
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def cmd_detect_wg(args) -> int:
    table = _load_table(args)
    _, oracle = _blackbox(args.blackbox, table)
    outcome = walled_garden.detect(
        table, _family_arg(args.family), oracle, rule=args.rule,
        max_queries=args.max_queries, tie_break=args.tie_break,
        seed=_resolve_seed(args),
    )
    _dump_json({
        "verdict": outcome.verdict.value,
        "queries_used": outcome.queries_used,
        "transcript": [[x, list(out)] for x, out in outcome.transcript],
        "candidate_sizes": [list(t) for t in outcome.candidate_sizes],
        "remaining_family": sorted(outcome.remaining_family),
        "remaining_outside": sorted(outcome.remaining_outside),
    }, args.out)
    print(f"{outcome.verdict.value} after {outcome.queries_used} queries")
    return EXIT_OK


def cmd_identify_wg(args) -> int:
    table = _load_table(args)
    _, oracle = _blackbox(args.blackbox, table)
    outcome = walled_garden.identify(
        table, _load_partition(args.partition), oracle, rule=args.rule,
        max_queries=args.max_queries, tie_break=args.tie_break,
        seed=_resolve_seed(args),
    )
    _dump_json({
        "family_id": outcome.family_id,
        "queries_used": outcome.queries_used,
        "transcript": [[x, list(out)] for x, out in outcome.transcript],
        "surviving_families": list(outcome.surviving_families),
        "remaining_models": sorted(outcome.remaining_models),
    }, args.out)
    if outcome.failed:
        print(f"failure after {outcome.queries_used} queries "
              f"({len(outcome.remaining_models)} models indistinguishable)")
    else:
        print(f"family {outcome.family_id} after {outcome.queries_used} queries")
    return EXIT_OK


def _query_seqs(table, part, test, seed):
    """Shared query subset plus per-family delegate sequences for one test."""
    fams = sorted(part.as_dict().items())
    anchor = fams[0][1][0]
    subset = corpus.select_inputs(table, test.strategy, test.L,
                                  anchor_model=anchor, known_set=table.models,
                                  seed=seed)
    refs = table.reference_classes()
    ref_list = [refs[x] for x in subset.input_ids]
    return subset, ref_list


def _surject_answers(oracle, input_ids, ref_list, k) -> SurjectedSeq:
    return SurjectedSeq(
        tuple(distance.surject(tuple(oracle(x)), ref) for x, ref in zip(input_ids, ref_list)),
        k,
    )


def cmd_calibrate(args) -> int:
    table = _load_table(args)
    part = _load_partition(args.partition)
    seed = _resolve_seed(args)
    fam_of = part.family_of()
    known = {m: fam_of[m] for m in table.models if m in fam_of}
    subset = corpus.select_inputs(table, args.strategy, args.L,
                                  anchor_model=sorted(known)[0],
                                  known_set=table.models, seed=seed)
    refs = table.reference_classes()
    ref_list = [refs[x] for x in subset.input_ids]
    seqs = {
        m: distance.surject_column(
            [table.cells[(m, x)] for x in subset.input_ids], ref_list, table.k
        )
        for m in known
    }
    pairs = [
        (seqs[a], seqs[b])
        for i, a in enumerate(sorted(known))
        for b in sorted(known)[i + 1:]
        if fam_of[a] != fam_of[b]
    ]
    test = open_world.calibrate_threshold(pairs, args.alpha, L=args.L,
                                          strategy=args.strategy)
    with open(args.out, "w") as fh:
        json.dump(test.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"tau={test.tau:.6f} from {test.negatives_used} negative pairs "
          f"(alpha={test.alpha}, L={test.L}, {test.strategy})")
    return EXIT_OK


def _load_test(path) -> open_world.CalibratedTest:
    with open(path) as fh:
        try:
            return open_world.CalibratedTest.from_dict(json.load(fh))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ParseError(f"{path}: invalid calibrated test") from exc


def cmd_detect_ow(args) -> int:
    table = _load_table(args)
    test = _load_test(args.test)
    seed = _resolve_seed(args)
    family = _family_arg(args.family)
    choice = open_world.choose_delegate(family, family[0], table, args.delegate,
                                        test.L, seed=seed)
    subset = corpus.select_inputs(table, test.strategy, test.L,
                                  anchor_model=choice.delegate_ids[0],
                                  known_set=table.models, seed=seed)
    refs = table.reference_classes()
    ref_list = [refs[x] for x in subset.input_ids]
    _, oracle = _blackbox(args.blackbox, table)
    b_seq = _surject_answers(oracle, subset.input_ids, ref_list, table.k)
    delegate_seqs = [
        distance.surject_column(
            [table.cells[(m, x)] for x in subset.input_ids], ref_list, table.k
        )
        for m in choice.delegate_ids
    ]
    res = open_world.detect_variant(b_seq, delegate_seqs, test)
    _dump_json({
        "positive": res.positive,
        "distance": res.distance,
        "tau": test.tau,
        "delegates": sorted(choice.delegate_ids),
        "queries": list(subset.input_ids),
    }, args.out)
    print(f"{'positive' if res.positive else 'negative'} "
          f"(distance {res.distance:.6f}, tau {test.tau:.6f})")
    return EXIT_OK


def cmd_identify_ow(args) -> int:
    table = _load_table(args)
    test = _load_test(args.test)
    part = _load_partition(args.partition)
    seed = _resolve_seed(args)
    subset, ref_list = _query_seqs(table, part, test, seed)
    _, oracle = _blackbox(args.blackbox, table)
    b_seq = _surject_answers(oracle, subset.input_ids, ref_list, table.k)
    known = []
    for fid, members in sorted(part.as_dict().items()):
        choice = open_world.choose_delegate(members, members[0], table,
                                            args.delegate, test.L, seed=seed)
        known.append((fid, [
            distance.surject_column(
                [table.cells[(m, x)] for x in subset.input_ids], ref_list, table.k
            )
            for m in choice.delegate_ids
        ]))
    verdict = open_world.identify_family(b_seq, known, test)
    _dump_json({
        "decision": verdict.decision,
        "distances": {fid: d for fid, d in sorted(verdict.distances.items())},
        "margin": verdict.margin,
        "tau": test.tau,
    }, args.out)
    if verdict.decision is None:
        print(f"abstain (best distance {min(verdict.distances.values()):.6f} "
              f">= tau {test.tau:.6f})")
    else:
        print(f"family {verdict.decision} "
              f"(distance {verdict.distances[verdict.decision]:.6f}, "
              f"margin {verdict.margin:.6f})")
    return EXIT_OK


def cmd_protocol(args) -> int:
    cfg = open_world.parse_kv_config(args.config)
    if args.seed is not None:
        cfg["seed"] = str(args.seed)
    elif "seed" not in cfg:
        cfg["seed"] = str(_resolve_seed(args))
    rows = open_world.run_protocol(cfg)
    open_world.write_report(rows, csv_path=args.out_csv, json_path=args.out_json)
    targets = [p for p in (args.out_csv, args.out_json) if p]
    print(f"wrote {len(rows)} report rows to {', '.join(targets)}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fbi", description="Black-box classifier fingerprinting toolkit."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic model ensemble")
    p.add_argument("--spec", help="flat key=value config file")
    p.add_argument("--out", required=True, help="prediction table path (.csv/.json)")
    p.add_argument("--gt-out", help="ground-truth CSV path")
    p.add_argument("--partition-out", help="family partition JSON path")
    p.add_argument("--partition-flavor", default="vanilla",
                   choices=("vanilla", "variation", "singleton"))
    p.add_argument("--manifest-out", help="generation manifest JSON path")
    _seed_arg(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest-check", help="validate a prediction table")
    p.add_argument("table")
    p.add_argument("--gt", help="ground-truth CSV")
    p.set_defaults(func=cmd_ingest_check)

    p = sub.add_parser("distance-matrix", help="pairwise model distance matrix")
    p.add_argument("table")
    p.add_argument("--gt", help="ground-truth CSV")
    p.add_argument("--out", required=True)
    p.add_argument("-L", type=int, default=None, help="query count (default: all inputs)")
    p.add_argument("--strategy", default="all", choices=corpus.STRATEGIES)
    p.add_argument("--anchor", help="anchor model for split strategies")
    p.add_argument("--threads", type=int, default=1)
    _seed_arg(p)
    p.set_defaults(func=cmd_distance_matrix)

    for name, func in (("detect-wg", cmd_detect_wg), ("identify-wg", cmd_identify_wg)):
        p = sub.add_parser(name, help=f"exact-knowledge {name.split('-')[0]}ion")
        p.add_argument("table")
        p.add_argument("--gt", help="ground-truth CSV")
        p.add_argument("--blackbox", required=True, help="replay:<model>")
        if name == "detect-wg":
            p.add_argument("--family", required=True, help="comma-separated model ids")
        else:
            p.add_argument("--partition", required=True, help="partition JSON")
        p.add_argument("--rule", default="expectation", choices=walled_garden.SCORE_RULES)
        p.add_argument("--max-queries", type=int, default=None)
        p.add_argument("--tie-break", default="id", choices=("id", "random"))
        p.add_argument("--out", help="verdict + transcript JSON path")
        _seed_arg(p)
        p.set_defaults(func=func)

    p = sub.add_parser("calibrate", help="calibrate the distance threshold")
    p.add_argument("table")
    p.add_argument("--gt", help="ground-truth CSV")
    p.add_argument("--partition", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("-L", type=int, required=True)
    p.add_argument("--strategy", default="all", choices=corpus.STRATEGIES)
    p.add_argument("--out", required=True, help="calibrated test JSON path")
    _seed_arg(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("detect-ow", help="statistical variant detection")
    p.add_argument("table")
    p.add_argument("--gt", help="ground-truth CSV")
    p.add_argument("--blackbox", required=True, help="replay:<model>")
    p.add_argument("--family", required=True, help="comma-separated model ids")
    p.add_argument("--test", required=True, help="calibrated test JSON")
    p.add_argument("--delegate", default="close")
    p.add_argument("--out", help="verdict JSON path")
    _seed_arg(p)
    p.set_defaults(func=cmd_detect_ow)

    p = sub.add_parser("identify-ow", help="statistical family identification")
    p.add_argument("table")
    p.add_argument("--gt", help="ground-truth CSV")
    p.add_argument("--blackbox", required=True, help="replay:<model>")
    p.add_argument("--partition", required=True)
    p.add_argument("--test", required=True, help="calibrated test JSON")
    p.add_argument("--delegate", default="close")
    p.add_argument("--out", help="verdict JSON path")
    _seed_arg(p)
    p.set_defaults(func=cmd_identify_ow)

    p = sub.add_parser("protocol", help="run a full seeded measurement protocol")
    p.add_argument("--config", required=True, help="flat key=value config file")
    p.add_argument("--out-csv")
    p.add_argument("--out-json")
    _seed_arg(p)
    p.set_defaults(func=cmd_protocol)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, ConfigError, ConsistencyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except BudgetExhausted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except DegenerateEvidence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except FingerprintError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
