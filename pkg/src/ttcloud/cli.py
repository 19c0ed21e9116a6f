"""``ttcloud`` command line.

Every flag of a subcommand can also come from ``--config FILE`` (``key =
value`` lines, dashes or underscores); explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _bool(text: str) -> bool:
    t = str(text).lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _optional_int(text: str) -> int | None:
    return None if str(text).lower() in ("", "none", "all") else int(text)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    p.add_argument("--config", help="key = value file supplying defaults for any flag")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread count (1 for bit-reproducible runs)")


def _vec_fmt(p: argparse.ArgumentParser, name: str = "--format") -> None:
    p.add_argument(name, default="auto", choices=["auto", "fvecs", "raw-f32", "raw-f64"],
                   help="vector file format; auto: .fvecs, .f32, otherwise raw-f64")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttcloud", description="Tensor-train point clouds: training, search, indexing.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-toy", help="generate a 2-d toy cloud")
    p.add_argument("--kind", required=True, choices=["circles-grid", "semicircle", "mixture"])
    p.add_argument("--n", type=int, default=8192)
    p.add_argument("--out", required=True)
    _vec_fmt(p)
    _common(p)

    p = sub.add_parser("gen-mixture", help="generate a Gaussian-mixture database and queries")
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--n-queries", type=int, default=1000)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--components", type=int, default=16)
    p.add_argument("--out", required=True, help="database file")
    p.add_argument("--queries-out", required=True)
    _vec_fmt(p)
    _common(p)

    p = sub.add_parser("gen-ood", help="generate a normal bank with normal and anomalous test queries")
    p.add_argument("--n", type=int, default=50_000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--components", type=int, default=8)
    p.add_argument("--offset", type=float, default=3.0)
    p.add_argument("--prefix", required=True, help="writes PREFIX.train, PREFIX.normal, PREFIX.anomal")
    _vec_fmt(p)
    _common(p)

    p = sub.add_parser("train", help="fit a TT point cloud to data")
    p.add_argument("--data", required=True)
    _vec_fmt(p)
    p.add_argument("--preset", default="ood", choices=["ood", "ann", "toy"])
    p.add_argument("--dims", type=_ints, required=True, help="sample dims, e.g. 64,128")
    p.add_argument("--rank", type=_ints, required=True, help="one rank, or k-1 ranks")
    p.add_argument("--out", required=True, help="output .ttpc file")
    p.add_argument("--init", default="gaussian", choices=["gaussian", "ones"])
    p.add_argument("--calibrate", type=_bool, default=True, help="rescale the init to the data (default true)")
    for flag, typ in [
        ("--iterations", int), ("--lr0", float), ("--decay-factor", float), ("--decay-every", int),
        ("--grad-normalize", _bool), ("--als-iterations", int), ("--als-alpha", float),
        ("--sw-weight", float), ("--sw-projections", int), ("--nn-weight", float),
        ("--nn-alpha", float), ("--nn-sample-size", int), ("--nn-ref-sample-size", _optional_int),
        ("--checkpoint-every", int),
    ]:
        p.add_argument(flag, type=typ, default=None, help="override the preset value")
    p.add_argument("--metrics", help="JSONL training trace")
    p.add_argument("--checkpoint-dir")
    _common(p)

    p = sub.add_parser("materialize", help="write every leaf of a TT cloud")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    _vec_fmt(p)
    _common(p)

    p = sub.add_parser("build-index", help="bucket a database by nearest TT leaf")
    p.add_argument("--model", required=True)
    p.add_argument("--db", required=True)
    _vec_fmt(p)
    p.add_argument("--assign-beam", type=int, default=8)
    p.add_argument("--out", required=True, help="output index file")
    _common(p)

    p = sub.add_parser("query", help="two-stage nearest-neighbor queries against an index")
    p.add_argument("--index", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--queries", required=True)
    _vec_fmt(p)
    p.add_argument("--probe-k", type=int, default=8)
    p.add_argument("--out", required=True, help="CSV: query, best_id, sqdist, shortlist_len")
    _common(p)

    p = sub.add_parser("eval-ann", help="Recall@R and bucket statistics, TT vs ivf-flat")
    p.add_argument("--model", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--queries", required=True)
    _vec_fmt(p)
    p.add_argument("--rs", type=_ints, default=[1, 10, 100, 1000, 10000])
    p.add_argument("--probe-k", type=int, default=32)
    p.add_argument("--assign-beam", type=int, default=8)
    p.add_argument("--ivf-centroids", type=int, default=None, help="default: matched parameter count")
    p.add_argument("--out", required=True, help="metrics CSV")
    _common(p)

    p = sub.add_parser("eval-ood", help="detection metrics of full, TT and coreset banks")
    p.add_argument("--model", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--normal", required=True)
    p.add_argument("--anomal", required=True)
    _vec_fmt(p)
    p.add_argument("--out", required=True, help="metrics CSV")
    _common(p)

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    _common(p)
    return parser


def _scan(argv: list[str], flag: str) -> str | None:
    for i, tok in enumerate(argv):
        if tok.startswith(flag + "="):
            return tok.split("=", 1)[1]
        if tok == flag and i + 1 < len(argv):
            return argv[i + 1]
    return None


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv`` after installing ``--config`` values as subcommand defaults."""
    from .io import read_config

    path = _scan(argv, "--config")
    choices = parser._subparsers._group_actions[0].choices  # noqa: SLF001
    command = next((t for t in argv if t in choices), None)
    if path is None or command is None:
        return parser.parse_args(argv)
    sub = choices[command]
    dests = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}  # noqa: SLF001
    try:
        cfg = read_config(path)
    except OSError as exc:
        sub.error(f"cannot read config {path}: {exc}")
    except ValueError as exc:
        sub.error(str(exc))
    defaults = {}
    for key, raw in cfg.items():
        if key not in dests:
            sub.error(f"config {path}: unknown key {key!r}")
        action = dests[key]
        try:
            value = action.type(raw) if action.type is not None else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            sub.error(f"config {path}: bad value for {key}: {exc}")
        if action.choices is not None and value not in action.choices:
            sub.error(f"config {path}: {key} must be one of {list(action.choices)}")
        defaults[key] = value
    for a in sub._actions:  # noqa: SLF001
        if a.dest in defaults:
            a.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _load(path: str, fmt: str):
    from .io import load_vectors

    return load_vectors(path, fmt)


def _check_dims(what_a: str, da: int, what_b: str, db: int) -> None:
    if da != db:
        raise SystemExit(f"ttcloud: dimension mismatch: {what_a} has D={da}, {what_b} has D={db}")


def _save(cloud, path: str, fmt: str) -> None:
    from .io import save_vectors

    save_vectors(cloud, path, fmt)


def _write_csv(res, path: str) -> None:
    from .index import write_metrics_csv

    with open(path, "w", newline="") as fh:
        write_metrics_csv(res.rows, fh)


def cmd_gen_toy(a) -> int:
    from .datasets import ToySpec, gen_toy

    _save(gen_toy(ToySpec(a.kind, a.n, a.seed)), a.out, a.format)
    return 0


def cmd_gen_mixture(a) -> int:
    from .datasets import gaussian_mixture

    pts, _, _ = gaussian_mixture(a.n + a.n_queries, a.dim, a.components, seed=a.seed)
    _save(pts[: a.n], a.out, a.format)
    _save(pts[a.n :], a.queries_out, a.format)
    return 0


def cmd_gen_ood(a) -> int:
    from .datasets import ood_benchmark

    b = ood_benchmark(a.n, a.n_test, a.dim, a.components, a.offset, seed=a.seed)
    ext = ".fvecs" if a.format == "fvecs" else ".f32" if a.format == "raw-f32" else ".raw"
    for key, name in (("train", "train"), ("test_normal", "normal"), ("test_anomal", "anomal")):
        _save(b[key], f"{a.prefix}.{name}{ext}", a.format)
    return 0


_TRAIN_FIELDS = ("iterations", "lr0", "decay_factor", "decay_every", "grad_normalize",
                 "als_iterations", "als_alpha", "checkpoint_every")
_LOSS_FIELDS = ("sw_weight", "sw_projections", "nn_weight", "nn_alpha", "nn_sample_size")


def cmd_train(a) -> int:
    from .training import config_to_dict, preset, train
    from .tt import TTShape, init_tt, save_tt

    X = _load(a.data, a.format)
    ranks = a.rank[0] if len(a.rank) == 1 else a.rank
    shape = TTShape(a.dims, X.shape[1], ranks)
    overrides = {k: getattr(a, k) for k in _TRAIN_FIELDS if getattr(a, k) is not None}
    overrides.update({f"loss_{k}": getattr(a, k) for k in _LOSS_FIELDS if getattr(a, k) is not None})
    if a.nn_ref_sample_size is not None:
        overrides["loss_nn_ref_sample_size"] = a.nn_ref_sample_size
    cfg = preset(a.preset, seed=a.seed, **overrides)
    tt0 = init_tt(shape, seed=a.seed, scheme=a.init, calibrate=X if a.calibrate else None)
    if a.checkpoint_dir:
        Path(a.checkpoint_dir).mkdir(parents=True, exist_ok=True)
    tt, rep = train(X, tt0, cfg, metrics_path=a.metrics, checkpoint_dir=a.checkpoint_dir)
    save_tt(tt, a.out)
    summary = {
        "params": tt.param_count(),
        "initial_sw": rep.initial_sw,
        "final_sw": rep.final_sw,
        "config": config_to_dict(cfg),
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_materialize(a) -> int:
    from .tt import load_tt, materialize

    _save(materialize(load_tt(a.model)), a.out, a.format)
    return 0


def cmd_build_index(a) -> int:
    from .index import build_index, empty_bucket_count, expected_bucket_size, save_index
    from .tt import load_tt, marginal_cores

    tt = load_tt(a.model)
    db = _load(a.db, a.format)
    _check_dims("model " + a.model, tt.feature_dim, "database " + a.db, db.shape[1])
    idx = build_index(tt, marginal_cores(tt), db, a.assign_beam)
    save_index(idx, a.out)
    print(json.dumps({"buckets": idx.n_buckets, "empty": empty_bucket_count(idx),
                      "expected_bucket_size": expected_bucket_size(idx)}))
    return 0


def cmd_query(a) -> int:
    import csv

    from .index import load_index, query_index

    db = _load(a.db, a.format)
    idx = load_index(a.index, db)
    Q = _load(a.queries, a.format)
    _check_dims("index " + a.index, idx.tt.feature_dim, "queries " + a.queries, Q.shape[1])
    with open(a.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query", "best_id", "sqdist", "shortlist_len"])
        for i, q in enumerate(Q):
            shortlist, best = query_index(idx, q, a.probe_k)
            if best is None:
                w.writerow([i, "", "", 0])
            else:
                w.writerow([i, best[0], repr(best[1]), len(shortlist)])
    return 0


def cmd_eval_ann(a) -> int:
    from .evaluation import evaluate_ann
    from .tt import load_tt

    tt = load_tt(a.model)
    db = _load(a.db, a.format)
    Q = _load(a.queries, a.format)
    _check_dims("model " + a.model, tt.feature_dim, "database " + a.db, db.shape[1])
    _check_dims("database " + a.db, db.shape[1], "queries " + a.queries, Q.shape[1])
    res, _ = evaluate_ann(tt, db, Q, a.rs, a.probe_k, a.assign_beam, a.ivf_centroids, seed=a.seed)
    _write_csv(res, a.out)
    return 0


def cmd_eval_ood(a) -> int:
    from .evaluation import evaluate_ood
    from .tt import load_tt

    tt = load_tt(a.model)
    train = _load(a.train, a.format)
    normal = _load(a.normal, a.format)
    anomal = _load(a.anomal, a.format)
    _check_dims("model " + a.model, tt.feature_dim, "bank " + a.train, train.shape[1])
    _check_dims("bank " + a.train, train.shape[1], "normal queries " + a.normal, normal.shape[1])
    _check_dims("bank " + a.train, train.shape[1], "anomalous queries " + a.anomal, anomal.shape[1])
    _write_csv(evaluate_ood(tt, train, normal, anomal, seed=a.seed), a.out)
    return 0


def cmd_selftest(a) -> int:
    from .selftest import run_all

    ok = True
    for name, passed, detail in run_all(seed=a.seed):
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        ok &= passed
    return 0 if ok else 1


COMMANDS = {
    "gen-toy": cmd_gen_toy,
    "gen-mixture": cmd_gen_mixture,
    "gen-ood": cmd_gen_ood,
    "train": cmd_train,
    "materialize": cmd_materialize,
    "build-index": cmd_build_index,
    "query": cmd_query,
    "eval-ann": cmd_eval_ann,
    "eval-ood": cmd_eval_ood,
    "selftest": cmd_selftest,
}


def _early_threads(argv: list[str]) -> None:
    # must run before numpy is first imported; BLAS reads these once
    val = _scan(argv, "--threads")
    if val is not None and val.isdigit():
        for var in _THREAD_VARS:
            os.environ[var] = val


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _early_threads(argv)
    parser = build_parser()
    args = _apply_config(parser, argv)
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError) as exc:
        print(f"ttcloud {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
