"""Command-line driver.

Subcommands cover the whole workflow: generate a synthetic dataset,
train the unsupervised codebooks or the network, build an index, run a
single query, sweep mAP against shortlist size, and run the
finite-difference gradient suite.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Global flags
--seed, --config (key=value file, consulted for any option left unset)
and --threads apply to every subcommand.  All outputs are deterministic
for a fixed seed and thread count.
"""

import argparse
import logging
import sys

import numpy as np

from .codebooks import KMeansConfig, kmeans_train, pq_train, vq_assign_batch
from .eval_harness import (
    curve_to_csv,
    judgments_from_labels,
    map_at_T,
    read_features,
    synth_split,
    write_features,
)
from .gradcheck import run_gradient_suite
from .indexing_net import NetworkConfig, TrainConfig, init_params, train
from .ivf_index import imi_assign_batch
from .search_engine import (
    PipelineConfig,
    build_index,
    load_index,
    load_models,
    query,
    save_index,
    save_models,
)

log = logging.getLogger(__name__)

_VARIANT_ALIASES = {
    "subic-i": "subic_i",
    "subic-j": "subic_j",
    "subic-r": "subic_r",
    "subic-imi": "subic_imi",
}

# cross-validated defaults for the entropy-loss weights
_SELECTOR_WEIGHTS = {"subic_i": (5.0, 6.0), "subic_j": (5.0, 6.0),
                     "subic_r": (5.0, 6.0), "subic_imi": (4.0, 5.0)}
_ENCODER_WEIGHTS = (0.6, 0.9)


def _read_config_file(path):
    pairs = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            pairs[key.strip().replace("-", "_")] = value.strip()
    return pairs


def _resolve_options(args, casters, defaults):
    """Option precedence: command line, then --config file, then defaults.

    Options never given on the command line sit at None here; the config
    file fills them first, built-in defaults fill the rest.
    """
    if getattr(args, "config", None):
        for dest, raw in _read_config_file(args.config).items():
            if getattr(args, dest, "__missing__") is None:
                setattr(args, dest, casters.get(dest, str)(raw))
    for dest, value in defaults.items():
        if getattr(args, dest, "__missing__") is None:
            setattr(args, dest, value)


class _Parser(argparse.ArgumentParser):
    """Defers option defaults so a --config file can fill unset options.

    Records each option's type and intended default, and hands argparse a
    None default instead (required options and flags are left alone).
    """

    def add_argument(self, *a, **kw):
        self._casters = getattr(self, "_casters", {})
        self._defaults = getattr(self, "_defaults", {})
        deferred = None
        if ("default" in kw and kw["default"] is not None
                and kw["default"] is not argparse.SUPPRESS and not kw.get("required")):
            deferred = kw["default"]
            kw["default"] = None
        action = super().add_argument(*a, **kw)
        self._casters[action.dest] = kw.get("type", str)
        if deferred is not None:
            self._defaults[action.dest] = deferred
        return action


def _add_global_flags(p, suppress=False):
    """The global flags parse before or after the subcommand name; the
    subparser copies use SUPPRESS so an absent flag never clobbers a value
    parsed at the top level."""
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=default, help="random seed (default 0)")
    p.add_argument("--config", type=str, default=default,
                   help="key=value file supplying defaults for unset options")
    p.add_argument("--threads", type=int, default=default,
                   help="worker threads for query evaluation (default 1)")
    p.add_argument("--verbose", action="store_true", default=default,
                   help="log progress")


def build_parser():
    parser = _Parser(prog="blockindex",
                     description="Inverted-file vector indexing engine")
    _add_global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    _add_global_flags(p, suppress=True)
    p.add_argument("--classes", type=int, default=32)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--queries-per-class", type=int, default=5)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--spread", type=float, default=2.0)
    p.add_argument("--out-db", required=True)
    p.add_argument("--out-queries", required=True)

    p = sub.add_parser("train-codebooks", help="k-means coarse + product codebooks")
    _add_global_flags(p, suppress=True)
    p.add_argument("--features", required=True)
    p.add_argument("--pipeline", choices=["ivf_pq", "imi_pq"], default="ivf_pq")
    p.add_argument("--bins", type=int, default=None, help="N for ivf_pq")
    p.add_argument("--k-imi", type=int, default=None, help="per-axis bins for imi_pq")
    p.add_argument("--blocks", type=int, default=8, help="fine-code blocks M")
    p.add_argument("--codewords", type=int, default=256, help="fine-code size K")
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-net", help="train the indexing network")
    _add_global_flags(p, suppress=True)
    p.add_argument("--features", required=True)
    p.add_argument("--variant", required=True,
                   choices=sorted(_VARIANT_ALIASES) + sorted(_VARIANT_ALIASES.values()))
    p.add_argument("--bins", type=int, default=None, help="N (flat variants)")
    p.add_argument("--k-imi", type=int, default=None, help="per-axis bins (subic-imi)")
    p.add_argument("--blocks", type=int, default=8)
    p.add_argument("--codewords", type=int, default=256)
    p.add_argument("--batches", type=int, default=5000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--mu1", type=float, default=None)
    p.add_argument("--gamma1", type=float, default=None)
    p.add_argument("--mu2", type=float, default=None)
    p.add_argument("--gamma2", type=float, default=None)
    p.add_argument("--pretrained", default=None,
                   help="checkpoint supplying the frozen bin block (subic-r)")
    p.add_argument("--encoder-from", default=None,
                   help="checkpoint supplying a fixed encoder block (subic-imi)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("build", help="build an index from features + checkpoint")
    _add_global_flags(p, suppress=True)
    p.add_argument("--features", required=True)
    p.add_argument("--model", required=True, help="checkpoint from a train-* command")
    p.add_argument("--out", required=True)

    p = sub.add_parser("query", help="run one query against an index")
    _add_global_flags(p, suppress=True)
    p.add_argument("--index", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--row", type=int, default=0)
    p.add_argument("--target", type=int, required=True, help="shortlist size T")
    p.add_argument("--top", type=int, default=20, help="rows to print")

    p = sub.add_parser("eval", help="mAP vs shortlist size sweep (CSV)")
    _add_global_flags(p, suppress=True)
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--database", default=None,
                   help="labeled database features (defaults to --queries labels "
                        "against the indexed ids)")
    p.add_argument("--schedule", default=None,
                   help="comma-separated bin budgets B (default: powers of two)")
    p.add_argument("--out", default=None, help="CSV path (default stdout)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_global_flags(p, suppress=True)
    p.add_argument("--nets", type=int, default=4, help="networks per combination")
    p.add_argument("--tol", type=float, default=1e-6)

    # pool option types and deferred defaults across all subparsers
    casters = dict(getattr(parser, "_casters", {}))
    defaults = dict(getattr(parser, "_defaults", {}))
    for sp in sub.choices.values():
        casters.update(getattr(sp, "_casters", {}))
        defaults.update(getattr(sp, "_defaults", {}))
    return parser, casters, defaults


def _cmd_synth(args, seed):
    db, queries = synth_split(
        args.classes, args.per_class, args.queries_per_class,
        args.dim, args.spread, seed,
    )
    write_features(args.out_db, db)
    write_features(args.out_queries, queries)
    print(f"wrote {db.count} database and {queries.count} query vectors (dim {db.dim})")
    return 0


def _cmd_train_codebooks(args, seed):
    data = read_features(args.features)
    X = np.asarray(data.vectors, dtype=np.float64)
    if args.pipeline == "ivf_pq":
        if args.bins is None:
            raise ValueError("ivf_pq needs --bins")
        coarse = kmeans_train(
            data, KMeansConfig(n_clusters=args.bins, max_iters=args.max_iters,
                               tol=args.tol, seed=seed))
        assign = vq_assign_batch(X, coarse)
        residuals = X - coarse.centroids[assign]
        fine = pq_train(residuals, args.blocks, args.codewords,
                        KMeansConfig(n_clusters=args.codewords,
                                     max_iters=args.max_iters, tol=args.tol,
                                     seed=seed + 1))
        cfg = PipelineConfig(pipeline="ivf_pq", M=args.blocks, K=args.codewords,
                             n_bins=args.bins, coarse=coarse, fine=fine)
    else:
        if args.k_imi is None:
            raise ValueError("imi_pq needs --k-imi")
        coarse2 = pq_train(X, 2, args.k_imi,
                           KMeansConfig(n_clusters=args.k_imi,
                                        max_iters=args.max_iters, tol=args.tol,
                                        seed=seed))
        keys = imi_assign_batch(X, coarse2)
        k, l = keys // args.k_imi, keys % args.k_imi
        recon = np.concatenate(
            [coarse2.sub_codebooks[0].centroids[k],
             coarse2.sub_codebooks[1].centroids[l]], axis=1)
        fine = pq_train(X - recon, args.blocks, args.codewords,
                        KMeansConfig(n_clusters=args.codewords,
                                     max_iters=args.max_iters, tol=args.tol,
                                     seed=seed + 1))
        cfg = PipelineConfig(pipeline="imi_pq", M=args.blocks, K=args.codewords,
                             k_imi=args.k_imi, coarse2=coarse2, fine=fine)
    save_models(args.out, cfg)
    print(f"wrote {args.pipeline} codebooks to {args.out}")
    return 0


def _cmd_train_net(args, seed):
    variant = _VARIANT_ALIASES.get(args.variant, args.variant)
    data = read_features(args.features)
    if data.labels is None:
        raise ValueError("train-net needs a labeled feature file (CIPL)")

    mu1, gamma1 = _SELECTOR_WEIGHTS[variant]
    mu2, gamma2 = _ENCODER_WEIGHTS
    if args.mu1 is not None:
        mu1 = args.mu1
    if args.gamma1 is not None:
        gamma1 = args.gamma1
    if args.mu2 is not None:
        mu2 = args.mu2
    if args.gamma2 is not None:
        gamma2 = args.gamma2

    if variant == "subic_imi":
        if args.k_imi is None:
            raise ValueError("subic-imi needs --k-imi")
        n_bins = args.k_imi
    else:
        if args.bins is None:
            raise ValueError(f"{variant} needs --bins")
        n_bins = args.bins

    net_cfg = NetworkConfig.for_variant(
        variant, d=data.dim, n_bins=n_bins, M=args.blocks, K=args.codewords,
        n_classes=data.class_count, mu1=mu1, gamma1=gamma1, mu2=mu2, gamma2=gamma2,
    )
    rng = np.random.default_rng(seed)
    params = init_params(net_cfg, rng)

    frozen = set()
    if variant == "subic_r":
        if args.pretrained is None:
            raise ValueError("subic-r needs --pretrained (a trained bin block)")
        pre = load_models(args.pretrained)
        if pre.net is None:
            raise ValueError(f"{args.pretrained} holds no network checkpoint")
        params.W1 = pre.net.W1.copy()
        params.C1 = pre.net.C1.copy()
        frozen |= {"W1", "C1"}
    if args.encoder_from is not None:
        pre = load_models(args.encoder_from)
        if pre.net is None:
            raise ValueError(f"{args.encoder_from} holds no network checkpoint")
        params.W2 = pre.net.W2.copy()
        params.C2 = pre.net.C2.copy()
        frozen |= {"W2", "C2"}
    params.frozen = frozenset(frozen)

    tcfg = TrainConfig(batch_size=args.batch_size, num_batches=args.batches,
                       learning_rate=args.lr, momentum=args.momentum, seed=seed)
    params = train(data, net_cfg, tcfg, init=params)

    if variant == "subic_imi":
        cfg = PipelineConfig(pipeline=variant, M=args.blocks, K=args.codewords,
                             k_imi=n_bins, net=params, net_config=net_cfg)
    else:
        cfg = PipelineConfig(pipeline=variant, M=args.blocks, K=args.codewords,
                             n_bins=n_bins, net=params, net_config=net_cfg)
    save_models(args.out, cfg)
    print(f"wrote {variant} checkpoint to {args.out}")
    return 0


def _cmd_build(args, seed):
    data = read_features(args.features)
    cfg = load_models(args.model)
    index = build_index(data, cfg)
    save_index(args.out, index, cfg)
    print(f"indexed {index.total_entries()} vectors into {len(index.bins)} "
          f"materialized bins ({args.out})")
    return 0


def _cmd_query(args, seed):
    index, cfg = load_index(args.index)
    data = read_features(args.features)
    if not 0 <= args.row < data.count:
        raise ValueError(f"--row {args.row} out of range [0, {data.count})")
    res = query(data.vectors[args.row], index, cfg, args.target)
    print("rank,image_id,score")
    for rank in range(min(args.top, res.ranked_ids.size)):
        print(f"{rank + 1},{res.ranked_ids[rank]},{res.scores[rank]:.6f}")
    print(f"# bins_scanned={res.bins_scanned} candidates={res.candidates}",
          file=sys.stderr)
    return 0


def _default_schedule(index):
    budgets = []
    b = 1
    limit = max(1, len(index.nonempty_ids()) if index.kind == "imi" else index.n_bins)
    while b < limit:
        budgets.append(b)
        b *= 2
    budgets.append(limit)
    return budgets


def _cmd_eval(args, seed, threads):
    index, cfg = load_index(args.index)
    queries = read_features(args.queries)
    database = read_features(args.database) if args.database else None
    if database is None:
        raise ValueError("eval needs --database (labeled features) for relevance")
    judgments = judgments_from_labels(database, queries)
    if args.schedule:
        schedule = [int(b) for b in args.schedule.split(",")]
    else:
        schedule = _default_schedule(index)
    points = map_at_T(index, queries, judgments, cfg, schedule, threads=threads)
    csv = curve_to_csv(points)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(csv)
    else:
        sys.stdout.write(csv)
    return 0


def _cmd_gradcheck(args, seed):
    ok, rows = run_gradient_suite(seed=seed, nets_per_combo=args.nets, tol=args.tol)
    for row in rows:
        status = "ok" if row["ok"] else "FAIL"
        print(f"{status} objective={row['objective']} residual={row['residual']} "
              f"trial={row['trial']} max_rel_err={row['max_rel_err']:.3e}")
    print(f"gradient suite: {'all passed' if ok else 'FAILURES'} "
          f"({len(rows)} networks)")
    return 0 if ok else 1


def main(argv=None):
    parser, casters, defaults = build_parser()
    args = parser.parse_args(argv)
    try:
        _resolve_options(args, casters, defaults)
        seed = args.seed if args.seed is not None else 0
        threads = args.threads if args.threads is not None else 1
        if threads < 1:
            raise ValueError("--threads must be >= 1")
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        handler = {
            "synth": _cmd_synth,
            "train-codebooks": _cmd_train_codebooks,
            "train-net": _cmd_train_net,
            "build": _cmd_build,
            "query": _cmd_query,
            "gradcheck": _cmd_gradcheck,
        }.get(args.command)
        if handler is not None:
            return handler(args, seed)
        if args.command == "eval":
            return _cmd_eval(args, seed, threads)
        raise ValueError(f"unhandled command {args.command!r}")
    except (ValueError, OSError, RuntimeError, IndexError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
