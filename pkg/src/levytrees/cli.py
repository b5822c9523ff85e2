"""Command line front end: mechanism specs in, forests and CSV verdicts out.

Exit codes: 0 success (all checks pass), 1 a statistical check failed,
2 usage error, 3 domain refusal (Grey's condition, infinite forests, bad
parameters), 4 node budget exhausted.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import dataclass

from .errors import BudgetExceeded, DomainError, NumericError
from .growth import LevyFamilyParams, black_forest, grow, sample_gw_real_forests
from .measures import forest_summary
from .mechanism import format_mechanism, parse_mechanism
from .realtree import RealTree, spanned_subtree
from .suites import SUITES, SuiteConfig, run_suite
from .verify import reports_to_csv, stream

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DOMAIN, EXIT_BUDGET = 0, 1, 2, 3, 4

SUMMARY_HEADER = ["replicate", "level", "root_count", "leaf_count", "total_length", "height", "frontier"]


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    mech_spec: str
    a: float
    levels: list
    radius: float
    budget: int
    seed: int
    reps: int
    out: str
    workers: int = 1
    newick: bool = False

    def __post_init__(self):
        if self.levels != sorted(self.levels):
            raise UsageError("--levels must be sorted")
        if self.reps < 1:
            raise UsageError("--reps must be positive")
        if self.budget < 1:
            raise UsageError("--budget must be positive")

    def params(self) -> LevyFamilyParams:
        return LevyFamilyParams(parse_mechanism(self.mech_spec), self.a)


def _read_mech(text: str) -> str:
    """``--mech`` is a path to a spec file or the spec itself."""
    if os.path.isfile(text):
        with open(text, encoding="utf-8") as fh:
            return " ".join(line.split("#")[0].strip() for line in fh if line.strip())
    return text


def _levels(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --levels {text!r}") from exc


def _write(path: str, text: str):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return buf.getvalue()


def _summary_row(k, lam, tree: RealTree, radius):
    s = forest_summary(tree, radius)
    return [k, float(lam), s["root_count"], s["leaf_count"], s["total_length"], s["height"], int(tree.frontier.sum())]


def _config(args) -> RunConfig:
    return RunConfig(
        _read_mech(args.mech),
        args.a,
        _levels(args.levels),
        args.radius,
        args.budget,
        args.seed,
        args.reps,
        args.out,
        args.workers,
        getattr(args, "newick", False),
    )


def _manifest(cfg: RunConfig, command: str, **extra) -> str:
    params = cfg.params()
    body = {
        "command": command,
        "mechanism": format_mechanism(params.mech),
        "a": cfg.a,
        "levels": cfg.levels,
        "radius": cfg.radius if math.isfinite(cfg.radius) else "inf",
        "budget": cfg.budget,
        "seed": cfg.seed,
        "reps": cfg.reps,
    }
    body.update(extra)
    return json.dumps(body, indent=2, sort_keys=True) + "\n"


# -- commands -------------------------------------------------------------------------------------


def cmd_sample(args) -> int:
    """Independent copies of ``F_lam`` as dump files, a summary CSV and a manifest."""
    cfg = _config(args)
    if len(cfg.levels) != 1:
        raise UsageError("sample takes exactly one level")
    lam = cfg.levels[0]
    params = cfg.params()
    os.makedirs(cfg.out, exist_ok=True)
    forests = sample_gw_real_forests(params, lam, cfg.reps, stream(cfg.seed, 0), cfg.radius, cfg.budget)
    files, rows = [], []
    for k, tree in enumerate(forests):
        name = f"forest_{k:04d}.txt"
        _write(os.path.join(cfg.out, name), tree.to_dump())
        if cfg.newick:
            _write(os.path.join(cfg.out, f"forest_{k:04d}.nwk"), tree.to_newick() + "\n")
        files.append(name)
        rows.append(_summary_row(k, lam, tree, cfg.radius))
    _write(os.path.join(cfg.out, "summary.csv"), _csv(rows, SUMMARY_HEADER))
    _write(os.path.join(cfg.out, "manifest.json"), _manifest(cfg, "sample", files=files))
    print(f"wrote {len(files)} forest(s) to {cfg.out}")
    return EXIT_OK


def cmd_grow(args) -> int:
    """Grow nested forests along the levels and persist the growth state."""
    cfg = _config(args)
    if not cfg.levels:
        raise UsageError("grow needs at least one level")
    params = cfg.params()
    rows = []
    for k in range(cfg.reps):
        out = cfg.out if cfg.reps == 1 else os.path.join(cfg.out, f"rep_{k:04d}")
        state = grow(params, None, cfg.levels, stream(cfg.seed, 1, k), cfg.radius, cfg.budget, seed=cfg.seed, dual=args.dual)
        state.save(out)
        for i, lam in enumerate(cfg.levels):
            tree = state.tree_at(i)
            rows.append(_summary_row(k, lam, tree, cfg.radius))
            if cfg.newick:
                _write(os.path.join(out, f"level_{i:03d}.nwk"), tree.to_newick() + "\n")
    os.makedirs(cfg.out, exist_ok=True)
    _write(os.path.join(cfg.out, "summary.csv"), _csv(rows, SUMMARY_HEADER))
    print(f"grew {cfg.reps} state(s) through {len(cfg.levels)} level(s) into {cfg.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    """Run a named suite; the CSV goes to ``--out`` and one line per check to stdout."""
    params = LevyFamilyParams(parse_mechanism(_read_mech(args.mech)), args.a)
    cfg = SuiteConfig(params, args.seed, args.reps, args.workers)
    reports = run_suite(args.suite, cfg)
    text = reports_to_csv(reports)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, f"verify_{args.suite}.csv"), text)
    for r in reports:
        print(f"{r.verdict.upper():4s}  {r.name}")
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def cmd_colour(args) -> int:
    """Colour the leaves of a stored forest and keep its black part."""
    with open(args.tree, encoding="utf-8") as fh:
        tree = RealTree.from_dump(fh.read())
    if not (0.0 <= args.p <= 1.0):
        raise DomainError("the red probability must lie in [0, 1]")
    rng = stream(args.seed, 2)
    if tree.frontier.any():
        if args.mech is None or args.level is None:
            raise UsageError("a forest with frontier nodes needs --mech and --level to colour what lies beyond the cut")
        params = LevyFamilyParams(parse_mechanism(_read_mech(args.mech)), 1.0)
        lam = args.level
        black = black_forest(params, tree, lam * (1 - args.p), lam, rng)
    else:
        # without frontier nodes only the leaf colours matter
        black = _black_without_frontier(tree, args.p, rng)
    os.makedirs(args.out, exist_ok=True)
    _write(os.path.join(args.out, "black.txt"), black.to_dump())
    if args.newick:
        _write(os.path.join(args.out, "black.nwk"), black.to_newick() + "\n")
    print(f"black forest: {black.n} nodes, {int(black.n_children[0])} root edge(s)")
    return EXIT_OK


def _black_without_frontier(tree: RealTree, p_red: float, rng) -> RealTree:
    leaf = (tree.n_children == 0) & ~tree.frontier
    leaf[0] = False
    black = leaf & (rng.random(tree.n) >= p_red)
    return spanned_subtree(tree, black)


# -- parser -----------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="levytrees", description="Nested Galton-Watson real forests and their checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, levels=True):
        p.add_argument("--mech", required=True, help="mechanism spec, e.g. 'kind=quadratic beta=0.5', or a file holding one")
        p.add_argument("--a", type=float, default=1.0, help="root mass (default 1)")
        if levels:
            p.add_argument("--levels", required=True, help="comma-separated increasing levels")
            p.add_argument("--radius", type=float, default=math.inf, help="cut radius around the root")
            p.add_argument("--budget", type=int, default=10**6, help="node budget per forest")
            p.add_argument("--newick", action="store_true", help="also write Newick files")
        p.add_argument("--seed", type=int, required=True, help="master seed (mandatory)")
        p.add_argument("--reps", type=int, default=1, help="number of replicates")
        p.add_argument("--workers", type=int, default=1, help="worker threads")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("sample", help="sample independent forests at one level")
    common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("grow", help="grow nested forests along the levels")
    common(p)
    p.add_argument("--dual", action="store_true", help="use the local-mass grafting sampler")
    p.set_defaults(func=cmd_grow)

    p = sub.add_parser("verify", help="run a named acceptance suite")
    common(p, levels=False)
    p.add_argument("--suite", required=True, choices=sorted(SUITES), help="suite name")
    p.set_defaults(func=cmd_verify, reps=10_000)

    p = sub.add_parser("colour", help="colour leaves and extract the black forest")
    p.add_argument("--tree", required=True, help="forest dump file")
    p.add_argument("--p", type=float, required=True, help="probability that a leaf is red")
    p.add_argument("--mech", help="mechanism, needed when the forest has frontier nodes")
    p.add_argument("--level", type=float, help="level of the stored forest, needed with frontier nodes")
    p.add_argument("--seed", type=int, required=True, help="master seed (mandatory)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--newick", action="store_true", help="also write a Newick file")
    p.set_defaults(func=cmd_colour)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BudgetExceeded as exc:
        front = "unknown" if exc.frontier is None else exc.frontier
        print(f"truncated: {exc}; frontier count {front}", file=sys.stderr)
        return EXIT_BUDGET
    except (DomainError, NumericError) as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
