"""Command-line driver: JSON config in, CSV or JSON lines out.

Subcommands ``value``, ``equilibrium``, ``mechanism`` and ``dp-example``.
Exit codes: 0 success, 2 config error, 3 dimension mismatch, 4 an
equilibrium certificate exceeded its tolerance (results are still written).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from typing import Any, Callable, Sequence

import jsonschema
import numpy as np

from . import __version__
from .core import (
    CoalitionUtility,
    DimensionError,
    PrivacySpace,
    TabulatedUtility,
    shapley_users_only,
    shapley_with_platform,
)
from .dp_example import DpExampleParams, bayes_risk, fair_matrices, optimal_estimator, utility_matrix
from .equilibrium import GammaProfile, asym_two_player_ne, find_pure_ne
from .fed_model import FedParams, UserProfile, as_coalition_utility
from .mechanism import (
    DEFAULT_GRID_POINTS,
    REFINE_GRID_POINTS,
    alpha_grid,
    optimize_alpha_grid,
    symmetric_solver,
    threshold_sensitivity,
    two_group_mechanism,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIMENSION = 3
EXIT_CERTIFICATE = 4

SIG_DIGITS = 12
CERT_TOL = 1e-9


class ConfigError(ValueError):
    pass


def load_schema(name: str) -> dict:
    return json.loads(resources.files("fairdata").joinpath("schemas", name).read_text())


# --- result tables ---------------------------------------------------------


def fmt(x) -> Any:
    """Floats to 12 significant digits; non-finite floats become strings."""
    if isinstance(x, (bool, np.bool_)):
        return int(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            return format(x)
        return float(format(x, f".{SIG_DIGITS}g"))
    return x


def _cell_text(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return format(x, f".{SIG_DIGITS}g")
    return str(x)


def _parse_cell(text: str):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        x = float(text)
    except ValueError:
        return text
    return x if math.isfinite(x) else text


@dataclass
class ResultTable:
    columns: list[str]
    rows: list[list] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    # worst equilibrium certificate among the rows; drives exit code 4
    certificate: float = 0.0

    def add(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"row has {len(values)} values for {len(self.columns)} columns")
        self.rows.append([fmt(v) for v in values])

    def column(self, name: str) -> list:
        k = self.columns.index(name)
        return [r[k] for r in self.rows]

    def as_dict(self) -> dict:
        return {"metadata": self.metadata, "columns": list(self.columns), "rows": [list(r) for r in self.rows]}

    def validate(self) -> None:
        jsonschema.validate(self.as_dict(), load_schema("result.schema.json"))
        for r in self.rows:
            if len(r) != len(self.columns):
                raise ValueError("column count differs across rows")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# " + json.dumps(self.metadata, sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_cell_text(x) for x in r])
        return buf.getvalue()

    def to_jsonl(self) -> str:
        lines = [json.dumps({"metadata": self.metadata}, sort_keys=True)]
        lines += [json.dumps(dict(zip(self.columns, r))) for r in self.rows]
        return "\n".join(lines) + "\n"

    def render(self, fmt_name: str) -> str:
        return self.to_jsonl() if fmt_name == "jsonl" else self.to_csv()

    @classmethod
    def parse(cls, text: str, fmt_name: str = "csv") -> "ResultTable":
        lines = text.splitlines()
        if fmt_name == "jsonl":
            meta = json.loads(lines[0])["metadata"]
            objs = [json.loads(x) for x in lines[1:] if x.strip()]
            columns = list(objs[0]) if objs else []
            return cls(columns, [[o[c] for c in columns] for o in objs], meta)
        if not lines or not lines[0].startswith("# "):
            raise ValueError("missing metadata line")
        meta = json.loads(lines[0][2:])
        reader = csv.reader(lines[1:])
        columns = next(reader)
        rows = [[_parse_cell(x) for x in r] for r in reader]
        return cls(columns, rows, meta)


# --- config ----------------------------------------------------------------


def _level(x) -> float:
    return math.inf if x == "inf" else float(x)


def parse_range(text: str, *, integer_last: bool) -> tuple:
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"expected min:max:{'points' if integer_last else 'step'}, got {text!r}")
    try:
        lo, hi = float(parts[0]), float(parts[1])
        last = int(parts[2]) if integer_last else float(parts[2])
    except ValueError as exc:
        raise ConfigError(f"bad range {text!r}: {exc}") from None
    return lo, hi, last


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None


def apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    cfg = dict(cfg)
    if getattr(args, "theorem", None) is not None:
        cfg["theorem"] = args.theorem
    if getattr(args, "alpha", None) is not None:
        cfg["alpha"] = args.alpha
    if getattr(args, "alpha_grid", None):
        lo, hi, pts = parse_range(args.alpha_grid, integer_last=True)
        cfg["alpha_grid"] = {"min": lo, "max": hi, "points": pts}
    if getattr(args, "rho", None):
        cfg["rho"] = [x.strip() if x.strip() == "inf" else float(x) for x in args.rho.split(",")]
    if getattr(args, "sweep", None):
        cfg["sweep"] = args.sweep
    if getattr(args, "c_range", None):
        lo, hi, step = parse_range(args.c_range, integer_last=False)
        cfg["c_range"] = {"min": lo, "max": hi, "step": step}
    if getattr(args, "solver", None):
        cfg["solver"] = args.solver
    for flag in ("strict_ne", "pessimistic", "asym"):
        if getattr(args, flag, False):
            cfg[flag] = True
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def validate_config(cfg: dict) -> None:
    validator = jsonschema.Draft202012Validator(load_schema("config.schema.json"))
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Model:
    utility: CoalitionUtility
    costs: list[tuple[float, ...]]
    levels: tuple[float, ...]
    users: list[dict]


def build_model(cfg: dict) -> Model:
    kind = cfg["model"]
    params = cfg["params"]
    users = cfg["users"]
    if kind == "dp_example":
        dp = DpExampleParams(_level(params.get("eps_prime", "inf")))
        if len(users) != 2:
            raise DimensionError(f"users: the dp_example model has 2 users, config lists {len(users)}")
        u: CoalitionUtility = utility_matrix(dp)
    elif kind == "federated":
        profiles = [UserProfile(n=x.get("n", 1), a=x.get("a", 1.0), c=tuple(x["c"])) for x in users]
        u = as_coalition_utility(FedParams(params["s2"], params["r2"], profiles))
    else:
        space = PrivacySpace(tuple(_level(x) for x in params["levels"]))
        try:
            table = np.asarray(params["table"], dtype=float)
        except ValueError as exc:
            raise DimensionError(f"params/table is not a rectangular numeric array: {exc}") from None
        if table.ndim != len(users):
            raise DimensionError(f"params/table has {table.ndim} axes for {len(users)} users")
        u = TabulatedUtility(space, table, groups=params.get("groups"))
    levels = u.levels
    costs = []
    for i, x in enumerate(users):
        if len(x["c"]) != len(levels):
            raise DimensionError(f"users/{i}/c has {len(x['c'])} entries for {len(levels)} privacy levels")
        costs.append(tuple(float(v) for v in x["c"]))
    return Model(u, costs, levels, users)


def get_rho(cfg: dict, model: Model) -> tuple[float, ...]:
    if "rho" not in cfg:
        raise ConfigError("rho is required (config field 'rho' or --rho)")
    rho = tuple(_level(x) for x in cfg["rho"])
    if len(rho) != model.utility.n_users:
        raise DimensionError(f"rho has {len(rho)} entries for {model.utility.n_users} users")
    for j, x in enumerate(rho):
        if x not in model.levels:
            raise ConfigError(f"rho/{j}: level {x} is not one of {model.levels}")
    return rho


def get_grid(cfg: dict) -> np.ndarray:
    g = cfg.get("alpha_grid", {"min": 0.0, "max": 1.0, "points": DEFAULT_GRID_POINTS})
    try:
        return alpha_grid(g["min"], g["max"], g["points"])
    except ValueError as exc:
        raise ConfigError(f"alpha_grid: {exc}") from None


def c_values(cfg: dict) -> np.ndarray:
    r = cfg.get("c_range", {"min": 0.0, "max": 1.0, "step": 0.01})
    if r["max"] < r["min"]:
        raise ConfigError("c_range: max is below min")
    count = int(math.floor((r["max"] - r["min"]) / r["step"] + 1e-9)) + 1
    return np.round(r["min"] + r["step"] * np.arange(count), 12)


def ordered_map(func: Callable, items: Sequence, jobs: int) -> list:
    """Map preserving input order whatever the execution order."""
    if jobs <= 1:
        return [func(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(func, items))


# --- commands ---------------------------------------------------------------


def _level_cols(n: int) -> list[str]:
    return [f"level_{i}" for i in range(n)]


def cmd_value(cfg: dict, model: Model, args) -> ResultTable:
    rho = get_rho(cfg, model)
    u = model.utility
    theorem = cfg.get("theorem", 2)
    alpha = cfg.get("alpha", 1.0)
    table = ResultTable(["entity", "level", "phi", "diff_from_mean"])
    if theorem == 1:
        alloc = shapley_with_platform(u, rho, 1)
        table.add("platform", None, alloc.platform_value, None)
        paid = alloc.platform_value + float(np.sum(alloc.user_values))
    else:
        alloc = shapley_users_only(u, rho, alpha)
        paid = float(np.sum(alloc.user_values))
    mean = float(np.sum(alloc.user_values)) / u.n_users
    for i, (lv, phi) in enumerate(zip(rho, alloc.user_values)):
        table.add(f"user{i}", lv, phi, phi - mean)
    table.add("sum", None, paid, None)
    table.add("utility", None, alloc.total_utility, None)
    return table


def _pair_tables(u: CoalitionUtility) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Utility and users-only payments (alpha = 1) over two users' binary levels."""
    if u.n_users != 2 or len(u.levels) != 2:
        raise DimensionError("two-player analysis needs 2 users on a 2-level privacy space")
    U, phi1, phi2 = np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2))
    for a in range(2):
        for b in range(2):
            rho = (u.levels[a], u.levels[b])
            alloc = shapley_users_only(u, rho, 1.0)
            U[a, b] = alloc.total_utility
            phi1[a, b], phi2[a, b] = alloc.user_values
    return U, phi1, phi2


def cmd_equilibrium(cfg: dict, model: Model, args) -> ResultTable:
    alpha = cfg.get("alpha", 1.0)
    if cfg.get("asym"):
        _, phi1, _ = _pair_tables(model.utility)
        gamma = GammaProfile.from_payment_matrix(phi1)
        c1, c2 = model.costs[0][1], model.costs[1][1]
        res = asym_two_player_ne(c1, c2, alpha, gamma)
        table = ResultTable(["kind", "p1_private", "p2_private", "certificate"])
        for e in res.equilibria:
            table.add("equilibrium", e.p, e.q, e.certificate)
        for e in res.rejected:
            table.add("rejected", e.p, e.q, e.certificate)
        table.certificate = res.max_certificate()
        return table
    res = find_pure_ne(model.utility, model.costs, alpha, strict=cfg.get("strict_ne", False))
    n = model.utility.n_users
    table = ResultTable(["index", *_level_cols(n), "utility", "certificate"])
    for k, e in enumerate(res.equilibria):
        table.add(k, *e.profile, e.utility, e.certificate)
    table.certificate = res.max_certificate()
    return table


def _single_group(u: CoalitionUtility) -> bool:
    return u.groups is not None and len(u.groups) == 1


def pick_solver(cfg: dict, model: Model) -> str:
    solver = cfg.get("solver", "auto")
    if solver != "auto":
        return solver
    if len(model.levels) == 2:
        if _single_group(model.utility) and len(set(model.costs)) == 1:
            return "symmetric"
        if model.utility.n_users == 2:
            return "two-group"
    return "grid"


def _count_utility(u: CoalitionUtility) -> np.ndarray:
    top = u.levels[-1]
    n = u.n_users
    return np.array([u((top,) * k + (u.zero,) * (n - k)) for k in range(n + 1)])


def _mechanism_symmetric(cfg, model, args) -> ResultTable:
    if not _single_group(model.utility) or len(model.levels) != 2:
        raise ConfigError("the symmetric solver needs interchangeable users on a 2-level privacy space")
    counts = _count_utility(model.utility)
    n = model.utility.n_users
    gamma = GammaProfile.from_count_utility(counts, n)
    c_th = threshold_sensitivity(counts, n, gamma, points=REFINE_GRID_POINTS)
    cs = c_values(cfg) if cfg.get("sweep") == "c" else np.array([model.costs[0][1]])

    def solve(c):
        return symmetric_solver(counts, n, float(c), gamma=gamma, c_th=c_th)

    table = ResultTable(
        ["c", "regime", "alpha_star", "p_private", "platform_net", "total_utility", "payment_per_user",
         "gamma_min", "gamma_max", "c_th", "certificate"]
    )
    worst = 0.0
    for c, (sol, b) in zip(cs, ordered_map(solve, list(cs), args.jobs)):
        table.add(c, sol.regime, sol.alpha_star, sol.equilibrium.p, sol.platform_net, sol.total_utility,
                  sol.payments.user_values[0], b.gamma_min, b.gamma_max, b.c_th, sol.certificate)
        worst = max(worst, sol.certificate)
    table.certificate = worst
    return table


def _mechanism_two_group(cfg, model, args) -> ResultTable:
    U, phi1, phi2 = _pair_tables(model.utility)
    grid = get_grid(cfg)
    if cfg.get("sweep") == "c1c2":
        cs = c_values(cfg)
        pairs = [(float(a), float(b)) for a in cs for b in cs]
    elif cfg.get("sweep") == "c":
        raise ConfigError("sweep: use 'c1c2' with two groups")
    else:
        pairs = [(model.costs[0][1], model.costs[1][1])]
    pessimistic = cfg.get("pessimistic", False)

    def solve(pair):
        return two_group_mechanism(pair[0], pair[1], grid, U, phi1, phi2, pessimistic=pessimistic)

    table = ResultTable(
        ["c1", "c2", "alpha_star", "p1_private", "p2_private", "platform_net", "total_utility",
         "payment_user1", "payment_user2", "certificate"]
    )
    worst = 0.0
    for (c1, c2), sol in zip(pairs, ordered_map(solve, pairs, args.jobs)):
        table.add(c1, c2, sol.alpha_star, sol.equilibrium.p, sol.equilibrium.q, sol.platform_net,
                  sol.total_utility, *sol.payments.user_values, sol.certificate)
        worst = max(worst, sol.certificate)
    table.certificate = worst
    return table


def _mechanism_grid(cfg, model, args) -> ResultTable:
    if cfg.get("sweep", "none") != "none":
        raise ConfigError("sweep: sensitivity sweeps need the symmetric or two-group solver")
    sol = optimize_alpha_grid(
        model.utility, model.costs, get_grid(cfg),
        pessimistic=cfg.get("pessimistic", False), strict=cfg.get("strict_ne", False),
    )
    n = model.utility.n_users
    table = ResultTable(["alpha_star", "platform_net", "total_utility", "certificate", *_level_cols(n),
                         *[f"payment_{i}" for i in range(n)]])
    table.add(sol.alpha_star, sol.platform_net, sol.total_utility, sol.certificate, *sol.equilibrium,
              *sol.payments.user_values)
    table.certificate = sol.certificate
    return table


def cmd_mechanism(cfg: dict, model: Model, args) -> ResultTable:
    solver = pick_solver(cfg, model)
    run = {"symmetric": _mechanism_symmetric, "two-group": _mechanism_two_group, "grid": _mechanism_grid}[solver]
    table = run(cfg, model, args)
    table.metadata["solver"] = solver
    return table


def cmd_dp_example(args) -> ResultTable:
    table = ResultTable(
        ["eps_prime", "profile", "risk", "utility", "w1", "w2", "eta",
         "phi_platform_thm1", "phi1_thm1", "phi2_thm1", "phi1_thm2", "phi2_thm2"]
    )
    for eps in args.eps:
        params = DpExampleParams(_level(eps))
        e = params.eps_prime
        U = utility_matrix(params).table
        thm1 = fair_matrices(params, "thm1")
        thm2 = fair_matrices(params, "thm2", args.alpha)
        for a, b in ((0, 0), (1, 0), (0, 1), (1, 1)):
            prof = (e if a else 0.0, e if b else 0.0)
            spec = optimal_estimator(params, prof)
            table.add(e, f"{'e' if a else '0'}{'e' if b else '0'}", bayes_risk(params, prof), U[a, b],
                      *spec.weights, spec.eta, thm1["platform"][a, b], thm1["user1"][a, b],
                      thm1["user2"][a, b], thm2["user1"][a, b], thm2["user2"][a, b])
    return table


# --- entry point ------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("config", help="JSON experiment config")
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.add_argument("--output", "-o", help="write here instead of stdout")
    p.add_argument("--seed", type=int, help="recorded in the metadata block")
    p.add_argument("--reproducible", action="store_true", help="omit the timestamp from metadata")
    p.add_argument("--jobs", type=int, default=1, help="worker threads for sweeps")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fairdata", description="Fair payments for private data")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("value", help="fair payments at one privacy profile")
    _add_common(p)
    p.add_argument("--theorem", type=int, choices=(1, 2), help="1: platform as a member, 2: users only")
    p.add_argument("--alpha", type=float)
    p.add_argument("--rho", help="comma-separated levels, 'inf' allowed")

    p = sub.add_parser("equilibrium", help="all Nash equilibria at one alpha")
    _add_common(p)
    p.add_argument("--alpha", type=float)
    p.add_argument("--strict-ne", dest="strict_ne", action="store_true")
    p.add_argument("--asym", action="store_true", help="two-player binary game with mixed strategies")

    p = sub.add_parser("mechanism", help="platform-optimal payment fraction")
    _add_common(p)
    p.add_argument("--alpha-grid", dest="alpha_grid", help="min:max:points")
    p.add_argument("--solver", choices=("auto", "grid", "symmetric", "two-group"))
    p.add_argument("--sweep", choices=("none", "c", "c1c2"))
    p.add_argument("--c-range", dest="c_range", help="min:max:step for sweeps (default 0:1:0.01)")
    p.add_argument("--strict-ne", dest="strict_ne", action="store_true")
    p.add_argument("--pessimistic", action="store_true")

    p = sub.add_parser("dp-example", help="closed-form tables of the two-user DP example")
    _add_common(p, config=False)
    p.add_argument("--eps", nargs="+", default=["inf"], help="eps' values ('inf' allowed)")
    p.add_argument("--alpha", type=float, default=1.0)
    return ap


def run(argv: Sequence[str] | None = None, stdout=None) -> int:
    args = build_parser().parse_args(argv)
    stdout = stdout or sys.stdout
    try:
        if args.command == "dp-example":
            if not 0.0 <= args.alpha <= 1.0:
                raise ConfigError("--alpha must lie in [0, 1]")
            cfg = {"command": "dp-example", "eps": args.eps, "alpha": args.alpha}
            table = cmd_dp_example(args)
        else:
            cfg = apply_overrides(load_config(args.config), args)
            validate_config(cfg)
            model = build_model(cfg)
            command = {"value": cmd_value, "equilibrium": cmd_equilibrium, "mechanism": cmd_mechanism}
            table = command[args.command](cfg, model, args)
    except DimensionError as exc:
        print(f"dimension error: {exc}", file=sys.stderr)
        return EXIT_DIMENSION
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}" if not str(exc).startswith("config error") else str(exc), file=sys.stderr)
        return EXIT_CONFIG

    table.metadata.update(
        command=args.command,
        config_hash=config_hash(cfg),
        version=__version__,
        seed=cfg.get("seed", args.seed),
    )
    if not args.reproducible:
        table.metadata["timestamp"] = datetime.now(timezone.utc).isoformat()
    table.validate()
    text = table.render(args.format)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    else:
        stdout.write(text)

    cert = table.certificate
    if cert > CERT_TOL:
        print(f"certification failure: equilibrium certificate {cert:.3g} exceeds {CERT_TOL:g}", file=sys.stderr)
        return EXIT_CERTIFICATE
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
