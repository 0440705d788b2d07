"""Command-line front end: deterministic experiment runs, CSV/JSONL output.

Subcommands: simulate, moments, verify, kesten, phase, schedule.  Every run
is a pure function of its configuration (seed included), so rerunning a
command writes byte-identical files; nothing time- or host-dependent is
serialized.  Exit codes: 0 success, 1 usage/config error, 2 statistical
contract failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .engine import run_replicate, spawn_rng_stream
from .experiments import (
    experiment_kesten,
    experiment_phase_diagram,
    tk_schedule_report,
    verify_samplers,
)
from .kernel import survival_probability
from .model import (
    IntervalSet,
    ModelParams,
    OffspringLaw,
    classify_regime,
    parse_offspring,
)
from .oracles import (
    expected_count,
    expected_count_asymptotic,
    mean_one_check,
    second_moment_exact,
)

__all__ = ["RunConfig", "parse_config", "main",
           "cmd_simulate", "cmd_moments", "cmd_verify",
           "cmd_kesten", "cmd_phase", "cmd_schedule"]

MEAN_ONE_TOL = 1e-8


class UsageError(ValueError):
    """Bad flags or config file content; maps to exit code 1."""


def _fmt(x) -> str:
    """Round-trip-safe scalar formatting for CSV cells."""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


@dataclass(frozen=True)
class RunConfig:
    """Complete description of one CLI run.

    c, r, offspring have no defaults; everything else does.  The config
    round-trips losslessly through the flat key=value file format.
    """

    c: float
    r: float
    offspring: str
    x0: float = 1.0
    horizon: float = 10.0
    census_dt: float | None = None
    census_grid: tuple[float, ...] | None = None
    replicates: int | None = None
    seed: int = 0
    truncation_M: float | None = None
    sets: tuple[str, ...] = ()
    out: str = "."
    format: str = "csv"
    threads: int = 1
    c_grid: tuple[float, ...] | None = None
    r_grid: tuple[float, ...] | None = None
    k_max: int = 1000
    delta: float = 1.0

    def params(self) -> ModelParams:
        return ModelParams(c=self.c, r=self.r, offspring=parse_offspring(self.offspring))

    def interval_sets(self) -> tuple[IntervalSet, ...]:
        return tuple(IntervalSet.parse(s) for s in self.sets)

    def grid(self) -> list[float]:
        if self.census_grid is not None:
            return list(self.census_grid)
        dt = self.census_dt if self.census_dt is not None else self.horizon / 4.0
        if dt <= 0:
            raise UsageError(f"census_dt must be positive, got {dt!r}")
        k = int(math.floor(self.horizon / dt + 1e-9))
        grid = [dt * i for i in range(1, k + 1)]
        if not grid or grid[-1] < self.horizon - 1e-9:
            grid.append(self.horizon)
        return grid

    def to_text(self) -> str:
        lines = ["# run configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if f.name == "sets":
                lines.extend(f"set={s}" for s in v)
            elif isinstance(v, tuple):
                lines.append(f"{f.name}={','.join(_fmt(x) for x in v)}")
            else:
                lines.append(f"{f.name}={_fmt(v)}")
        return "\n".join(lines) + "\n"

    def echo(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = list(v) if isinstance(v, tuple) else v
        return d


_FLOAT_KEYS = {"c", "r", "x0", "horizon", "census_dt", "truncation_M", "delta"}
_INT_KEYS = {"replicates", "seed", "threads", "k_max"}
_STR_KEYS = {"offspring", "out", "format"}
_GRID_KEYS = {"census_grid", "c_grid", "r_grid"}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _FLOAT_KEYS:
        try:
            v = float(raw)
        except ValueError:
            raise UsageError(f"key '{key}': expected a number, got '{raw}'") from None
        if not math.isfinite(v):
            raise UsageError(f"key '{key}': value must be finite, got '{raw}'")
        return v
    if key in _INT_KEYS:
        try:
            return int(raw)
        except ValueError:
            raise UsageError(f"key '{key}': expected an integer, got '{raw}'") from None
    if key in _GRID_KEYS:
        try:
            return tuple(float(tok) for tok in raw.split(",") if tok.strip())
        except ValueError:
            raise UsageError(f"key '{key}': expected comma-separated numbers, got '{raw}'") from None
    if key == "format":
        if raw not in ("csv", "jsonl"):
            raise UsageError(f"key 'format': must be 'csv' or 'jsonl', got '{raw}'")
        return raw
    return raw


def parse_config(text: str, base: dict | None = None) -> dict:
    """Parse flat key=value config text into a dict of RunConfig fields.

    Later lines override earlier ones except 'set', which accumulates.
    Unknown keys, malformed numbers, malformed offspring/interval syntax
    each raise UsageError naming the offending token.
    """
    known = {f.name for f in fields(RunConfig)} | {"set"}
    out: dict = dict(base or {})
    set_list = list(out.get("sets", ()))
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got '{line}'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise UsageError(f"config line {lineno}: unknown key '{key}'")
        if key == "set":
            try:
                IntervalSet.parse(raw)
            except ValueError as e:
                raise UsageError(f"config line {lineno}: bad interval set '{raw}': {e}") from None
            set_list.append(raw.strip())
        elif key == "offspring":
            try:
                parse_offspring(raw)
            except ValueError as e:
                raise UsageError(f"config line {lineno}: bad offspring '{raw}': {e}") from None
            out[key] = raw.strip()
        else:
            out[key] = _parse_value(key, raw)
    if set_list:
        out["sets"] = tuple(set_list)
    return out


def _build_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config is not None:
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise UsageError(f"cannot read config file: {e}") from None
        values = parse_config(text)

    flag_map = {
        "c": args.c, "r": args.r, "offspring": args.offspring,
        "x0": args.x0, "horizon": args.horizon, "census_dt": args.census_dt,
        "replicates": args.replicates, "seed": args.seed,
        "truncation_M": args.trunc_M, "out": args.out, "format": args.format,
        "threads": args.threads,
    }
    for key in ("c_grid", "r_grid", "k_max", "delta"):
        if hasattr(args, key) and getattr(args, key) is not None:
            flag_map[key] = getattr(args, key)
    for key, v in flag_map.items():
        if v is not None:
            values[key] = v
    if args.set:
        for s in args.set:
            try:
                IntervalSet.parse(s)
            except ValueError as e:
                raise UsageError(f"bad --set '{s}': {e}") from None
        values["sets"] = tuple(args.set)

    env_seed = os.environ.get("BBM_SEED")
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise UsageError(f"BBM_SEED must be an integer, got '{env_seed}'") from None

    missing = [k for k in ("c", "r", "offspring") if k not in values]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + m for m in missing)}")
    try:
        parse_offspring(values["offspring"])
    except ValueError as e:
        raise UsageError(f"bad offspring '{values['offspring']}': {e}") from None
    cfg = RunConfig(**values)
    try:
        cfg.params()
    except ValueError as e:
        raise UsageError(str(e)) from None
    return cfg


# -- file emission -----------------------------------------------------------


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def _csv(rows: list[list], header: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")  # quotes cells like set specs "0,1"
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _jsonl(records: list[dict]) -> str:
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in records)


def _emit(cfg: RunConfig, censuses_rows, censuses_header, summary_rows, summary_header, records):
    try:
        os.makedirs(cfg.out, exist_ok=True)
        if cfg.format == "csv" and censuses_rows is not None:
            _write(os.path.join(cfg.out, "censuses.csv"), _csv(censuses_rows, censuses_header))
        _write(os.path.join(cfg.out, "summary.csv"), _csv(summary_rows, summary_header))
        _write(os.path.join(cfg.out, "report.jsonl"), _jsonl(records))
    except OSError as e:
        raise UsageError(f"cannot write to output directory '{cfg.out}': {e}") from None


# -- subcommands -------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> int:
    params = cfg.params()
    sets = cfg.interval_sets()
    grid = cfg.grid()
    n = cfg.replicates if cfg.replicates is not None else 100
    echo = cfg.echo()

    crows: list[list] = []
    records: list[dict] = []
    per_census: dict[float, dict] = {
        t: {"alive": [], "D": [], "D_trunc": [], "absorbed": []} for t in grid
    }
    for i in range(n):
        rng = spawn_rng_stream(cfg.seed, i)
        res = run_replicate(params, cfg.x0, cfg.horizon, grid, cfg.truncation_M, rng,
                            interval_sets=sets)
        tr = res.trace
        for j, cen in enumerate(res.censuses):
            counts = tr.set_counts[j].tolist()
            crows.append([i, cen.time, int(tr.n_alive[j]), cen.absorbed_count,
                          *counts, tr.d[j], tr.d_trunc[j]])
            acc = per_census[cen.time]
            acc["alive"].append(int(tr.n_alive[j]))
            acc["D"].append(tr.d[j])
            acc["D_trunc"].append(tr.d_trunc[j])
            acc["absorbed"].append(cen.absorbed_count)
        records.append({
            "config": echo, "replicate": i, "status": res.status,
            "n_events": res.n_events, "counters": res.counters,
            "times": tr.times.tolist(), "alive": tr.n_alive.tolist(),
            "D": tr.d.tolist(), "D_trunc": tr.d_trunc.tolist(),
            "counts": tr.set_counts.tolist(),
        })

    set_cols = [f"count_B{k+1}" for k in range(len(sets))]
    cheader = ["replicate", "time", "alive", "absorbed", *set_cols, "D", "D_trunc"]
    srows = []
    for t in grid:
        acc = per_census[t]
        alive = np.array(acc["alive"], dtype=float)
        D = np.array(acc["D"])
        m = len(alive)
        srows.append([
            t, m, float((alive > 0).mean()) if m else math.nan,
            float(alive.mean()) if m else math.nan,
            float(alive.std(ddof=1) / math.sqrt(m)) if m > 1 else math.nan,
            float(D.mean()) if m else math.nan,
            float(D.std(ddof=1) / math.sqrt(m)) if m > 1 else math.nan,
            float(np.mean(acc["D_trunc"])) if m else math.nan,
            float(np.mean(acc["absorbed"])) if m else math.nan,
        ])
    sheader = ["time", "n", "surviving_fraction", "mean_alive", "se_alive",
               "mean_D", "se_D", "mean_D_trunc", "mean_absorbed"]
    _emit(cfg, crows, cheader, srows, sheader, records)
    return 0


def cmd_moments(cfg: RunConfig) -> int:
    params = cfg.params()
    sets = cfg.interval_sets()
    B = sets[0] if sets else IntervalSet.positive_axis()
    t = cfg.horizon
    x = cfg.x0
    ec = expected_count(x, t, B, params)
    eca = expected_count_asymptotic(x, t, B, params)
    sm = second_moment_exact(x, t, params)
    mo = mean_one_check(x, t, params)
    sp = float(survival_probability(x, t, params))
    rows = [
        ["expected_count", ec],
        ["expected_count_asymptotic", eca],
        ["count_ratio_to_asymptotic", ec / eca if eca else math.nan],
        ["second_moment_exact", sm],
        ["survival_probability", sp],
        ["mean_one_check", mo],
        ["growth_exponent", params.growth_exponent],
        ["regime", classify_regime(params).value],
    ]
    record = {"config": cfg.echo(), "set": B.spec_string(),
              "values": {k: v for k, v in rows}}
    _emit(cfg, None, None, rows, ["quantity", "value"], [record])
    return 0 if abs(mo - 1.0) <= MEAN_ONE_TOL else 2


def cmd_verify(cfg: RunConfig) -> int:
    params = cfg.params()
    n = cfg.replicates if cfg.replicates is not None else 10**5
    report = verify_samplers(params, n, cfg.seed)
    rows = []
    for s in report.replicate_records:
        rows.append([s["suite"], s["ok"],
                     s.get("pvalue", s.get("wait_ks_pvalue", math.nan)),
                     s.get("statistic", s.get("wait_ks_statistic", math.nan)),
                     s.get("n", s.get("n_events", 0))])
    records = [dict(s, config=cfg.echo()) for s in report.replicate_records]
    _emit(cfg, None, None, rows, ["suite", "ok", "pvalue", "statistic", "n"], records)
    return 0 if report.passed else 2


def cmd_kesten(cfg: RunConfig) -> int:
    params = cfg.params()
    sets = cfg.interval_sets() or (IntervalSet.parse("1,inf"),)
    n = cfg.replicates if cfg.replicates is not None else 2000
    report = experiment_kesten(params, cfg.x0, list(sets), cfg.horizon, n, cfg.seed,
                               threads=cfg.threads)
    echo = cfg.echo()
    records = [dict(rec, config=echo) for rec in report.replicate_records]

    crows = None
    cheader = None
    if "per_census" in report.aggregates:
        grid = [row["time"] for row in report.aggregates["per_census"]]
        crows = []
        for rec in report.replicate_records:
            for j, t in enumerate(grid):
                counts = rec["counts"][j]
                crows.append([rec["replicate"], t, rec["alive"][j], rec["absorbed"][j],
                              *counts, rec["D"][j], rec["D"][j]])
        cheader = ["replicate", "time", "alive", "absorbed",
                   *[f"count_B{k+1}" for k in range(len(sets))], "D", "D_trunc"]

    srows = []
    for row in report.aggregates.get("per_census", []):
        for key, agg in row["sets"].items():
            srows.append([
                row["time"], key,
                row["surviving_fraction"]["value"],
                agg["mean_abs_gap"]["value"], agg["mean_abs_gap"]["stderr"], agg["mean_abs_gap"]["n"],
                agg["median_abs_gap"]["value"],
                agg["mean_R_minus_pred_all"]["value"], agg["mean_R_minus_pred_all"]["stderr"],
            ])
    sheader = ["time", "set", "surviving_fraction", "mean_abs_gap", "se_abs_gap",
               "n_survivors", "median_abs_gap", "mean_R_minus_pred_all", "se_R_minus_pred_all"]
    _emit(cfg, crows, cheader, srows, sheader, records)
    return 0 if report.passed else 2


def cmd_phase(cfg: RunConfig) -> int:
    params = cfg.params()
    c_grid = list(cfg.c_grid) if cfg.c_grid is not None else [cfg.c]
    r_grid = list(cfg.r_grid) if cfg.r_grid is not None else [cfg.r]
    n = cfg.replicates if cfg.replicates is not None else 500
    report = experiment_phase_diagram(c_grid, r_grid, params.offspring, cfg.x0,
                                      cfg.horizon, n, cfg.seed, threads=cfg.threads)
    rows = []
    for cell in report.aggregates["cells"]:
        rows.append([cell["c"], cell["r"], cell["regime"], cell["horizon"], cell["n"],
                     cell["survived"], cell["frequency"],
                     cell.get("binomial_p", math.nan), cell["ok"]])
    echo = cfg.echo()
    records = [dict(cell, config=echo) for cell in report.aggregates["cells"]]
    _emit(cfg, None, None, rows,
          ["c", "r", "regime", "horizon", "n", "survived", "frequency", "binomial_p", "ok"],
          records)
    return 0 if report.passed else 2


def cmd_schedule(cfg: RunConfig) -> int:
    params = cfg.params()
    rep = tk_schedule_report(cfg.k_max, cfg.delta, params.growth_exponent)
    rows = []
    for i, (t, s, M) in enumerate(rep["schedule"]):
        rows.append([i + 2, t, s, M, rep["t3_partial_sums"][i]])
    record = {
        "config": cfg.echo(),
        "k_max": rep["k_max"], "delta": rep["delta"],
        "growth_exponent": rep["growth_exponent"],
        "gap_turnover_k": rep["gap_turnover_k"],
        "gaps_decreasing_tail": rep["gaps_decreasing_tail"],
        "t3_last_increment": rep["t3_last_increment"],
    }
    _emit(cfg, None, None, rows, ["k", "t_k", "s_k", "M_k", "t3_partial_sum"], [record])
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "moments": cmd_moments,
    "verify": cmd_verify,
    "kesten": cmd_kesten,
    "phase": cmd_phase,
    "schedule": cmd_schedule,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 for usage problems, not argparse's 2
        raise UsageError(message)


def _make_parser() -> _Parser:
    p = _Parser(prog="bbma", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        sp = sub.add_parser(name, help=f"run the {name} command")
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--c", type=float, help="drift toward the absorbing origin")
        sp.add_argument("--r", type=float, help="branch rate")
        sp.add_argument("--offspring", help="'dyadic' or 'pmf:p0,p1,...'")
        sp.add_argument("--x0", type=float, help="start height (default 1)")
        sp.add_argument("--horizon", type=float, help="simulation horizon (default 10)")
        sp.add_argument("--census-dt", dest="census_dt", type=float,
                        help="census spacing (default horizon/4)")
        sp.add_argument("--replicates", type=int, help="replicate count (per-command default)")
        sp.add_argument("--seed", type=int, help="master seed (default 0; BBM_SEED overrides)")
        sp.add_argument("--trunc-M", dest="trunc_M", type=float,
                        help="truncation window size (default off)")
        sp.add_argument("--set", action="append",
                        help="interval set 'a,b;c,d' with inf (repeatable)")
        sp.add_argument("--out", help="output directory (default .)")
        sp.add_argument("--format", choices=["csv", "jsonl"],
                        help="csv also writes censuses.csv; jsonl skips it")
        sp.add_argument("--threads", type=int, help="worker threads (default 1)")
        if name == "phase":
            sp.add_argument("--c-grid", dest="c_grid", type=_grid_arg,
                            help="comma-separated drift grid")
            sp.add_argument("--r-grid", dest="r_grid", type=_grid_arg,
                            help="comma-separated branch-rate grid")
        if name == "schedule":
            sp.add_argument("--k-max", dest="k_max", type=int, help="schedule length (default 1000)")
            sp.add_argument("--delta", type=float, help="window-size slope (default 1)")
    return p


def _grid_arg(raw: str) -> tuple[float, ...]:
    try:
        return tuple(float(tok) for tok in raw.split(",") if tok.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{raw}'") from None


def main(argv=None) -> int:
    try:
        args = _make_parser().parse_args(argv)
        cfg = _build_config(args)
        return _COMMANDS[args.command](cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
