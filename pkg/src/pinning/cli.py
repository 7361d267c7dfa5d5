"""Batch runner: `pinning <subcommand> --config PATH --out DIR --jobs N`.

Exit codes: 0 ok, 2 config error, 3 numeric failure.  Data files are CSV with
17 significant digits; every run writes summary.json with the resolved config.
"""

from __future__ import annotations

import csv
import json
import math
import subprocess
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import click
import numpy as np

from . import config as cfgmod
from .config import ConfigError, ExperimentConfig

CSV_VERSION = "1"


class NumericFailure(RuntimeError):
    pass


def version_stamp() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "0.1.0+unknown"


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"# csv-version {CSV_VERSION}"])
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (float, np.floating)):
        f = float(o)
        return f if math.isfinite(f) else str(f)
    return o


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _defect(cfg: ExperimentConfig):
    from .geometry import make_profile

    return make_profile(cfg.defect.profile, cfg.defect.d, cfg.defect.sigma)


def _domain(cfg: ExperimentConfig, d: Optional[int] = None):
    from .hodograph import HodographDomain

    n = cfg.numerics
    return HodographDomain(d=d or cfg.defect.d, L=n.L, H=n.H, h=n.h)


# ---------------------------------------------------------------------------
# experiments; each returns the summary payload and writes its tables


def run_single_site(cfg: ExperimentConfig, out: Path) -> dict:
    from .capacity import fit_capacity, front_distance
    from .hodograph import FarField, solve_hodograph

    defect = _defect(cfg)
    f = solve_hodograph(_domain(cfg), defect, FarField("height", s=cfg.numerics.s))
    rec = fit_capacity(f)
    y, h = f.front()
    write_csv(out / "front.csv", ["y", "height"], zip(y, h))
    k = -f.k_h if defect.d == 2 else f.k_h
    summary = {"k": k, "k_fit": rec.k, "fit_residual": rec.residual, "front_min": front_distance(f),
               "residual": f.residual, "iterations": f.iterations}
    if cfg.numerics.linearized:
        from .linearized import calibrate, predict_capacity

        s = cfg.numerics.s
        cal = calibrate(defect, sigmas=cfg.numerics.sigmas, s=-s, domain=_domain(cfg))
        pred = predict_capacity(defect, -s, calibration=cal)
        write_csv(out / "linearized.csv", ["s", "prediction", "kappa", "gap"], [(s, pred, k, k - pred)])
        summary.update({"prediction": pred, "calibration_mode": cal.mode})
    return summary


def run_pin_sweep(cfg: ExperimentConfig, out: Path) -> dict:
    from .capacity import BallFamily, sweep_kappa_R

    defect = _defect(cfg)
    n = cfg.numerics
    family = BallFamily(defect, _domain(cfg), jobs=cfg.jobs)
    rows, per_R, failure = [], {}, None
    for R in n.R_values:
        try:
            res = sweep_kappa_R(defect, R, n.direction, n.tolerance, family=family, k_step=n.k_step)
        except Exception as exc:  # partial results are still written
            failure = f"R={R}, direction={n.direction}, sigma={defect.sigma}: {exc}"
            break
        rows += [(R, k, s, p) for k, s, p in res.states]
        per_R[str(R)] = {"kappa_R": res.kappa_R, "kappa_R_capacity": res.kappa_R_capacity,
                         "jump_gap": res.jump_gap, "s_after": res.s_after}
    write_csv(out / "sweep.csv", ["R", "k", "s_extremal", "pinned"], rows)
    summary = {"per_R": per_R}
    if per_R:
        last = per_R[str(n.R_values[len(per_R) - 1])]
        summary["kappa_R"] = last["kappa_R_capacity"]
        summary["kappa_R_literal"] = last["kappa_R"]
    if failure:
        summary["failure"] = failure
        raise NumericFailure(failure, summary)
    return summary


def run_strip(cfg: ExperimentConfig, out: Path) -> dict:
    from .capacity import extremal_capacities, kappa_curve

    n = cfg.numerics
    curve = kappa_curve(_defect(cfg), R=n.strip_R, s_min=n.s_min, s_max=n.s_max, ds=n.ds, jobs=cfg.jobs)
    write_csv(out / "kappa.csv", ["s", "kappa_adv", "kappa_rec", "fit_residual"],
              [(s, ka, kr, r.residual) for s, ka, kr, r in zip(curve.s, curve.kappa_adv, curve.kappa_rec, curve.records)])
    k_rec, k_adv = extremal_capacities(curve)
    return {"k_adv": k_adv, "k_rec": k_rec, "support": curve.support}


def run_cell(cfg: ExperimentConfig, out: Path) -> dict:
    from .cell import (check_c_star, face_flux_c_star, field_dump, fit_singular_coefficient,
                       hemisphere_flux_c_star, solve_cell, tail_fit)

    cell = solve_cell(tuple(cfg.lattice.xi), K=cfg.numerics.K)
    dump = field_dump(cell)
    d = cell.d
    write_csv(out / "cell_field.csv", [f"x{i + 1}" for i in range(d)] + ["omega"], dump)
    tf = tail_fit(cell)
    return {"c_star": face_flux_c_star(cell), "c_star_hemisphere": hemisphere_flux_c_star(cell),
            "c_star_relative_error": check_c_star(cell), "far_field_constant": cell.far_field_constant,
            "normalization_constant": cell.C0, "singular_coefficient_fit": fit_singular_coefficient(cell),
            "singular_coefficient_expected": cell.singular_coefficient, "tail_rate": tf.rate,
            "tail_bound_rate": tf.bound_rate, "tail_constant": tf.constant, "K": cell.K}


def run_barrier_check(cfg: ExperimentConfig, out: Path) -> dict:
    from .barriers import make_barrier, verify_barrier

    built = make_barrier(cfg.barrier.kind, **cfg.barrier.params)
    built = built if isinstance(built, tuple) else (built,)
    reports = [verify_barrier(b) for b in built]
    passed = all(r.passed for r in reports)
    report = {"kind": cfg.barrier.kind, "params": cfg.barrier.params, "pass": passed,
              "margin": min(r.min_margin + r.budget for r in reports),
              "raw_margin": min(r.min_margin for r in reports), "reports": [r.to_dict() for r in reports]}
    write_json(out / "report.json", report)
    summary = {"pass": passed, "margin": report["margin"]}
    if not passed:
        raise NumericFailure(f"barrier {cfg.barrier.kind} {cfg.barrier.params} failed verification", summary)
    return summary


def run_expansion(cfg: ExperimentConfig, out: Path) -> dict:
    from .cell import estimate_Q_bound

    n = cfg.numerics
    rows = estimate_Q_bound(n.deltas, _defect(cfg), n.direction, xi=tuple(cfg.lattice.xi), jobs=cfg.jobs, c=n.patch_c)
    write_csv(out / "expansion.csv", ["delta", "normalized_bound", "prediction", "eps", "Lambda", "alpha", "valid"],
              [(r.delta, r.normalized_bound, r.prediction, r.eps, r.Lambda, r.alpha, r.valid) for r in rows])
    return {"prediction": rows[0].prediction if rows else None,
            "relative_gap": {str(r.delta): r.relative_gap for r in rows}}


def run_linearized(cfg: ExperimentConfig, out: Path) -> dict:
    from .linearized import calibrate, predict_capacity

    defect = _defect(cfg)
    cal = calibrate(defect, sigmas=cfg.numerics.sigmas, s=cfg.numerics.s, domain=_domain(cfg))
    write_csv(out / "linearized.csv", ["sigma", "k_over_sigma_I"], zip(cal.sigmas, cal.ratios))
    return {"constant": cal.constant, "mode": cal.mode, "limit": cal.limit,
            "predicted_k": predict_capacity(defect, cfg.numerics.s, calibration=cal)}


@dataclass
class FigureFamily:
    R: float
    k_step: float  # coarse grid step
    bracket: float  # k-distance between the last pinned and first detached states compared
    kappa_R: float
    polylines: list  # (k, pinned, array of rows (y, height))
    gap: float

    @property
    def jump_threshold(self) -> float:
        """Gap a continuous family could produce across the compared k-step, times ten."""
        return 10.0 * self.bracket * math.log(self.R)

    @property
    def coarse_threshold(self) -> float:
        return 10.0 * self.k_step * math.log(self.R)

    @property
    def has_jump(self) -> bool:
        return self.gap > self.jump_threshold


def reproduce_figure_family(cfg: ExperimentConfig) -> FigureFamily:
    """Pinned fronts for k stepping up to κ^R_adv plus the first detached front."""
    from .capacity import BallFamily, _front_at, sweep_kappa_R

    defect = _defect(cfg)
    if defect.d != 2:
        raise ConfigError("the figure family is for d = 2")
    n = cfg.numerics
    family = BallFamily(defect, _domain(cfg), jobs=cfg.jobs)
    res = sweep_kappa_R(defect, n.figure_R, "adv", n.tolerance, family=family, k_step=n.k_step)
    lines = [(k, True, _front_at(family, s)) for k, s, pinned in res.states if pinned]
    lines.append((res.kappa_R, True, _front_at(family, res.s_branch[1])))
    lines.append((res.kappa_R + n.tolerance, False, _front_at(family, res.s_after)))
    return FigureFamily(n.figure_R, n.k_step, n.tolerance, res.kappa_R, lines, res.jump_gap)


def run_figure(cfg: ExperimentConfig, out: Path) -> dict:
    fam = reproduce_figure_family(cfg)
    rows = [(i, k, p, y, h) for i, (k, p, arr) in enumerate(fam.polylines) for y, h in arr]
    write_csv(out / "fronts.csv", ["line", "k", "pinned", "y", "height"], rows)
    return {"R": fam.R, "kappa_R": fam.kappa_R, "gap": fam.gap, "jump_threshold": fam.jump_threshold,
            "coarse_threshold": fam.coarse_threshold,
            "has_jump": fam.has_jump, "n_pinned": sum(1 for _, p, _ in fam.polylines if p)}


RUNNERS = {
    "single-site": run_single_site,
    "pin-sweep": run_pin_sweep,
    "strip": run_strip,
    "cell": run_cell,
    "barrier-check": run_barrier_check,
    "expansion": run_expansion,
    "linearized": run_linearized,
    "figure": run_figure,
}


def run(cfg: ExperimentConfig) -> int:
    """Run one experiment; returns the exit status (0 ok, 3 numeric failure)."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"kind": cfg.kind, "config": cfg.to_dict(), "version": version_stamp()}
    status = 0
    try:
        summary["result"] = RUNNERS[cfg.kind](cfg, out)
    except ConfigError:
        raise
    except NumericFailure as exc:
        msg, partial = exc.args
        summary["result"] = partial
        summary["error"] = msg
        status = 3
    except (ArithmeticError, ValueError, RuntimeError, LookupError, AssertionError) as exc:
        summary["error"] = f"{cfg.kind} with defect={cfg.defect}, lattice={cfg.lattice.xi}: {exc}"
        status = 3
    write_json(out / "summary.json", summary)
    (out / "config.ini").write_text(cfgmod.dumps(cfg))
    if status:
        click.echo(summary["error"], err=True)
    return status


def _subcommand(kind: str):
    @click.command(name=kind)
    @click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
    @click.option("--out", type=click.Path(file_okay=False), default=None)
    @click.option("--jobs", type=int, default=None)
    @click.option("--seedless", is_flag=True, help="Reserved; every algorithm is deterministic.")
    @click.option("--linearized", is_flag=True, hidden=kind != "single-site",
                  help="single-site only: add the linearized prediction table.")
    def cmd(config_path, out, jobs, seedless, linearized):
        try:
            cfg = cfgmod.load(config_path) if config_path else ExperimentConfig(kind=kind)
            if config_path and cfg.kind != kind:
                raise ConfigError(f"config kind {cfg.kind!r} does not match subcommand {kind!r}")
            if linearized:
                if kind != "single-site":
                    raise ConfigError("--linearized applies to single-site only")
                cfg.numerics.linearized = True
            cfg = replace(cfg, kind=kind, out=out or cfg.out, jobs=jobs or cfg.jobs).validate()
            status = run(cfg)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        sys.exit(status)

    return cmd


@click.group()
def main():
    """Pinning-interval experiments."""


for _kind in RUNNERS:
    main.add_command(_subcommand(_kind))


if __name__ == "__main__":
    main()
