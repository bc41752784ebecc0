"""``sgfem`` command line: run the adaptive benchmark or regenerate oracle files.

Configuration files hold ``key = value`` lines with dotted keys; ``#`` starts
a comment.  Every key and its default is listed in :data:`KEYS`.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

PRESET_DIR = Path(__file__).parent / "presets"
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
LEDGER_COLUMNS = ("iter", "branch", "n_triangles", "dims", "dofs", "eta_det", "eta_sto", "eta",
                  "mc_error", "mc_stderr", "quasi_err", "delta")


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(ValueError):
    def __init__(self, key: str, reason: str):
        super().__init__(f"{key}: {reason}")
        self.key = key
        self.reason = reason


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    return tuple(int(v) for v in str(text).replace("(", "").replace(")", "").split(",") if v.strip())


def _opt_float(text):
    return None if str(text).strip().lower() in ("", "none") else float(text)


def _opt_int(text):
    return None if str(text).strip().lower() in ("", "none") else int(text)


def _in(lo, hi, lo_open=False, hi_open=False):
    def check(v):
        if v is None:
            return None
        if (v < lo or (lo_open and v == lo)) or (v > hi or (hi_open and v == hi)):
            lb = "(" if lo_open else "["
            rb = ")" if hi_open else "]"
            return f"must lie in {lb}{lo}, {hi}{rb}"
        return None
    return check


def _positive(v):
    return None if v is None or v > 0 else "must be positive"


def _nonneg(v):
    return None if v is None or v >= 0 else "must be nonnegative"


def _at_least(n):
    return lambda v: None if v is None or v >= n else f"must be >= {n}"


def _all_at_least(n):
    return lambda v: None if v and all(x >= n for x in v) else f"all entries must be >= {n}"


def _choice(*opts):
    return lambda v: None if v in opts else f"must be one of {', '.join(opts)}"


# key -> (parser, default, check)
KEYS = {
    "domain.name": (str, "lshape", _choice("lshape", "unit-square")),
    "domain.h0": (float, 0.1, _positive),
    "field.kind": (str, "benchmark", _choice("benchmark", "zero")),
    "field.M_hat": (int, 5, _at_least(1)),
    "field.sigma": (float, 2.0, lambda v: None if v > 1 else "must exceed 1"),
    "field.rho": (float, 1.0, _in(0, 1, lo_open=True)),
    "field.theta": (float, 0.1, _in(0, 1, hi_open=True)),
    "field.tail_threshold": (float, 1e-8, _in(0, 1, lo_open=True, hi_open=True)),
    "field.coeff_order": (int, 3, _at_least(1)),
    "field.coeff_mesh": (str, "initial", _choice("initial", "current")),
    "source.f": (float, 1.0, None),
    "fe.p": (int, 1, _at_least(1)),
    "adapt.theta_det": (float, 0.3, _in(0, 1, lo_open=True)),
    "adapt.theta_sto": (float, 0.5, _in(0, 1, lo_open=True)),
    "adapt.c_eq": (float, 5.0, _positive),
    "adapt.q": (_ints, (1,), _all_at_least(1)),
    "adapt.L": (int, 10, _at_least(1)),
    "adapt.d0": (_ints, (1,), _all_at_least(1)),
    "adapt.omega": (float, 1.0, _positive),
    "adapt.tau": (float, 4.0, _nonneg),
    "adapt.eta_tol": (_opt_float, None, _positive),
    "adapt.max_dofs": (_opt_int, None, _at_least(1)),
    "solver.tol": (float, 1e-10, _in(0, 1, lo_open=True, hi_open=True)),
    "solver.maxit": (int, 10000, _at_least(1)),
    "mc.enabled": (_bool, True, None),
    "mc.n_samples": (int, 100, _at_least(1)),
    "mc.seed": (int, 0, _nonneg),
    "mc.uplifts": (int, 1, _nonneg),
    "mc.cadence": (int, 1, _at_least(1)),
    "mc.measure": (str, "pi0", _choice("pi0", "weighted")),
    "output.dir": (str, "results", None),
    "output.meshes": (_bool, True, None),
    "output.svg": (_bool, True, None),
}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **kv) -> "RunConfig":
        vals = dict(self.values)
        for k, v in kv.items():
            vals[k] = v
        return validate(vals)

    def to_text(self) -> str:
        out = []
        for k in KEYS:
            v = self.values[k]
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            out.append(f"{k} = {v}")
        return "\n".join(out) + "\n"


def validate(values: dict) -> RunConfig:
    for key, (_, _, check) in KEYS.items():
        if check is not None:
            reason = check(values[key])
            if reason:
                raise ValidationError(key, reason)
    q, d0, M = values["adapt.q"], values["adapt.d0"], values["field.M_hat"]
    if len(q) not in (1, M):
        raise ValidationError("adapt.q", f"need 1 or {M} entries")
    if len(d0) > M:
        raise ValidationError("adapt.d0", f"more than {M} entries")
    return RunConfig(values)


def parse_config(text: str) -> RunConfig:
    values = {k: v[1] for k, v in KEYS.items()}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(n, f"expected key = value, got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ParseError(n, f"unknown key {key!r}")
        try:
            values[key] = KEYS[key][0](val)
        except ValueError as exc:
            raise ValidationError(key, f"cannot parse {val!r}: {exc}") from None
    return validate(values)


def resolve_config_path(path) -> Path:
    """A file path, or the name of a shipped preset (``desk``, ``deterministic``)."""
    p = Path(path)
    if p.exists():
        return p
    preset = PRESET_DIR / f"{path}.cfg"
    if preset.exists():
        return preset
    raise FileNotFoundError(f"no config file or preset named {path!r}")


def load_config(path) -> RunConfig:
    return parse_config(resolve_config_path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _num(v) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def ledger_csv(rows, mc_enabled=True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LEDGER_COLUMNS)
    for i, r in enumerate(rows):
        w.writerow([
            r.iter, r.branch, r.n_triangles, str(tuple(r.dims)), r.dofs,
            _num(r.eta_det), _num(r.eta_sto), _num(r.eta),
            _num(r.mc_error), _num(r.mc_stderr), _num(r.quasi_err),
            _num(r.delta) if i < len(rows) - 1 else "",
        ])
    return buf.getvalue()


def convergence_svg(dofs, eta, err, width=480, height=360) -> str:
    """Log-log plot of estimator and sampled error against dofs with a slope -1/2 guide."""
    import numpy as np

    dofs = np.asarray(dofs, dtype=float)
    series = [("eta", np.asarray(eta, dtype=float), "#1f77b4"), ("E", np.asarray(err, dtype=float), "#d62728")]
    ys = np.concatenate([s[1][np.isfinite(s[1]) & (s[1] > 0)] for s in series])
    lx = np.log10(dofs)
    ly = np.log10(ys)
    x0, x1 = lx.min(), max(lx.max(), lx.min() + 1e-3)
    y0, y1 = ly.min() - 0.1, ly.max() + 0.1
    pad = 50

    def px(v):
        return pad + (np.log10(v) - x0) / (x1 - x0) * (width - 2 * pad)

    def py(v):
        return height - pad - (np.log10(v) - y0) / (y1 - y0) * (height - 2 * pad)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" fill="none" stroke="black"/>',
           f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle" font-size="12">dofs (log)</text>']
    for k, (name, y, color) in enumerate(series):
        ok = np.isfinite(y) & (y > 0)
        if ok.sum() == 0:
            continue
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(dofs[ok], y[ok]))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{width - pad - 40}" y="{pad + 15 + 15 * k}" fill="{color}" font-size="12">{name}</text>')
    # slope -1/2 through the first estimator point
    if np.isfinite(series[0][1][0]) and series[0][1][0] > 0:
        xa, xb = dofs[0], dofs[-1]
        ya = series[0][1][0]
        yb = ya * (xb / xa) ** -0.5
        out.append(f'<line x1="{px(xa):.2f}" y1="{py(ya):.2f}" x2="{px(xb):.2f}" y2="{py(yb):.2f}" '
                   'stroke="gray" stroke-dasharray="4 3"/>')
        out.append(f'<text x="{pad + 5}" y="{height - pad - 5}" fill="gray" font-size="11">slope -1/2</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _row_dict(r):
    return {
        "iter": r.iter, "branch": r.branch, "n_triangles": r.n_triangles, "dims": list(r.dims), "dofs": r.dofs,
        "eta_det": r.eta_det, "eta_sto": r.eta_sto, "eta": r.eta, "slabs": list(map(float, r.slabs)),
        "n_marked": r.n_marked, "fallback": r.fallback, "energy": r.energy,
        "increment": None if math.isnan(r.increment) else r.increment,
        "orthogonality": None if math.isnan(r.orth_ratio) else r.orth_ratio,
        "cg_iterations": r.iterations,
        "mc_error": None if math.isnan(r.mc_error) else r.mc_error,
        "mc_stderr": None if math.isnan(r.mc_stderr) else r.mc_stderr,
        "quasi_err": None if math.isnan(r.quasi_err) else r.quasi_err,
        "delta": None if math.isnan(r.delta) else r.delta,
        "delta_upper": None if math.isnan(r.delta_band) else r.delta_band,
    }


def write_artifacts(out: Path, cfg: RunConfig, rows, notes: dict, status: str, error: str | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "ledger.csv").write_text(ledger_csv(rows))
    last = rows[-1] if rows else None
    summary = {
        "status": status,
        "error": error,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.values.items()},
        "final": _row_dict(last) if last else None,
        "iterations": [_row_dict(r) for r in rows],
        "notes": notes,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=float) + "\n")
    if cfg["output.svg"] and rows:
        (out / "convergence.svg").write_text(
            convergence_svg([r.dofs for r in rows], [r.eta for r in rows], [r.mc_error for r in rows]))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def build_problem(cfg: RunConfig):
    """Adaptive problem, loop config and MC config from a run config."""
    from .adapt import AdaptConfig, Problem
    from .chaos import ModeScaling
    from .field import benchmark_modes, zero_field
    from .mesh import initial_mesh
    from .validate import MCConfig

    M = cfg["field.M_hat"]
    field = benchmark_modes(M, cfg["field.sigma"]) if cfg["field.kind"] == "benchmark" else zero_field(M)
    scaling = ModeScaling(field.gamma_sup, cfg["field.rho"], cfg["field.theta"])
    problem = Problem(field, scaling, initial_mesh(cfg["domain.name"], cfg["domain.h0"]), f=cfg["source.f"],
                      tail_threshold=cfg["field.tail_threshold"], coeff_order=cfg["field.coeff_order"],
                      coeff_mesh=cfg["field.coeff_mesh"])
    q = cfg["adapt.q"]
    acfg = AdaptConfig(
        theta_det=cfg["adapt.theta_det"], theta_sto=cfg["adapt.theta_sto"], c_eq=cfg["adapt.c_eq"],
        q=q[0] if len(q) == 1 else q, max_iter=cfg["adapt.L"], tol=cfg["solver.tol"],
        maxit=cfg["solver.maxit"], p=cfg["fe.p"], d0=cfg["adapt.d0"], omega=cfg["adapt.omega"],
        tau=cfg["adapt.tau"], eta_tol=cfg["adapt.eta_tol"], max_dofs=cfg["adapt.max_dofs"],
    )
    mc = None
    if cfg["mc.enabled"]:
        mc = MCConfig(cfg["mc.n_samples"], cfg["mc.seed"], cfg["mc.uplifts"], cfg["mc.measure"])
    return problem, acfg, mc


def run_benchmark(cfg: RunConfig, out=None, echo=print) -> int:
    """Run the adaptive loop and write ledger, summary, meshes and plot; returns the exit code."""
    from .adapt import AdaptAborted, attach_mc, run
    from .mesh import save_mesh

    out = Path(out if out is not None else cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    rows, notes = [], {}
    t0 = time.perf_counter()

    def progress(row, snap):
        rows.append(row)
        if cfg["output.meshes"]:
            save_mesh(snap.mesh, out / f"mesh_{row.iter:03d}.txt")
        echo(f"iter {row.iter:2d} {row.branch} T={row.n_triangles} dims={tuple(row.dims)} dofs={row.dofs} "
             f"eta={row.eta:.4e} (det {row.eta_det:.3e}, sto {row.eta_sto:.3e})")

    try:
        problem, acfg, mc = build_problem(cfg)
        result = run(problem, acfg, None, progress=progress)
        notes.update(result.notes)
        if mc is not None:
            attach_mc(result, mc, cadence=cfg["mc.cadence"])
            notes.update(result.notes)
    except AdaptAborted as exc:
        notes.update(exc.partial.notes)
        write_artifacts(out, cfg, rows, notes, "aborted", str(exc))
        echo(f"aborted: {exc}")
        return 3
    except Exception as exc:  # any module error: flush what we have and fail
        write_artifacts(out, cfg, rows, notes, "failed", f"{type(exc).__name__}: {exc}")
        echo(f"error: {type(exc).__name__}: {exc}")
        return 1
    notes["runtime_s"] = round(time.perf_counter() - t0, 3)
    write_artifacts(out, cfg, rows, notes, "ok")
    echo(f"wrote {out / 'ledger.csv'}")
    return 0


def _set_threads(n) -> None:
    n = os.environ.get("SGFEM_THREADS", n)
    if n is None:
        return
    if int(n) < 1:
        raise ValidationError("threads", "must be >= 1")
    # effective only before numpy loads its BLAS, which the lazy imports above ensure
    for var in THREAD_VARS:
        os.environ[var] = str(int(n))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sgfem", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    pr = sub.add_parser("run", help="run the adaptive loop")
    pr.add_argument("--config", required=True, help="config file or preset name (desk, deterministic)")
    pr.add_argument("--out", help="output directory (overrides output.dir)")
    pr.add_argument("--seed", type=int, help="Monte Carlo seed (overrides mc.seed)")
    pr.add_argument("--threads", type=int, help="BLAS threads; SGFEM_THREADS takes precedence")
    po = sub.add_parser("oracle", help="write golden files of an oracle suite")
    po.add_argument("suite", choices=("triple", "galerkin", "marking", "all"))
    po.add_argument("--out", default="golden")
    args = parser.parse_args(argv)

    try:
        if args.command == "oracle":
            _set_threads(None)
            from .oracles import write_golden

            for path in write_golden(args.suite, args.out):
                print(f"wrote {path}")
            return 0
        _set_threads(args.threads)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides(**{"mc.seed": args.seed})
    except (ParseError, ValidationError, FileNotFoundError) as exc:
        print(f"sgfem: {exc}", file=sys.stderr)
        return 2
    return run_benchmark(cfg, args.out)


if __name__ == "__main__":
    sys.exit(main())
