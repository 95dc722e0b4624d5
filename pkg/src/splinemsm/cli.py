"""Command-line front end.

Subcommands: ``fit``, ``predict-q``, ``predict-p``, ``simulate``, ``convcheck``
and ``study``. Failures print ``error: <category>: <message>`` on stderr and
exit with 2 (validation), 3 (non-convergence) or 4 (numeric failure).
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import sys

import numpy as np

from . import __version__
from .errors import ConvergenceError, MSMError, ValidationError

EXIT_OK, EXIT_INTERNAL = 0, 1


# --- argument helpers -------------------------------------------------------------

def parse_grid(text):
    """``start:stop:step`` (inclusive of ``stop``) or a comma-separated list."""
    try:
        if ":" in text:
            parts = [float(x) for x in text.split(":")]
            if len(parts) != 3:
                raise ValueError
            a, b, h = parts
            if not h > 0 or b < a:
                raise ValidationError(f"grid {text!r}: need start <= stop and step > 0")
            n = int(np.floor((b - a) / h + 1e-9))
            pts = a + h * np.arange(n + 1)
            if b - pts[-1] > 1e-9 * max(1.0, abs(b)):
                pts = np.append(pts, b)
            return pts
        pts = np.array([float(x) for x in text.split(",") if x.strip()])
    except ValueError:
        raise ValidationError(f"cannot parse grid {text!r}") from None
    if pts.size == 0 or np.any(np.diff(pts) <= 0):
        raise ValidationError(f"grid {text!r} must be non-empty and increasing")
    return pts


def parse_profile(text):
    """``name=value,name=value`` into a dict of floats."""
    out = {}
    if not text:
        return out
    for item in text.split(","):
        if not item.strip():
            continue
        key, sep, val = item.partition("=")
        if not sep or not key.strip():
            raise ValidationError(f"profile entry {item!r} is not name=value")
        try:
            out[key.strip()] = float(val)
        except ValueError:
            raise ValidationError(f"profile entry {item!r}: value is not a number") from None
    return out


def _header(args):
    if getattr(args, "deterministic", False):
        return None
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    return f"generated by splinemsm {__version__} at {stamp}"


def _open_out(path):
    if path in (None, "-"):
        return sys.stdout, False
    return open(path, "w", newline=""), True


def _write_csv(args, header, rows):
    fh, close = _open_out(args.out)
    try:
        comment = _header(args)
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    finally:
        if close:
            fh.close()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    return v


def _load_spec_and_panel(args):
    from .model import parse_formula_file
    from .panel import format_pair_counts, ingest

    with open(args.formula) as fh:
        spec = parse_formula_file(fh.read(), death=args.death, cens_code=args.cens_code)
    panel = ingest(args.data, death=args.death, cens_code=args.cens_code,
                   n_states=spec.n_states)
    print("Number of observations for each pair of consecutive states")
    print(format_pair_counts(panel.pair_counts()))
    print()
    return spec, panel


def _load_fit(path):
    from .inference import FitResult
    try:
        return FitResult.load(path)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: not a fit file ({exc})") from None


# --- commands -------------------------------------------------------------------

def cmd_fit(args):
    from .smoothing import FitOptions, fit

    spec, panel = _load_spec_and_panel(args)
    opts = FitOptions(hessian=args.hessian, grid_step=args.refine, max_outer=args.max_outer,
                      lambda0=args.lam, fixed_lambda=args.lam is not None)
    result = fit(panel, spec, opts)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(result.dumps())
    print(result.summary())
    if not result.converged:
        raise ConvergenceError(result.report.message or "gradient or curvature check failed")
    return EXIT_OK


def cmd_convcheck(args):
    from .likelihood import Likelihood
    from .optimizer import PenalizedObjective, check_convergence
    from .panel import ingest
    from .penalty import PenaltyLayout

    result = _load_fit(args.fit)
    spec = result.design.spec
    panel = ingest(args.data, death=spec.death, cens_code=spec.cens_code,
                   n_states=spec.n_states)
    lik = Likelihood(result.design, panel, grid_step=result.grid_step)
    S = PenaltyLayout.from_design(result.design).s_lambda(result.lam)
    report = check_convergence(result.theta, PenalizedObjective(lik, S),
                               iterations=result.report.iterations if result.report else 0)
    print(report.text())
    if not report.converged:
        raise ConvergenceError("gradient or curvature check failed at the stored estimate")
    return EXIT_OK


def _plot(path, x, curves, title, ylabel):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "splinemsm"    # stable element ids
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    for label, est, lo, hi in curves:
        line, = ax.plot(x, est, label=label)
        if lo is not None:
            ax.plot(x, lo, ls="--", lw=0.8, color=line.get_color())
            ax.plot(x, hi, ls="--", lw=0.8, color=line.get_color())
    ax.set_xlabel("time")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_predict_q(args):
    from .inference import predict_q

    result = _load_fit(args.fit)
    grid = parse_grid(args.grid)
    band = predict_q(result, grid, parse_profile(args.profile), n_sim=args.nsim,
                     alpha=args.alpha, seed=args.seed, bands=args.nsim > 0)
    rows = []
    for j, label in enumerate(band.labels):
        for i, t in enumerate(grid):
            lo, hi = ((band.lower[i, j], band.upper[i, j]) if args.nsim > 0
                      else (np.nan, np.nan))
            rows.append((label, t, band.estimate[i, j], lo, hi))
    _write_csv(args, ["transition", "time", "estimate", "lower", "upper"], rows)
    if args.plot:
        curves = [(lab, band.estimate[:, j],
                   band.lower[:, j] if args.nsim > 0 else None,
                   band.upper[:, j] if args.nsim > 0 else None)
                  for j, lab in enumerate(band.labels)]
        _plot(args.plot, grid, curves, "transition intensities", "intensity")
    return EXIT_OK


def cmd_predict_p(args):
    from .inference import chapman_kolmogorov

    result = _load_fit(args.fit)
    parts = args.grid.split(":")
    if len(parts) != 3:
        raise ValidationError("predict-p needs --grid start:stop:step")
    try:
        t0, t1, step = (float(x) for x in parts)
    except ValueError:
        raise ValidationError(f"cannot parse grid {args.grid!r}") from None
    ck = chapman_kolmogorov(result, t0, t1, step, parse_profile(args.profile),
                            bands=args.nsim > 0, n_sim=max(args.nsim, 1), alpha=args.alpha,
                            seed=args.seed)
    C = result.design.spec.n_states
    rows, curves = [], []
    for r in range(C):
        for s in range(C):
            lo = ck.lower[:, r, s] if ck.lower is not None else np.full(ck.times.size, np.nan)
            hi = ck.upper[:, r, s] if ck.upper is not None else np.full(ck.times.size, np.nan)
            for i, t in enumerate(ck.times):
                rows.append((r + 1, s + 1, t, ck.P[i, r, s], lo[i], hi[i]))
            if ck.lower is not None:
                curves.append((f"p{r + 1}{s + 1}", ck.P[:, r, s], lo, hi))
            else:
                curves.append((f"p{r + 1}{s + 1}", ck.P[:, r, s], None, None))
    _write_csv(args, ["from", "to", "time", "estimate", "lower", "upper"], rows)
    if args.plot:
        _plot(args.plot, ck.times, curves, f"transition probabilities from t = {t0:g}",
              "probability")
    return EXIT_OK


def cmd_simulate(args):
    from .panel import write_panel_csv
    from .simulate import get_design, simulate_panel

    design = get_design(args.design)
    panel = simulate_panel(design, args.n, seed=args.seed, rep=args.rep)
    fh, close = _open_out(args.out)
    try:
        write_panel_csv(panel, fh, header_comment=_header(args))
    finally:
        if close:
            fh.close()
    if close:
        print(f"{len(panel)} records for {panel.n_subjects} subjects written to {args.out}")
    return EXIT_OK


def cmd_study(args):
    from .simulate import get_design, run_study

    design = get_design(args.design)

    def progress(rep, f):
        state = "failed" if f is None else ("converged" if f.converged else "not converged")
        print(f"replicate {rep}: {state}", file=sys.stderr, flush=True)

    res = run_study(design, args.n, args.reps, seed=args.seed, truth=args.truth,
                    on_replicate=progress)
    buf = io.StringIO()
    res.write_csv(buf)
    fh, close = _open_out(args.out)
    try:
        comment = _header(args)
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(buf.getvalue())
    finally:
        if close:
            fh.close()
    for rep, why in res.failed:
        print(f"replicate {rep} excluded: {why}", file=sys.stderr)
    return EXIT_OK


# --- parser ---------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="splinemsm",
                                description="Penalized spline multi-state Markov models")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def data_opts(sp):
        sp.add_argument("--data", required=True, help="panel CSV (id,time,state[,exact],...)")
        sp.add_argument("--death", action="store_true",
                        help="highest state is an exactly observed absorbing state")
        sp.add_argument("--cens-code", type=int, default=-99,
                        help="state code marking a censored living state (default -99)")

    def out_opts(sp):
        sp.add_argument("--out", help="output file (default stdout)")
        sp.add_argument("--deterministic", action="store_true",
                        help="omit the timestamped header line")

    def pred_opts(sp, grid_help):
        sp.add_argument("--fit", required=True, help="fit file written by 'fit --out'")
        sp.add_argument("--grid", required=True, help=grid_help)
        sp.add_argument("--profile", default="", help="covariate values, name=value,...")
        sp.add_argument("--nsim", type=int, default=1000, help="posterior draws (0: no bands)")
        sp.add_argument("--alpha", type=float, default=0.05)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--plot", help="write an SVG line plot to this path")
        out_opts(sp)

    sp = sub.add_parser("fit", help="fit a model to a panel")
    sp.add_argument("--formula", required=True, help="formula file")
    data_opts(sp)
    sp.add_argument("--out", help="write the fit (JSON) to this path")
    sp.add_argument("--hessian", choices=("exact", "opg"), default="exact")
    sp.add_argument("--refine", type=float, default=None, metavar="STEP",
                    help="insert piecewise-constant breakpoints every STEP time units")
    sp.add_argument("--lambda", dest="lam", type=float, default=None,
                    help="hold every smoothing parameter at this value")
    sp.add_argument("--max-outer", type=int, default=25)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("convcheck", help="recheck convergence of a stored fit")
    sp.add_argument("--fit", required=True)
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_convcheck)

    sp = sub.add_parser("predict-q", help="intensity curves with simulation bands")
    pred_opts(sp, "times: start:stop:step or a comma list")
    sp.set_defaults(func=cmd_predict_q)

    sp = sub.add_parser("predict-p", help="transition probabilities P(start, t)")
    pred_opts(sp, "start:stop:step")
    sp.set_defaults(func=cmd_predict_p)

    sp = sub.add_parser("simulate", help="simulate a panel from a built-in design")
    sp.add_argument("--design", choices=("illness-death", "five-state"), default="illness-death")
    sp.add_argument("--n", type=int, default=500, help="number of subjects")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--rep", type=int, default=0, help="replicate index")
    out_opts(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("study", help="simulation study of ten-year probabilities")
    sp.add_argument("--design", choices=("illness-death", "five-state"), default="illness-death")
    sp.add_argument("--n", type=int, default=500)
    sp.add_argument("--reps", type=int, default=25)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--truth", choices=("kolmogorov", "piecewise", "monte-carlo"),
                    default="kolmogorov")
    out_opts(sp)
    sp.set_defaults(func=cmd_study)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "n", 1) < 1 or getattr(args, "reps", 1) < 1:
            raise ValidationError("--n and --reps must be at least 1")
        if getattr(args, "nsim", 0) < 0:
            raise ValidationError("--nsim must be non-negative")
        return args.func(args)
    except MSMError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: validation: {exc}", file=sys.stderr)
        return ValidationError.exit_code
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
