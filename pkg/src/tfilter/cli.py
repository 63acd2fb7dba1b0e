"""Command-line entry point: ``tfilter run|rates|ulam|filter|simulate|schema``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys

import numpy as np

from .errors import ConfigError, NumericalError, TfilterError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _floats(s: str):
    return [float(v) for v in s.split(",") if v.strip()]


def _ints(s: str):
    return [int(v) for v in s.split(",") if v.strip()]


def _params(items):
    out = {}
    for it in items or []:
        k, _, v = it.partition("=")
        if not _:
            raise ConfigError(f"model parameter {it!r} is not of the form key=value")
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def _split_top(s: str):
    parts, depth, cur = [], 0, ""
    for ch in s:
        if ch in "[(":
            depth += 1
        elif ch in "])":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    parts.append(cur)
    return [p.strip() for p in parts]


def parse_init(text: str, dim: int):
    """``gauss(m, C)`` or ``benes(m, P)``; ``m``/``C`` are numbers or JSON arrays."""
    match = re.fullmatch(r"\s*(gauss|benes)\((.*)\)\s*", text)
    if not match:
        raise ConfigError(f"cannot parse initial condition {text!r}; expected gauss(m,C) or benes(m,P)")
    parts = _split_top(match.group(2))
    if len(parts) != 2:
        raise ConfigError(f"initial condition {text!r} needs exactly two arguments")
    try:
        m = np.atleast_1d(np.asarray(json.loads(parts[0]), dtype=float))
        C = np.asarray(json.loads(parts[1]), dtype=float)
    except (json.JSONDecodeError, ValueError):
        raise ConfigError(f"initial condition {text!r} has non-numeric arguments") from None
    if C.ndim == 0:
        C = C * np.eye(dim)
    elif C.ndim == 1:
        C = np.diag(C)
    if m.size != dim or C.shape != (dim, dim):
        raise ConfigError(f"initial condition {text!r} does not match state dimension {dim}")
    return match.group(1), m, C


def parse_domain(text: str):
    """``"-6:6"`` or ``"-25:25,-25:25,-30:20"`` into lower and upper bound lists."""
    try:
        pairs = [tuple(float(v) for v in part.split(":")) for part in text.split(",")]
    except ValueError:
        raise ConfigError(f"cannot parse domain {text!r}") from None
    if any(len(pr) != 2 for pr in pairs):
        raise ConfigError(f"domain {text!r} must list lo:hi per axis")
    return [a for a, _ in pairs], [b for _, b in pairs]


def _cmd_run(args):
    from .harness import ExperimentConfig, run_experiment

    cfg = ExperimentConfig.from_json(args.config)
    out = args.out or cfg.get("output_dir") or "results"
    if args.no_timing:
        cfg = cfg.replace(record_timing=False)
    run_experiment(cfg, out)
    print(f"wrote {out}")


def _cmd_rates(args):
    from .harness import ExperimentConfig, rate_study_pf, rate_study_pfof

    cfg = ExperimentConfig.from_json(args.config)
    if args.study == "pfof":
        vals = _ints(args.values) if args.values else [25, 50, 100, 200, 400]
        res = rate_study_pfof(cfg, vals, args.seeds or 1)
    else:
        vals = _ints(args.values) if args.values else [100, 316, 1000, 3162, 10000]
        res = rate_study_pf(cfg, vals, args.seeds or 20)
    out = args.out or cfg.get("output_dir") or "results"
    os.makedirs(out, exist_ok=True)
    res.to_csv(os.path.join(out, "rates.csv"))
    print(f"{args.study}: slope {res.slope:.3f} +- {res.halfwidth:.3f}")


def _cmd_ulam(args):
    from .partition import Domain, build_uniform_partition
    from .sde import make_model
    from .spectral import eigendecompose, save_spectral
    from .ulam import estimate_transition_matrix, model_kernel_matrix, save_matrix

    model = make_model(args.model, **_params(args.param))
    if args.domain:
        lower, upper = parse_domain(args.domain)
    elif args.lower and args.upper:
        lower, upper = _floats(args.lower), _floats(args.upper)
    else:
        raise ConfigError("give the domain as --domain lo:hi[,lo:hi...] or with --lower/--upper")
    p = build_uniform_partition(Domain(lower, upper), _ints(args.grid))
    if args.estimator == "quadrature":
        tm = model_kernel_matrix(p, model, args.tau)
    else:
        tm = estimate_transition_matrix(
            p, model, args.tau, args.n, substeps=args.substeps, rng=args.seed,
            out_of_domain=args.out_of_domain, stratified=args.stratified,
        )
    save_matrix(tm, args.out)
    if args.spectral:
        save_spectral(eigendecompose(tm, args.cond_threshold), tm, args.spectral)
    print(f"wrote {args.out} (N={tm.n})")


def _cmd_simulate(args):
    from .sde import DiscreteObservationModel, generate_truth_and_observations, make_model, write_observations_csv

    model = make_model(args.model, **_params(args.param))
    H = np.asarray(json.loads(args.H), dtype=float) if args.H else np.eye(model.dim)
    R = np.atleast_2d(np.asarray(json.loads(args.R), dtype=float))
    if R.size == 1 and H.shape[0] > 1:
        R = R[0, 0] * np.eye(H.shape[0])
    obs = DiscreteObservationModel.linear(H, R)
    t, X, Y = generate_truth_and_observations(model, obs, _floats(args.x0), args.steps, args.dt, args.seed, args.substeps)
    write_observations_csv(args.out, t, X, Y)
    print(f"wrote {args.out}")


def _cmd_filter(args):
    from .baselines import (
        GaussianBelief,
        benes_density,
        benes_initial_sampler,
        benes_transition_sampler,
        exkf_discrete,
        model_transition_sampler,
        sir_pf_run,
    )
    from .filter_core import pfof_run
    from .harness import histogram_weights
    from .partition import project_density, project_gaussian
    from .sde import DiscreteObservationModel, make_model, read_observations_csv
    from .spectral import eigendecompose, load_spectral, lr_pfof_run
    from .ulam import load_matrix

    tm = load_matrix(args.matrix)
    p = tm.partition
    data = read_observations_csv(args.obs)
    if "y" not in data:
        raise ConfigError(f"{args.obs} has no y_* observation columns")
    Y = data["y"]
    times = data["t"]
    H = np.asarray(json.loads(args.H), dtype=float) if args.H else np.eye(p.dim)[: Y.shape[1]]
    R = np.atleast_2d(np.asarray(json.loads(args.R), dtype=float))
    if R.size == 1 and Y.shape[1] > 1:
        R = R[0, 0] * np.eye(Y.shape[1])
    obs = DiscreteObservationModel.linear(H, R)
    family, m0, C0 = parse_init(args.init, p.dim)
    if family == "benes":
        w0 = project_density(p, lambda X: benes_density(X[:, 0], m0[0], C0[0, 0]))
    else:
        w0 = project_gaussian(p, m0, C0)
    os.makedirs(args.out, exist_ok=True)
    tau = float(tm.meta.get("tau", args.tau or 1.0))
    t_axis = np.concatenate([[0.0], times[data["y_rows"]]]) if len(times) > Y.shape[0] else np.arange(Y.shape[0] + 1) * tau

    if args.method == "pfof":
        tr = pfof_run(tm, w0, Y, obs, p, t_axis)
        tr.to_csv(os.path.join(args.out, "trace.csv"))
    elif args.method == "lrpfof":
        sm = load_spectral(args.spectral, p) if args.spectral else eigendecompose(tm)
        tr = lr_pfof_run(sm, w0, Y, obs, p, args.rank or min(40, p.n_boxes), t_axis)
        tr.to_csv(os.path.join(args.out, "trace.csv"))
    else:
        name = args.model or tm.meta.get("model")
        if not name:
            raise ConfigError("--model is required when the matrix file does not name its model")
        model = make_model(name, **_params(args.param))
        if args.method == "pf":
            if name == "benes":
                sampler, init = benes_transition_sampler(tau), benes_initial_sampler(m0[0], C0[0, 0])
            else:
                L = np.linalg.cholesky(C0)
                sampler = model_transition_sampler(model, tau, args.substeps)
                init = lambda m, gen: m0 + gen.standard_normal((m, p.dim)) @ L.T  # noqa: E731
            pt = sir_pf_run(sampler, obs, Y, args.particles, init, args.seed)
            _write_rows(os.path.join(args.out, "trace.csv"), p.dim, t_axis,
                        pt.means, [np.cov(e.positions.T, aweights=e.weights).reshape(p.dim, p.dim) for e in pt.ensembles])
            hist = histogram_weights(p, pt.ensembles[-1].positions, pt.ensembles[-1].weights)[0]
            np.savetxt(os.path.join(args.out, "final_histogram.csv"), hist.weights, delimiter=",")
        else:
            if model.linear_step is not None:
                A, shift, Sigma = model.linear_step(tau)
                flow, jac = (lambda x: A @ x + shift), (lambda x: A)
            else:
                Sigma = model.noise_covariance(m0) * tau
                flow = lambda x: x + tau * model.drift(x[None, :])[0]  # noqa: E731
                jac = lambda x: np.eye(p.dim) + tau * model.drift_jacobian(x)  # noqa: E731
            ek = exkf_discrete(flow, jac, Sigma, lambda x: H @ x, lambda x: H, R, Y, GaussianBelief(m0, C0))
            _write_rows(os.path.join(args.out, "trace.csv"), p.dim, t_axis, ek.means, list(ek.covs))
    print(f"wrote {args.out}")


def _write_rows(path, d, times, means, covs):
    import csv

    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "t"] + [f"mean_{i + 1}" for i in range(d)] + [f"var_{i + 1}" for i in range(d)] + ["tv_to_oracle"])
        for j, (m, C) in enumerate(zip(means, covs)):
            wr.writerow([j, repr(float(times[j]))] + [repr(float(v)) for v in m]
                        + [repr(float(v)) for v in np.diag(np.atleast_2d(C))] + [""])


def _cmd_schema(args):
    from .harness import CONFIG_SCHEMA

    print(json.dumps(CONFIG_SCHEMA, indent=2))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tfilter", description="Transfer-operator filters and baselines")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--no-timing", action="store_true", help="omit wall-clock columns (byte-stable output)")
    r.set_defaults(fn=_cmd_run)

    r = sub.add_parser("rates", help="convergence-rate study on the O-U problem")
    r.add_argument("--study", choices=["pfof", "pf"], required=True)
    r.add_argument("--config", required=True)
    r.add_argument("--values", help="comma-separated N (pfof) or m (pf) values")
    r.add_argument("--seeds", type=int)
    r.add_argument("--out")
    r.set_defaults(fn=_cmd_rates)

    r = sub.add_parser("ulam", help="estimate and save a transition matrix")
    r.add_argument("--model", required=True)
    r.add_argument("--param", action="append", help="model parameter key=value (repeatable)")
    r.add_argument("--domain", help='per-axis bounds, e.g. "-6:6" or "-25:25,-25:25,-30:20"')
    r.add_argument("--lower")
    r.add_argument("--upper")
    r.add_argument("--grid", "--counts", dest="grid", required=True, help="boxes per axis, comma-separated")
    r.add_argument("--tau", type=float, required=True)
    r.add_argument("--estimator", choices=["monte_carlo", "quadrature"], default="monte_carlo")
    r.add_argument("--samples", "--n", dest="n", type=int, default=100)
    r.add_argument("--substeps", type=int, default=1)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--stratified", action="store_true")
    r.add_argument("--out-of-domain", choices=["renormalize", "absorb"], default="renormalize")
    r.add_argument("--spectral", help="also write the eigendecomposition to this file")
    r.add_argument("--cond-threshold", type=float, default=1e14, help="refuse eigenbases worse conditioned than this")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=_cmd_ulam)

    r = sub.add_parser("simulate", help="simulate a truth path and discrete observations")
    r.add_argument("--model", required=True)
    r.add_argument("--param", action="append")
    r.add_argument("--x0", required=True)
    r.add_argument("--steps", type=int, required=True)
    r.add_argument("--dt", type=float, required=True)
    r.add_argument("--H")
    r.add_argument("--R", default="1.0")
    r.add_argument("--substeps", type=int, default=1)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=_cmd_simulate)

    r = sub.add_parser("filter", help="run one filter on a saved matrix and observation file")
    r.add_argument("--method", choices=["pfof", "lrpfof", "pf", "exkf"], required=True)
    r.add_argument("--matrix", required=True)
    r.add_argument("--obs", required=True)
    r.add_argument("--init", required=True, help='e.g. "gauss(2,0.1)" or "benes(0,2)"')
    r.add_argument("--H")
    r.add_argument("--R", default="1.0")
    r.add_argument("--rank", type=int)
    r.add_argument("--spectral")
    r.add_argument("--model")
    r.add_argument("--param", action="append")
    r.add_argument("--particles", type=int, default=500)
    r.add_argument("--substeps", type=int, default=1)
    r.add_argument("--tau", type=float)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=_cmd_filter)

    r = sub.add_parser("schema", help="print the experiment config JSON schema")
    r.set_defaults(fn=_cmd_schema)
    return ap


def _exit_code(e: BaseException) -> int:
    cause = getattr(e, "cause", e)
    if isinstance(cause, ConfigError):
        return EXIT_CONFIG
    if isinstance(cause, (NumericalError, ArithmeticError, np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    return EXIT_CONFIG


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (TfilterError, ValueError, ArithmeticError, np.linalg.LinAlgError, OSError) as e:
        print(f"tfilter: error: {e}", file=sys.stderr)
        return _exit_code(e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
