"""Experiment runner: config parsing, seed management, replicate
orchestration, artifact emission.

Every run writes its result tables (CSV), reports (JSON) and a
manifest.json carrying the config echo, seed, code version and wall time.
Result artifacts embed the manifest hash; re-running a config with the
same seed reproduces them byte for byte, independent of --threads.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__, _backend
from .core import Dataset, RngStream
from .cvars import mle_cv
from .certificate import certify
from .diagnostics import (
    CoveringResult,
    anticoncentration_check,
    covering_time,
    iat_ess,
    scaling_experiment,
    tv_distance,
    tv_normals,
)
from .kernels import (
    KernelConfig,
    firefly,
    full_mh,
    generic_subsampling,
    informed_subsampler,
    permutation_wrapper,
    run_chain,
)
from .manifold import fluctuation_experiment
from .models import (
    GaussianPrior,
    GlmModel,
    ToyModel,
    binomial_family,
    logistic_family,
    mle,
    poisson_family,
    sample_dataset,
    save_dataset,
)

EXPERIMENTS = (
    "simulate",
    "fluctuation",
    "certificate",
    "covering",
    "scaling",
    "toy",
    "anticoncentration",
)


class ConfigError(ValueError):
    """Invalid config; the message names the offending field path."""


def _need(cfg: dict, key: str, path: str = ""):
    if key not in cfg:
        raise ConfigError(f"missing required config field: {path}{key}")
    return cfg[key]


def _family(tag: str, n_trials: int = 1):
    if tag == "logistic":
        return logistic_family()
    if tag == "binomial":
        return binomial_family(n_trials)
    if tag == "poisson":
        return poisson_family()
    raise ConfigError(f"model.family: unknown family {tag!r}")


def _build_model(spec: dict, path: str = "model."):
    fam = _need(spec, "family", path)
    if fam.startswith("toy:"):
        return ToyModel(fam.split(":", 1)[1])
    d = int(_need(spec, "d", path))
    prior = GaussianPrior(float(spec.get("prior_tau", 10.0)))
    return GlmModel(_family(fam, int(spec.get("n_trials", 1))), d, prior)


def _build_dataset(model, spec: dict, stream: RngStream, path: str = "dataset.") -> Dataset:
    n = int(_need(spec, "n", path))
    if isinstance(model, ToyModel):
        gen = stream.generator()
        if model.variant == "gaussian_hierarchy":
            y = float(spec.get("mu0", 0.0)) + gen.standard_normal(n)
        else:
            y = gen.laplace(0.0, 1.0 / float(spec.get("theta0", 0.5)), n)
        return Dataset(np.zeros((n, 1)), y)
    beta0 = np.asarray(_need(spec, "beta0", path), dtype=np.float64)
    gamma = spec.get("gamma", {"kind": "uniform_box"})
    return sample_dataset(model.family, beta0, gamma, n, stream)


def _build_kernel(model, spec: dict, data: Dataset, stream: RngStream, path: str = "kernel."):
    kind = _need(spec, "kind", path)
    config = KernelConfig(
        kind=kind if kind in ("generic", "full") else "generic",
        proposal_scale=float(spec.get("proposal_scale", 2.4)),
        batch_size=int(spec.get("batch_size", 10)),
        delta=float(spec.get("delta", 0.0)),
        weight_bound=float(spec.get("weight_bound", 1.0)),
        resample_fraction=float(spec.get("resample_fraction", 0.1)),
        max_batches=int(spec.get("max_batches", 64)),
        continuation_prob=float(spec.get("continuation_prob", 0.0)),
        bound_slack=float(spec.get("bound_slack", 0.0)),
    )
    if kind == "full":
        return full_mh(model, config.proposal_scale)
    if kind == "generic":
        return generic_subsampling(model, config)
    if kind == "informed":
        w = spec.get("weights", "two_point")
        if w == "two_point":
            A = config.weight_bound
            weights = np.where(np.arange(data.n) % 2 == 0, A, 1.0 / A)
        else:
            weights = np.asarray(w, dtype=np.float64)
        return informed_subsampler(model, config, weights)
    if kind == "firefly":
        return firefly(model, config, data)
    if kind == "permutation":
        inner = _build_kernel(model, _need(spec, "inner", path), data, stream, path + "inner.")
        return permutation_wrapper(inner, data.n, stream.child(0x9E37))
    raise ConfigError(f"{path}kind: unknown kernel kind {kind!r}")


# ---------------------------------------------------------------------------
# artifact helpers


def _manifest_hash(config: dict, seed: int) -> str:
    blob = json.dumps({"config": config, "seed": seed, "version": __version__}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _write_manifest(out: Path, config: dict, seed: int, wall: float) -> str:
    h = _manifest_hash(config, seed)
    payload = {
        "config": config,
        "seed": seed,
        "code_version": __version__,
        "manifest_hash": h,
        "wall_time_seconds": wall,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return h


def _write_csv(path: Path, header: list, rows: list, manifest_hash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# manifest_hash={manifest_hash}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def _write_json(path: Path, payload: dict, manifest_hash: str) -> None:
    payload = dict(payload)
    payload["manifest_hash"] = manifest_hash
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    return str(v)


# ---------------------------------------------------------------------------
# experiment implementations


def _run_simulate(config, stream, out, h, threads):
    model = _build_model(_need(config, "model"))
    data = _build_dataset(model, _need(config, "dataset"), stream.child(1))
    kernel = _build_kernel(model, _need(config, "kernel"), data, stream.child(2))
    steps = int(config.get("steps", 10_000))
    theta0 = config.get("theta0")
    if theta0 == "mle" and isinstance(model, GlmModel):
        theta0 = mle(model, data)
    elif theta0 is not None and not isinstance(theta0, str):
        theta0 = np.asarray(theta0, dtype=np.float64)
    trace = run_chain(kernel, data, steps, stream.child(3), theta0=theta0)
    trace.to_csv(out / "trace.csv", manifest_hash=h)
    cvs = None
    if isinstance(model, GlmModel):
        try:
            cvs = {"mle": mle_cv(model, data).values.tolist()}
        except Exception:
            cvs = None
    save_dataset(data, out / "dataset.csv", out / "dataset.json", control_variates=cvs)
    report = {
        "steps": steps,
        "acceptance_rate": float(trace.accept_flags.mean()),
        "access_count": int(trace.ledger.access_count),
        "final_cumulative_usage": int(trace.ledger.cumulative_sizes[-1]),
        "kernel": kernel.kind,
        "backend": _backend.backend(),
    }
    if steps >= 1000:
        res = iat_ess(trace.states[steps // 5 :, 0])
        report.update(iat=res.iat, ess=res.ess, ess_reliable=bool(res.reliable))
    _write_json(out / "diagnostics.json", report, h)
    return 0


def _run_fluctuation(config, stream, out, h, threads):
    model = _build_model(_need(config, "model"))
    res_rows = []
    n = int(_need(config, "n"))
    m = int(_need(config, "m"))
    reps = int(config.get("replicates", 100))
    res = fluctuation_experiment(
        model,
        n,
        m,
        config.get("cv_kind", "mle"),
        reps,
        int(config.get("walk_steps", 1000)),
        stream,
        beta0=None if "beta0" not in config else np.asarray(config["beta0"], dtype=np.float64),
        step_scale=config.get("step_scale"),
        box_halfwidth=float(config.get("box_halfwidth", 1.0)),
        threads=threads,
    )
    for row in res.rows:
        res_rows.append(
            [
                row["replicate"],
                "" if row.get("tv") is None else repr(row["tv"]),
                "" if row.get("accept_rate") is None else repr(row.get("accept_rate", "")),
                "" if row.get("residual") is None else repr(row.get("residual", "")),
                row.get("prefix_hash", ""),
                row.get("error", ""),
            ]
        )
    _write_csv(out / "fluctuation.csv",
               ["replicate", "tv", "accept_rate", "cv_residual", "prefix_hash", "error"],
               res_rows, h)
    _write_json(out / "fluctuation.json",
                {"quantiles": res.quantiles, "failures": res.failures,
                 "replicates": reps}, h)
    return 1 if res.failures > 0.1 * reps else 0


def _run_certificate(config, stream, out, h, threads):
    fam_tag = config.get("family", "logistic")
    if fam_tag == "gaussian_identity":
        from .models import gaussian_identity_family

        fam = gaussian_identity_family()
    else:
        fam = _family(fam_tag, int(config.get("n_trials", 1)))
    d = int(_need(config, "d"))
    beta = np.asarray(_need(config, "beta"), dtype=np.float64)
    res = certify(fam, beta, d, l_max=config.get("l_max"), stream=stream,
                  box_low=float(config.get("box_low", -1.0)),
                  box_high=float(config.get("box_high", 1.0)))
    res.to_json(out / "certificate.json", manifest_hash=h)
    return 0


def _run_covering(config, stream, out, h, threads):
    model = _build_model(_need(config, "model"))
    data = _build_dataset(model, _need(config, "dataset"), stream.child(1))
    kernel = _build_kernel(model, _need(config, "kernel"), data, stream.child(2))
    start = None
    if isinstance(model, GlmModel):
        start = mle(model, data)
    res = covering_time(
        kernel,
        data,
        stream.child(3),
        start,
        threshold=config.get("threshold"),
        quantile=float(config.get("quantile", 0.99)),
        replicates=int(config.get("replicates", 500)),
        step_budget=int(config.get("step_budget", 2000)),
        threads=threads,
    )
    rows = [[r, int(t)] for r, t in enumerate(res.taus)]
    _write_csv(out / "covering.csv", ["replicate", "tau"], rows, h)
    _write_json(out / "covering.json", {
        "tau_hat": res.tau_hat,
        "quantile": res.quantile,
        "censored_fraction": res.censored_fraction,
        "is_lower_bound": res.is_lower_bound,
    }, h)
    return 0


def _run_scaling(config, stream, out, h, threads):
    model_spec = _need(config, "model")
    kernel_spec = _need(config, "kernel")
    n_grid = [int(v) for v in _need(config, "n_grid")]
    steps_base = int(config.get("steps_base", 50_000))
    steps_rule = config.get("steps_rule", "constant")
    model = _build_model(model_spec)

    def data_builder(n, st):
        spec = dict(_need(config, "dataset"))
        spec["n"] = n
        return _build_dataset(model, spec, st)

    def kernel_builder(data):
        return _build_kernel(model, kernel_spec, data, stream.child(0xBEEF))

    def steps_for(n):
        if steps_rule == "constant":
            return steps_base
        if steps_rule == "linear":
            return int(steps_base * n / n_grid[0])
        raise ConfigError("steps_rule: must be 'constant' or 'linear'")

    def theta0_builder(data):
        if isinstance(model, GlmModel):
            return mle(model, data)
        return None

    res = scaling_experiment(data_builder, kernel_builder, n_grid, steps_for,
                             stream, theta0_builder=theta0_builder)
    res.to_csv(out / "scaling.csv", manifest_hash=h)
    _write_json(out / "scaling.json", {
        "slope": res.slope,
        "intercept": res.intercept,
        "rows": [{k: v for k, v in r.items()} for r in res.rows],
    }, h)
    return 0


def _toy_tv_rows(variant: str, n_grid, stream: RngStream):
    rows = []
    for ix, n in enumerate(n_grid):
        n = int(n)
        m = int(np.ceil(np.sqrt(n)))
        gen = stream.child(ix).generator()
        y = gen.standard_normal(n)
        if variant != "gaussian_hierarchy":
            raise ConfigError("toy.variant: only gaussian_hierarchy emits the TV table")
        mu_full = y.sum() / (n + 1)
        v_full = 1.0 / (n + 1)
        mu_sub = y[:m].sum() / (m + 1)
        v_sub = 1.0 / (m + 1)
        tv_closed = tv_normals(mu_full, np.sqrt(v_full), mu_sub, np.sqrt(v_sub))
        lo = min(mu_full, mu_sub) - 10 * np.sqrt(v_sub)
        hi = max(mu_full, mu_sub) + 10 * np.sqrt(v_sub)

        def lp(x, mu, v):
            return -0.5 * (np.asarray(x) - mu) ** 2 / v

        tv_quad = tv_distance(lambda x: lp(x, mu_full, v_full), lambda x: lp(x, mu_sub, v_sub), lo, hi)
        # variance-matched comparison: subsample posterior raised to the n/m power
        v_res = v_sub * m / n
        tv_rescaled = tv_normals(mu_full, np.sqrt(v_full), mu_sub, np.sqrt(v_res))
        rows.append({
            "n": n, "m": m,
            "tv_closed": tv_closed, "tv_quadrature": tv_quad,
            "tv_rescaled": tv_rescaled,
            "closed_vs_quad": abs(tv_closed - tv_quad),
        })
    return rows


def _run_toy(config, stream, out, h, threads):
    variant = config.get("variant", "gaussian_hierarchy")
    n_grid = [int(v) for v in _need(config, "n_grid")]
    rows = _toy_tv_rows(variant, n_grid, stream)
    _write_csv(
        out / "toy.csv",
        ["n", "m", "tv_closed", "tv_quadrature", "tv_rescaled"],
        [[r["n"], r["m"], repr(r["tv_closed"]), repr(r["tv_quadrature"]), repr(r["tv_rescaled"])] for r in rows],
        h,
    )
    _write_json(out / "toy.json", {"rows": rows}, h)
    return 0


def _run_anticoncentration(config, stream, out, h, threads):
    eps = float(config.get("eps", 0.1))
    samples = int(config.get("samples", 1_000_000))
    m_list = [int(v) for v in config.get("m_list", [1, 4, 16])]
    dist = config.get("dist", {"kind": "uniform"})
    rows = []
    for ix, m in enumerate(m_list):
        v = np.full(m, 1.0 / np.sqrt(m))
        res = anticoncentration_check(dist, v, eps, samples, stream.child(ix))
        rows.append(res)
    _write_csv(
        out / "anticoncentration.csv",
        ["m", "eps", "empirical", "bound", "sigma_mc", "ok"],
        [[r["m"], r["eps"], repr(r["empirical"]), repr(r["bound"]), repr(r["sigma_mc"]), int(r["ok"])] for r in rows],
        h,
    )
    _write_json(out / "anticoncentration.json", {"rows": rows}, h)
    return 0 if all(r["ok"] for r in rows) else 1


_RUNNERS = {
    "simulate": _run_simulate,
    "fluctuation": _run_fluctuation,
    "certificate": _run_certificate,
    "covering": _run_covering,
    "scaling": _run_scaling,
    "toy": _run_toy,
    "anticoncentration": _run_anticoncentration,
}


def run(kind: str, config: dict, seed: int, out_dir, threads: int = 1) -> int:
    """Run one experiment; writes artifacts plus manifest, returns exit status."""
    if kind not in _RUNNERS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stream = RngStream(seed)
    h = _manifest_hash(config, seed)
    t0 = time.time()
    status = _RUNNERS[kind](config, stream, out, h, threads)
    _write_manifest(out, config, seed, time.time() - t0)
    return status


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="submc",
        description="Subsampling-MCMC laboratory: instrumented kernels, coupled datasets, cost diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in EXPERIMENTS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", required=True, help="path to the JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="64-bit master seed (overrides config)")
        p.add_argument("--threads", type=int, default=1, help="replicate worker threads (outputs unchanged)")
        p.add_argument("--out", default="out", help="output directory")
    args = parser.parse_args(argv)

    try:
        with open(args.config) as fh:
            config = json.load(fh)
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"error: config is not valid JSON: {exc}", file=sys.stderr)
        return 2

    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    try:
        return run(args.command, config, seed, args.out, threads=args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - structured nonzero exit
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
