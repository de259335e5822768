"""Command-line interface: fit, generate, evaluate, diagnose, simulate-dgp."""
from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io as ffio
from .benchmark import (BenchmarkSpec, HeterogeneitySpec, MarginSpec, PropensitySpec, generate_benchmark,
                        generation_ate)
from .data import Dataset
from .dgp import BUILTINS, builtin_spec, simulate_dgp
from .errors import FrugalFlowsError, ParseError, SchemaError, SpecError, ValidationError
from .estimators import (difference_of_means, ipw_logistic, logistic_regression, outcome_regression_ate,
                         _weighted_logistic)
from .frugal import FrugalFlowModel, fit_frugal_flow, fit_heterogeneous_frugal_flow
from .propensity import PropensityFlowModel, PropensityOverride, fit_propensity_flow
from .training import TrainConfig

LOG_ENV = "FRUGALFLOWS_LOG_LEVEL"
MODEL_FILE = "model.ffm"
log = logging.getLogger("frugalflows")


# ---------------------------------------------------------------------------
# config sections


def _get(sec, key, cast, default):
    if sec is None or key not in sec:
        return default
    try:
        return cast(sec[key])
    except ValueError as exc:
        raise ParseError(f"config key {key!r}: {exc}") from None


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x.strip())


def train_config(cp: configparser.ConfigParser, seed: int | None) -> TrainConfig:
    sec = cp["train"] if cp.has_section("train") else None
    base = TrainConfig()
    kw = {}
    for name, default in base.to_dict().items():
        if name == "batch_size":
            kw[name] = _get(sec, name, lambda s: int(s) if s.strip().lower() not in ("", "none") else None,
                            default)
        else:
            kw[name] = _get(sec, name, type(default), default)
    if seed is not None:
        kw["seed"] = seed
    return TrainConfig(**kw)


def benchmark_spec(cp: configparser.ConfigParser, seed: int | None) -> BenchmarkSpec:
    if not cp.has_section("benchmark"):
        raise SpecError("config needs a [benchmark] section")
    sec = cp["benchmark"]
    margin = MarginSpec(
        kind=sec.get("margin", "gaussian"), tau=_get(sec, "tau", float, 0.0),
        intercept=_get(sec, "intercept", float, 0.0), sigma=_get(sec, "sigma", float, 1.0),
        beta=_get(sec, "beta", float, 0.0), c=_get(sec, "c", float, 0.0))
    kind = sec.get("propensity", "learned")
    override = None
    if kind == "override":
        override = PropensityOverride(sec.get("override", "constant"), p=_get(sec, "p", float, 0.5),
                                      intercept=_get(sec, "override_intercept", float, 0.0),
                                      coef=_get(sec, "override_coef", _floats, ()))
    prop = PropensitySpec(kind, p=_get(sec, "p", float, 0.5), override=override)
    het = None
    if sec.get("w_columns", "").strip():
        het = HeterogeneitySpec(_get(sec, "w_columns", _ints, ()), sec.get("heterogeneity", "learned"),
                                _get(sec, "heterogeneity_coef", _floats, ()))
    n = _get(sec, "n", int, 1000)
    return BenchmarkSpec(n=n, seed=seed if seed is not None else _get(sec, "seed", int, 0),
                         rho=_get(sec, "rho", float, 0.0), margin=margin, propensity=prop, heterogeneity=het)


def spec_to_config(spec: BenchmarkSpec) -> dict:
    m, p = spec.margin, spec.propensity
    out = {"n": spec.n, "seed": spec.seed, "rho": spec.rho, "margin": m.kind, "tau": m.tau,
           "intercept": m.intercept, "sigma": m.sigma, "beta": m.beta, "c": m.c,
           "propensity": p.kind, "p": p.p}
    if p.override is not None:
        out.update(override=p.override.kind, override_intercept=p.override.intercept,
                   override_coef=",".join(repr(float(c)) for c in p.override.coef))
        out["p"] = p.override.p
    if spec.heterogeneity is not None:
        h = spec.heterogeneity
        out.update(w_columns=",".join(str(j) for j in h.w_columns), heterogeneity=h.tag,
                   heterogeneity_coef=",".join(repr(float(c)) for c in h.coef))
    return {k: repr(float(v)) if isinstance(v, float) else str(v) for k, v in out.items()}


# ---------------------------------------------------------------------------
# commands


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_fit(args, cp) -> int:
    cfg = train_config(cp, args.seed)
    data = ffio.read_dataset(args.data, cp)
    sec = cp["fit"] if cp.has_section("fit") else None
    variant = sec.get("variant", "parametric-gaussian") if sec is not None else "parametric-gaussian"
    w_names = [s.strip() for s in sec.get("w_columns", "").split(",") if s.strip()] if sec is not None else []
    if w_names:
        missing = [w for w in w_names if w not in data.z_names]
        if missing:
            raise SchemaError(f"effect modifiers not among covariates: {missing}")
        ff = fit_heterogeneous_frugal_flow(data, [data.z_names.index(w) for w in w_names], cfg)
    else:
        ff = fit_frugal_flow(data, variant, cfg)
    pf = fit_propensity_flow(data.t, data.z, cfg)
    out = _out_dir(args.out)
    digest = ffio.save_payload(out / MODEL_FILE, {"frugal": ff.state(), "propensity": pf.state()})
    rows = [(i, tr, va) for i, tr, va in ff.history.to_rows()]
    ffio.write_rows(out / "loss.csv", ["epoch", "train_loss", "val_loss"], rows)
    log.info("fitted model %s (sha256 %s)", out / MODEL_FILE, digest)
    print(out / MODEL_FILE)
    return 0


def load_models(path) -> tuple[FrugalFlowModel, PropensityFlowModel]:
    payload = ffio.load_payload(path)
    return FrugalFlowModel.from_state(payload["frugal"]), PropensityFlowModel.from_state(payload["propensity"])


def cmd_generate(args, cp) -> int:
    ff, pf = load_models(args.model)
    spec = benchmark_spec(cp, args.seed)
    replicates = _get(cp["benchmark"], "replicates", int, 1)
    if replicates < 1:
        raise SpecError("replicates must be at least 1")
    out = _out_dir(args.out)
    fingerprint = ffio.file_sha256(args.model)
    for r in range(replicates):
        rspec = spec.with_(seed=spec.seed + r)
        data = generate_benchmark(ff, pf, rspec)
        stem = "benchmark" if replicates == 1 else f"benchmark_{r:03d}"
        ffio.write_dataset(out / f"{stem}.csv", data)
        meta = configparser.ConfigParser()
        meta["meta"] = {"format_version": str(ffio.FORMAT_VERSION), "model": str(Path(args.model).name),
                        "model_sha256": fingerprint}
        meta["benchmark"] = spec_to_config(rspec)
        if rspec.margin.kind in ("gaussian", "learned-nsf", "logistic", "probit") and rspec.heterogeneity is None:
            meta["meta"]["generation_ate"] = repr(generation_ate(rspec, ff))
        (out / f"{stem}.meta.ini").write_text(ffio.config_text(meta), encoding="utf-8")
        print(out / f"{stem}.csv")
    return 0


def _logistic_propensity(ds: Dataset) -> np.ndarray:
    x = np.column_stack([np.ones(ds.n), ds.z])
    fit = _weighted_logistic(x, ds.t, np.ones(ds.n), "propensity", sandwich=False)
    return np.clip(1.0 / (1.0 + np.exp(-(x @ fit.coef))), 1e-6, 1 - 1e-6)


def evaluate_dataset(ds: Dataset) -> list[tuple]:
    rows = []
    for est in (difference_of_means(ds), outcome_regression_ate(ds)):
        lo, hi = est.interval()
        rows.append((est.method, "ate", est.point, est.stderr, lo, hi))
    if np.all((ds.y == 0) | (ds.y == 1)):
        fits = [(ipw_logistic(ds, _logistic_propensity(ds)), "ipw"), (logistic_regression(ds), "logistic-or")]
        for fit, name in fits:
            for k, label in ((0, "intercept"), (1, "slope")):
                rows.append((name, label, fit.coef[k], fit.stderr[k],
                             fit.coef[k] - 2 * fit.stderr[k], fit.coef[k] + 2 * fit.stderr[k]))
    return rows


def cmd_evaluate(args, cp) -> int:
    if not args.files:
        raise ValidationError("evaluate needs at least one benchmark CSV")
    table, schema = [], None
    for path in args.files:
        ds = ffio.read_dataset(path, cp)
        if schema is None:
            schema = ds.z_names
        elif ds.z_names != schema:
            raise SchemaError(f"{path}: columns {ds.z_names} differ from {schema}")
        for row in evaluate_dataset(ds):
            table.append((str(path),) + row)
    pooled = []
    keys = sorted({(r[1], r[2]) for r in table})
    for method, quantity in keys:
        vals = np.array([r[3] for r in table if r[1] == method and r[2] == quantity])
        sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        pooled.append(("pooled", method, quantity, float(vals.mean()), sd,
                       float(vals.mean() - 2 * sd), float(vals.mean() + 2 * sd)))
    header = ["file", "method", "quantity", "estimate", "stderr", "lower_2sd", "upper_2sd"]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ffio.write_rows(out, header, table + pooled)
    print(out)
    return 0


def correlation_report(real: Dataset, synth: Dataset):
    if real.z_names != synth.z_names:
        raise SchemaError(f"column mismatch: {real.z_names} vs {synth.z_names}")
    names = list(real.z_names) + ["t", "y"]
    a = np.corrcoef(np.column_stack([real.z, real.t, real.y]), rowvar=False)
    b = np.corrcoef(np.column_stack([synth.z, synth.t, synth.y]), rowvar=False)
    return names, a, b, float(np.nanmax(np.abs(a - b)))


def cmd_diagnose(args, cp) -> int:
    names, a, b, diff = correlation_report(ffio.read_dataset(args.real, cp), ffio.read_dataset(args.synthetic, cp))
    rows = []
    for label, mat in (("real", a), ("synthetic", b), ("difference", a - b)):
        for i, name in enumerate(names):
            rows.append([label, name] + list(mat[i]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ffio.write_rows(out, ["matrix", "row"] + names, rows)
    print(f"max_abs_difference {diff!r}")
    return 0


def cmd_simulate(args, cp) -> int:
    sec = cp["dgp"] if cp.has_section("dgp") else None
    name = sec.get("name", "m1") if sec is not None else "m1"
    if name not in BUILTINS:
        raise SpecError(f"unknown DGP {name!r}; choose from {BUILTINS}")
    spec = builtin_spec(name, _get(sec, "ate", float, None))
    seed = args.seed if args.seed is not None else _get(sec, "seed", int, 0)
    sim = simulate_dgp(spec, _get(sec, "n", int, 10_000), seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ffio.write_dataset(out, sim.data)
    print(out)
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="frugalflows", description="Frugal flow fitting and causal benchmark generation")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--seed", type=int, help="overrides the seed in the config")
        sp.add_argument("--out", required=True, help=out_help)

    sp = sub.add_parser("fit", help="fit frugal and propensity flows to a CSV")
    sp.add_argument("data")
    common(sp, "output directory for model.ffm and loss.csv")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("generate", help="generate benchmark datasets from a fitted model")
    sp.add_argument("model")
    common(sp, "output directory for benchmark CSVs and metadata sidecars")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("evaluate", help="run reference estimators on benchmark CSVs")
    sp.add_argument("files", nargs="+")
    common(sp, "output CSV for the estimator table")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("diagnose", help="compare correlation matrices of two CSVs")
    sp.add_argument("real")
    sp.add_argument("synthetic")
    common(sp, "output CSV for the correlation report")
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("simulate-dgp", help="simulate a built-in ground-truth process")
    common(sp, "output CSV")
    sp.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cp = ffio.read_config(args.config) if args.config else configparser.ConfigParser()
        return args.func(args, cp)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FrugalFlowsError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
