"""CSV schemas for samples, paradata, register aggregates and audits.

``sample.csv``
    ``unit_id, area_id, block_id, x1..xp, y_star``
``paradata.csv``
    ``block_id, lambda`` and optionally ``var_lambda``
``aggregates.csv``
    ``area_id, block_id, N_iq, n_iq, xbar_iq_1..xbar_iq_p``
``population.csv``
    ``unit_id, area_id, block_id, x1..xp`` and optionally ``y``, ``y_star``
``audit.csv``
    one row per audited record, ``block_id, correct`` (0/1), or one row per
    block, ``block_id, m, n_correct``
"""
from __future__ import annotations

import json
import os

import numpy as np
import pandas as pd

from .data import LinkedSample, PopulationFrame
from .exceptions import InputError
from .linkage import AuditSample

__all__ = [
    "read_csv",
    "read_linked_sample",
    "read_population",
    "read_audit",
    "sample_frames",
    "aggregates_from_population",
    "write_frame",
    "write_json",
]

FLOAT_FORMAT = "%.10g"


def read_csv(path, name, required=()):
    """Read a CSV and check that ``required`` columns are present."""
    if not os.path.exists(path):
        raise InputError(f"{name}: file not found: {path}")
    try:
        df = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise InputError(f"{name}: cannot parse {path}: {exc}") from None
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise InputError(f"{name}: missing column(s) {missing}")
    return df


def _require_numeric(df, name, cols):
    bad = [c for c in cols if not pd.api.types.is_numeric_dtype(df[c])]
    if bad:
        raise InputError(f"{name}: non-numeric column(s) {bad}")
    missing = [c for c in cols if df[c].isna().any()]
    if missing:
        raise InputError(f"{name}: missing values in column(s) {missing}")


def _covariates(df, exclude):
    cols = [c for c in df.columns if c not in exclude]
    _require_numeric(df, "sample", cols)
    return cols


def read_linked_sample(sample_csv, paradata_csv, aggregates=None, population_csv=None, moments="block"):
    """Build a :class:`LinkedSample` from the CSV inputs.

    Register aggregates come from ``aggregates`` (a path) or are computed
    from ``population_csv``.
    """
    sample = read_csv(sample_csv, "sample", ("area_id", "block_id", "y_star"))
    paradata = read_csv(paradata_csv, "paradata", ("block_id", "lambda"))
    _require_numeric(sample, "sample", ["y_star"])
    _require_numeric(paradata, "paradata", [c for c in ("lambda", "var_lambda") if c in paradata])
    covariates = _covariates(sample, ("unit_id", "area_id", "block_id", "y_star", "y"))
    if aggregates is not None:
        agg = read_csv(aggregates, "aggregates", ("area_id", "block_id", "N_iq"))
        _require_numeric(agg, "aggregates", [c for c in agg.columns if c not in ("area_id", "block_id")])
    elif population_csv is not None:
        pop = read_csv(population_csv, "population", ("area_id", "block_id", *covariates))
        agg = aggregates_from_population(pop, covariates)
    else:
        raise InputError("need an aggregates or a population file")
    lam = paradata["lambda"].to_numpy(dtype=float)
    if np.any(~np.isfinite(lam)) or np.any((lam < 0) | (lam > 1)):
        raise InputError("paradata: lambda must lie in [0, 1]")
    return LinkedSample.from_frames(sample, paradata, agg, covariates=covariates, moments=moments)


def aggregates_from_population(pop, covariates):
    """Cell sizes and register covariate means from unit-level records."""
    g = pop.groupby(["area_id", "block_id"], sort=True)
    agg = g.size().rename("N_iq").reset_index()
    means = g[list(covariates)].mean().reset_index(drop=True)
    for k, c in enumerate(covariates, start=1):
        agg[f"xbar_iq_{k}"] = means[c].to_numpy()
    return agg


def read_population(path):
    df = read_csv(path, "population", ("area_id", "block_id"))
    return PopulationFrame.from_frame(df)


def read_audit(path):
    """Per-block audit counts from either audit layout."""
    df = read_csv(path, "audit", ("block_id",))
    if {"m", "n_correct"} <= set(df.columns):
        g = df.groupby("block_id", sort=True)[["m", "n_correct"]].sum()
        blocks, m, correct = g.index, g["m"].to_numpy(), g["n_correct"].to_numpy()
    elif "correct" in df.columns:
        vals = df["correct"]
        if not vals.isin([0, 1, True, False]).all():
            raise InputError("audit: column 'correct' must be 0/1")
        g = df.assign(correct=vals.astype(int)).groupby("block_id", sort=True)["correct"]
        counts = g.size()
        blocks, m, correct = counts.index, counts.to_numpy(), g.sum().to_numpy()
    else:
        raise InputError("audit: need column 'correct' or columns 'm', 'n_correct'")
    if np.any(m < 1):
        raise InputError("audit: a block has zero audited records")
    return AuditSample(tuple(blocks.tolist()), np.asarray(m), np.asarray(correct))


def sample_frames(sample):
    """``(sample, paradata, aggregates)`` DataFrames of a :class:`LinkedSample`."""
    names = list(sample.feature_names or [f"x{k}" for k in range(sample.p)])
    keep = [j for j, nm in enumerate(names) if nm != "intercept"]
    df = pd.DataFrame(
        {
            "unit_id": np.arange(sample.n),
            "area_id": sample.area_labels[sample.area],
            "block_id": sample.block_labels[sample.block],
        }
    )
    for k, j in enumerate(keep, start=1):
        df[f"x{k}"] = sample.X[:, j]
    df["y_star"] = sample.y
    para = pd.DataFrame({"block_id": sample.block_labels, "lambda": sample.lambdas})
    if sample.lambda_var is not None:
        para["var_lambda"] = sample.lambda_var
    return df, para, sample.aggregates_frame()


def write_frame(df, path):
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    return obj


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
