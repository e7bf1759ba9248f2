"""Containers for register populations and linked samples."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import pandas as pd

from . import linkage
from ._validation import check_design, check_probability, check_vector, codes
from .exceptions import InputError

__all__ = ["LinkedSample", "PopulationFrame"]


@dataclass(frozen=True, eq=False)
class LinkedSample:
    """Linked survey sample plus the register paradata needed to correct it.

    Parameters
    ----------
    X : ndarray (n, p)
        Sampled register covariates, including any intercept column.
    y : ndarray (n,)
        Linked responses ``y*``.
    area, block : ndarray (n,)
        Integer area and block codes of each sampled unit.
    lambdas : ndarray (Q,)
        Correct-linkage probability of each block.
    cell_area, cell_block : ndarray (C,)
        Codes of every populated (area, block) cell, sampled or not.
    cell_N : ndarray (C,)
        Register size of each cell.
    cell_xbar : ndarray (C, p)
        Register column means of ``X`` in each cell.
    lambda_var : ndarray (Q,), optional
        Estimated variance of each ``lambda`` (audit paradata).
    moments : {"block", "cell"}
        Pooling used for the fitted-value moments in the linkage variance:
        all sampled units of the block, or only those of the cell.
    """

    X: np.ndarray
    y: np.ndarray
    area: np.ndarray
    block: np.ndarray
    lambdas: np.ndarray
    cell_area: np.ndarray
    cell_block: np.ndarray
    cell_N: np.ndarray
    cell_xbar: np.ndarray
    area_labels: np.ndarray = None
    block_labels: np.ndarray = None
    lambda_var: np.ndarray = None
    feature_names: tuple = None
    moments: str = "block"

    def __post_init__(self):
        X = check_design(self.X)
        n, p = X.shape
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", check_vector(self.y, n, "y"))
        area = check_vector(self.area, n, "area", dtype=np.intp)
        block = check_vector(self.block, n, "block", dtype=np.intp)
        object.__setattr__(self, "area", area)
        object.__setattr__(self, "block", block)
        lambdas = check_probability(np.atleast_1d(self.lambdas))
        object.__setattr__(self, "lambdas", lambdas)
        cell_area = np.asarray(self.cell_area, dtype=np.intp)
        cell_block = np.asarray(self.cell_block, dtype=np.intp)
        cell_N = np.asarray(self.cell_N, dtype=np.intp)
        cell_xbar = np.atleast_2d(np.asarray(self.cell_xbar, dtype=float))
        C = len(cell_area)
        if cell_block.shape != (C,) or cell_N.shape != (C,) or cell_xbar.shape != (C, p):
            raise InputError("cell arrays must share one row per cell and p columns of means")
        object.__setattr__(self, "cell_area", cell_area)
        object.__setattr__(self, "cell_block", cell_block)
        object.__setattr__(self, "cell_N", cell_N)
        object.__setattr__(self, "cell_xbar", cell_xbar)
        if np.any(cell_N < 1):
            raise InputError("cell sizes must be positive")
        if block.size and block.max() >= len(lambdas) or np.any(cell_block >= len(lambdas)):
            raise InputError("a block has no lambda in the paradata")
        D = int(max(cell_area.max(initial=-1), area.max(initial=-1)) + 1)
        if self.area_labels is None:
            object.__setattr__(self, "area_labels", np.arange(D))
        if self.block_labels is None:
            object.__setattr__(self, "block_labels", np.arange(len(lambdas)))
        if self.lambda_var is not None:
            lv = np.asarray(self.lambda_var, dtype=float)
            if lv.shape != lambdas.shape or np.any(lv < 0):
                raise InputError("lambda_var needs one non-negative entry per block")
            object.__setattr__(self, "lambda_var", lv)
        if self.moments not in ("block", "cell"):
            raise InputError("moments must be 'block' or 'cell'")
        # unit -> cell map
        key = {(a, b): c for c, (a, b) in enumerate(zip(cell_area.tolist(), cell_block.tolist()))}
        if len(key) != C:
            raise InputError("duplicate (area, block) cells in the aggregates")
        try:
            unit_cell = np.array(
                [key[(a, b)] for a, b in zip(area.tolist(), block.tolist())], dtype=np.intp
            )
        except KeyError as exc:
            raise InputError(f"sampled unit in (area, block) {exc.args[0]} has no aggregate row") from None
        object.__setattr__(self, "_unit_cell", unit_cell)
        cell_n = np.bincount(unit_cell, minlength=C)
        if np.any(cell_n > cell_N):
            raise InputError("a cell has more sampled units than register units")
        object.__setattr__(self, "_cell_n", cell_n)
        n_area = np.bincount(area, minlength=self.n_areas)
        if np.any(n_area == 0):
            missing = self.area_labels[n_area == 0]
            raise InputError(f"areas without sampled units are not supported: {list(missing)}")

    # -- sizes -----------------------------------------------------------
    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def n_areas(self):
        return len(self.area_labels)

    @property
    def n_blocks(self):
        return len(self.lambdas)

    @property
    def unit_cell(self):
        return self._unit_cell

    @property
    def cell_n(self):
        return self._cell_n

    @cached_property
    def n_area(self):
        return np.bincount(self.area, minlength=self.n_areas)

    @cached_property
    def N_area(self):
        return np.bincount(self.cell_area, weights=self.cell_N, minlength=self.n_areas).astype(int)

    # -- linkage quantities ----------------------------------------------
    @cached_property
    def cell_lambda(self):
        return np.where(self.cell_N < 2, 1.0, self.lambdas[self.cell_block])

    @cached_property
    def cell_gamma(self):
        return np.where(
            self.cell_N < 2, 0.0, (1.0 - self.cell_lambda) / np.maximum(self.cell_N - 1, 1)
        )

    @property
    def lam_unit(self):
        return self.cell_lambda[self.unit_cell]

    @property
    def gamma_unit(self):
        return self.cell_gamma[self.unit_cell]

    @property
    def N_unit(self):
        return self.cell_N[self.unit_cell]

    @cached_property
    def X_star(self):
        c = self.unit_cell
        return linkage.corrected_design(
            self.X, self.cell_xbar[c], self.cell_lambda[c], self.cell_N[c]
        )

    @property
    def moment_groups(self):
        return self.block if self.moments == "block" else self.unit_cell

    def linkage_variance(self, beta):
        """Per-unit linkage variance at coefficients ``beta``."""
        if self.is_perfect:
            return np.zeros(self.n)
        f = self.X @ beta
        return linkage.linkage_variance(f, self.moment_groups, self._lam_unit_cached)

    @cached_property
    def _lam_unit_cached(self):
        return self.lam_unit

    @cached_property
    def is_perfect(self):
        return bool(np.all(self.cell_lambda == 1.0))

    # -- area aggregates -----------------------------------------------
    @cached_property
    def _cell_sample_sum(self):
        out = np.zeros_like(self.cell_xbar)
        np.add.at(out, self.unit_cell, self.X)
        return out

    def _nonsampled_mean(self, corrected):
        C = len(self.cell_N)
        N, n = self.cell_N.astype(float), self.cell_n.astype(float)
        rest = N[:, None] * self.cell_xbar - self._cell_sample_sum  # sum over r_iq of X
        if corrected:
            # sum over r_iq of X* rows = (lam-gamma) sum_r X + (N-n) gamma N xbar
            lam, g = self.cell_lambda[:, None], self.cell_gamma[:, None]
            rest = (lam - g) * rest + (N - n)[:, None] * g * N[:, None] * self.cell_xbar
        tot = np.zeros((self.n_areas, self.p))
        np.add.at(tot, self.cell_area, rest)
        nr = (self.N_area - self.n_area).astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = tot / nr[:, None]
        mean[nr == 0] = 0.0
        assert C == len(self.cell_area)
        return mean

    @cached_property
    def xbar_r_star(self):
        """Non-sampled area means of the corrected design, (D, p)."""
        return self._nonsampled_mean(True)

    @cached_property
    def xbar_r(self):
        """Non-sampled area means of the register covariates, (D, p)."""
        return self._nonsampled_mean(False)

    @cached_property
    def xbar_area(self):
        """Register area means of ``X``, (D, p)."""
        tot = np.zeros((self.n_areas, self.p))
        np.add.at(tot, self.cell_area, self.cell_N[:, None] * self.cell_xbar)
        return tot / self.N_area[:, None]

    @cached_property
    def ybar_s(self):
        return np.bincount(self.area, weights=self.y, minlength=self.n_areas) / self.n_area

    # -- copies --------------------------------------------------------
    def with_lambdas(self, lambdas, lambda_var=None):
        return replace(self, lambdas=np.asarray(lambdas, dtype=float), lambda_var=lambda_var)

    def perfect_linkage(self):
        """Same sample with every block treated as perfectly linked."""
        return self.with_lambdas(np.ones(self.n_blocks))

    def with_response(self, y):
        return replace(self, y=np.asarray(y, dtype=float))

    def cells(self):
        """``CellIndex`` records of the sampled cells (population rows unknown)."""
        out = []
        for c in range(len(self.cell_N)):
            rows = np.flatnonzero(self.unit_cell == c)
            out.append(
                linkage.CellIndex(
                    self.area_labels[self.cell_area[c]],
                    self.block_labels[self.cell_block[c]],
                    rows,
                    np.arange(self.cell_N[c]),
                )
            )
        return out

    def aggregates_frame(self):
        """Cell aggregates as a DataFrame (``aggregates.csv`` layout)."""
        names = self.feature_names or tuple(f"x{k}" for k in range(self.p))
        df = pd.DataFrame(
            {
                "area_id": self.area_labels[self.cell_area],
                "block_id": self.block_labels[self.cell_block],
                "N_iq": self.cell_N,
                "n_iq": self.cell_n,
            }
        )
        k = 0
        for j, name in enumerate(names):
            if name == "intercept":
                continue
            k += 1
            df[f"xbar_iq_{k}"] = self.cell_xbar[:, j]
        return df

    # -- construction --------------------------------------------------
    @classmethod
    def from_frames(
        cls,
        sample,
        paradata,
        aggregates,
        covariates=None,
        response="y_star",
        intercept=True,
        moments="block",
    ):
        """Build a sample from the CSV-layout DataFrames.

        ``sample`` has ``area_id, block_id, <covariates>, <response>``;
        ``paradata`` has ``block_id, lambda`` and optionally ``var_lambda``;
        ``aggregates`` has ``area_id, block_id, N_iq`` and one
        ``xbar_<covariate>`` column per covariate (an ``n_iq`` column, if
        present, must agree with the sample).
        """
        for col in ("area_id", "block_id", response):
            if col not in sample.columns:
                raise InputError(f"sample: missing column {col!r}")
        for col in ("block_id", "lambda"):
            if col not in paradata.columns:
                raise InputError(f"paradata: missing column {col!r}")
        for col in ("area_id", "block_id", "N_iq"):
            if col not in aggregates.columns:
                raise InputError(f"aggregates: missing column {col!r}")
        if covariates is None:
            covariates = [
                c for c in sample.columns
                if c not in ("unit_id", "area_id", "block_id", response, "y")
            ]
        covariates = list(covariates)
        # register means are named xbar_iq_<k> (k = 1..p, covariate order)
        # or xbar_<covariate>
        xcols = []
        for k, c in enumerate(covariates, start=1):
            for cand in (f"xbar_iq_{k}", f"xbar_{c}"):
                if cand in aggregates.columns:
                    xcols.append(cand)
                    break
            else:
                raise InputError(f"aggregates: missing column 'xbar_iq_{k}' for covariate {c!r}")
        if paradata["block_id"].duplicated().any():
            raise InputError("paradata: duplicated block_id")

        area_codes, area_labels = codes(
            np.concatenate([aggregates["area_id"].to_numpy(), sample["area_id"].to_numpy()])
        )
        cell_area = area_codes[: len(aggregates)]
        area = area_codes[len(aggregates):]
        block_labels = paradata["block_id"].to_numpy()
        bmap = {b: k for k, b in enumerate(block_labels.tolist())}
        try:
            block = np.array([bmap[b] for b in sample["block_id"].tolist()], dtype=np.intp)
        except KeyError as exc:
            raise InputError(f"paradata: no lambda for block {exc.args[0]!r}") from None
        try:
            cell_block = np.array([bmap[b] for b in aggregates["block_id"].tolist()], dtype=np.intp)
        except KeyError as exc:
            raise InputError(f"paradata: no lambda for block {exc.args[0]!r}") from None

        X = sample[covariates].to_numpy(dtype=float)
        xbar = aggregates[xcols].to_numpy(dtype=float)
        names = tuple(covariates)
        if intercept:
            X = np.column_stack([np.ones(len(X)), X])
            xbar = np.column_stack([np.ones(len(xbar)), xbar])
            names = ("intercept",) + names
        lambda_var = None
        if "var_lambda" in paradata.columns:
            lambda_var = paradata["var_lambda"].to_numpy(dtype=float)
        out = cls(
            X=X,
            y=sample[response].to_numpy(dtype=float),
            area=area,
            block=block,
            lambdas=paradata["lambda"].to_numpy(dtype=float),
            cell_area=cell_area,
            cell_block=cell_block,
            cell_N=aggregates["N_iq"].to_numpy(),
            cell_xbar=xbar,
            area_labels=area_labels,
            block_labels=block_labels,
            lambda_var=lambda_var,
            feature_names=names,
            moments=moments,
        )
        if "n_iq" in aggregates.columns and not np.array_equal(
            aggregates["n_iq"].to_numpy(), out.cell_n
        ):
            raise InputError("aggregates: n_iq disagrees with the sampled units per cell")
        return out


@dataclass(eq=False)
class PopulationFrame:
    """Register population with true and (optionally) linked responses.

    ``X`` excludes the intercept.  ``area`` and ``block`` are integer codes.
    """

    X: np.ndarray
    y: np.ndarray
    area: np.ndarray
    block: np.ndarray
    y_star: np.ndarray = None
    mislinked: np.ndarray = None
    area_labels: np.ndarray = None
    block_labels: np.ndarray = None
    feature_names: tuple = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.y = np.asarray(self.y, dtype=float)
        self.area = np.asarray(self.area, dtype=np.intp)
        self.block = np.asarray(self.block, dtype=np.intp)
        if self.area_labels is None:
            self.area_labels = np.arange(self.area.max() + 1)
        if self.block_labels is None:
            self.block_labels = np.arange(self.block.max() + 1)
        if self.feature_names is None:
            self.feature_names = tuple(f"x{k + 1}" for k in range(self.X.shape[1]))

    @property
    def size(self):
        return len(self.y)

    @property
    def n_areas(self):
        return len(self.area_labels)

    def cell_codes(self):
        """Cell code per unit and the (area, block) of each cell."""
        Q = len(self.block_labels)
        key = self.area * Q + self.block
        uniq, inv = np.unique(key, return_inverse=True)
        return inv, uniq // Q, uniq % Q

    def true_means(self):
        return np.bincount(self.area, weights=self.y, minlength=self.n_areas) / np.bincount(
            self.area, minlength=self.n_areas
        )

    def cell_aggregates(self, intercept=True):
        """Cell codes, sizes and register covariate means."""
        cell, c_area, c_block = self.cell_codes()
        C = len(c_area)
        N = np.bincount(cell, minlength=C)
        xs = np.zeros((C, self.X.shape[1]))
        np.add.at(xs, cell, self.X)
        xbar = xs / N[:, None]
        if intercept:
            xbar = np.column_stack([np.ones(C), xbar])
        return c_area, c_block, N, xbar

    def to_frame(self):
        df = pd.DataFrame(
            {
                "unit_id": np.arange(self.size),
                "area_id": self.area_labels[self.area],
                "block_id": self.block_labels[self.block],
            }
        )
        for k, name in enumerate(self.feature_names):
            df[name] = self.X[:, k]
        df["y"] = self.y
        if self.y_star is not None:
            df["y_star"] = self.y_star
        return df

    @classmethod
    def from_frame(cls, df, covariates=None):
        for col in ("area_id", "block_id"):
            if col not in df.columns:
                raise InputError(f"population: missing column {col!r}")
        if covariates is None:
            covariates = [
                c for c in df.columns if c not in ("unit_id", "area_id", "block_id", "y", "y_star")
            ]
        area, area_labels = codes(df["area_id"].to_numpy())
        block, block_labels = codes(df["block_id"].to_numpy())
        y = df["y"].to_numpy(dtype=float) if "y" in df.columns else np.full(len(df), np.nan)
        y_star = df["y_star"].to_numpy(dtype=float) if "y_star" in df.columns else None
        return cls(
            X=df[list(covariates)].to_numpy(dtype=float),
            y=y,
            area=area,
            block=block,
            y_star=y_star,
            area_labels=area_labels,
            block_labels=block_labels,
            feature_names=tuple(covariates),
        )
