"""Long-format panel data: ingestion, validation and cell aggregation."""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence, Union

import numpy as np
import pandas as pd

from tripled.errors import (
    ConfigInvalid,
    DuplicateKey,
    EmptyAfterDrop,
    EmptyCell,
    InconsistentUnitAttribute,
    MissingColumn,
    MissingInput,
    ParseError,
    UnbalancedPanel,
)

Source = Union[str, os.PathLike, bytes, IO]

CORE_COLUMNS = ("unit", "time", "treat", "group", "outcome")


@dataclass(frozen=True)
class ColumnSchema:
    """Mapping from canonical field names to CSV column names."""

    unit: str = "unit"
    time: str = "time"
    treat: str = "treat"
    group: str = "group"
    outcome: str = "outcome"
    covariates: tuple[str, ...] = ()

    def source_columns(self) -> list[str]:
        return [self.unit, self.time, self.treat, self.group, self.outcome, *self.covariates]


@dataclass(frozen=True)
class CellKey:
    treat: int
    group: int
    time: int


@dataclass(frozen=True)
class BalanceReport:
    is_balanced: bool
    missing_pairs: list = field(default_factory=list)
    dropped_units: list = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class Panel:
    """Balanced or unbalanced long panel keyed by ``(unit, time)``.

    ``frame`` is sorted by unit then time and holds the columns ``unit``,
    ``time``, ``treat``, ``group``, ``outcome`` followed by the covariates in
    declaration order. Build instances through :meth:`from_frame` so the
    invariants are checked; treat the frame as read-only.
    """

    frame: pd.DataFrame
    post_start: int
    covariates: tuple[str, ...] = ()

    @classmethod
    def from_frame(
        cls,
        df: pd.DataFrame,
        post_start: int,
        covariates: Sequence[str] = (),
    ) -> "Panel":
        covariates = tuple(covariates)
        missing = [c for c in (*CORE_COLUMNS, *covariates) if c not in df.columns]
        if missing:
            raise MissingColumn(f"missing column(s): {', '.join(missing)}", columns=missing)
        frame = df.loc[:, [*CORE_COLUMNS, *covariates]].copy()
        frame["unit"] = frame["unit"].astype(str)
        frame["time"] = frame["time"].astype(np.int64)
        frame["treat"] = frame["treat"].astype(np.int64)
        frame["group"] = frame["group"].astype(np.int64)
        for col in ("outcome", *covariates):
            frame[col] = frame[col].astype(np.float64)
            if not np.all(np.isfinite(frame[col].to_numpy())):
                raise ParseError(f"non-finite values in column {col!r}", column=col)
        for col in ("treat", "group"):
            bad = ~frame[col].isin([0, 1])
            if bad.any():
                raise ParseError(f"column {col!r} must be 0/1", column=col)

        dup = frame.duplicated(["unit", "time"], keep=False)
        if dup.any():
            first = frame.loc[dup].iloc[0]
            raise DuplicateKey(
                f"duplicate observation for unit {first['unit']!r} at time {first['time']}",
                unit=first["unit"],
                time=int(first["time"]),
            )
        attr_counts = frame.groupby("unit")[["treat", "group"]].nunique()
        varying = attr_counts[(attr_counts > 1).any(axis=1)]
        if len(varying):
            raise InconsistentUnitAttribute(
                f"treat/group vary within unit {varying.index[0]!r}",
                units=list(varying.index),
            )

        frame = frame.sort_values(["unit", "time"], kind="mergesort").reset_index(drop=True)
        times = np.unique(frame["time"].to_numpy())
        if not (times.min() < post_start <= times.max()):
            raise ConfigInvalid(
                f"post_start={post_start} must leave at least one pre and one post period "
                f"(periods span {times.min()}..{times.max()})"
            )
        return cls(frame=frame, post_start=int(post_start), covariates=covariates)

    # -- registries -----------------------------------------------------

    @property
    def units(self) -> np.ndarray:
        return np.unique(self.frame["unit"].to_numpy())

    @property
    def times(self) -> np.ndarray:
        return np.unique(self.frame["time"].to_numpy())

    @property
    def pre_times(self) -> np.ndarray:
        t = self.times
        return t[t < self.post_start]

    @property
    def post_times(self) -> np.ndarray:
        t = self.times
        return t[t >= self.post_start]

    @property
    def n_obs(self) -> int:
        return len(self.frame)

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_periods(self) -> int:
        return len(self.times)

    @property
    def n_covariates(self) -> int:
        return len(self.covariates)

    @property
    def post(self) -> np.ndarray:
        """Row-aligned 0/1 post indicator."""
        return (self.frame["time"].to_numpy() >= self.post_start).astype(np.int64)

    @property
    def unit_table(self) -> pd.DataFrame:
        """Per-unit ``treat`` and ``group`` flags indexed by unit id."""
        return self.frame.groupby("unit", sort=True)[["treat", "group"]].first()

    @property
    def is_balanced(self) -> bool:
        return self.n_obs == self.n_units * self.n_periods

    def column(self, name: str) -> np.ndarray:
        return self.frame[name].to_numpy()

    def covariate_matrix(self) -> np.ndarray:
        return self.frame.loc[:, list(self.covariates)].to_numpy(dtype=np.float64)

    def outcome_matrix(self, column: str = "outcome") -> np.ndarray:
        """Wide ``(n_units, n_periods)`` matrix in sorted unit/time order."""
        if not self.is_balanced:
            raise UnbalancedPanel("outcome_matrix requires a balanced panel")
        return self.frame[column].to_numpy().reshape(self.n_units, self.n_periods)

    # -- derived panels -------------------------------------------------

    def with_outcome(self, values: np.ndarray) -> "Panel":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.n_obs,):
            raise ValueError(f"expected {self.n_obs} outcome values, got {values.shape}")
        frame = self.frame.copy()
        frame["outcome"] = values
        return Panel(frame=frame, post_start=self.post_start, covariates=self.covariates)

    def select_units(self, units: Iterable) -> "Panel":
        keep = set(map(str, units))
        frame = self.frame[self.frame["unit"].isin(keep)]
        return Panel.from_frame(frame, self.post_start, self.covariates)

    def select_rows(self, mask: np.ndarray) -> "Panel":
        return Panel.from_frame(self.frame[np.asarray(mask, dtype=bool)], self.post_start, self.covariates)

    def with_treat(self, treated_units: Iterable) -> "Panel":
        """Copy with ``treat`` reassigned: 1 for ``treated_units``, 0 otherwise."""
        treated = set(map(str, treated_units))
        frame = self.frame.copy()
        frame["treat"] = frame["unit"].isin(treated).astype(np.int64)
        return Panel(frame=frame, post_start=self.post_start, covariates=self.covariates)

    def to_csv(self, target=None, schema: ColumnSchema | None = None) -> str | None:
        """Write the panel in the long CSV schema.

        Floats are written with round-trip precision so that reloading
        reproduces every observation exactly.
        """
        out = self.frame
        if schema is not None:
            out = out.rename(
                columns={
                    "unit": schema.unit,
                    "time": schema.time,
                    "treat": schema.treat,
                    "group": schema.group,
                    "outcome": schema.outcome,
                }
            )
        return out.to_csv(target, index=False, float_format="%.17g", lineterminator="\n")


# -- ingestion --------------------------------------------------------------

def _read_raw(source: Source) -> pd.DataFrame:
    if isinstance(source, bytes):
        source = io.BytesIO(source)
    elif isinstance(source, (str, os.PathLike)) and not os.path.exists(source):
        raise MissingInput(f"data file not found: {os.fspath(source)}", path=os.fspath(source))
    try:
        return pd.read_csv(source, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as exc:
        raise ParseError("input has no header row") from exc


def _parse_numeric(raw: pd.Series, column: str, *, integral: bool = False, binary: bool = False) -> np.ndarray:
    values = pd.to_numeric(raw.str.strip(), errors="coerce").to_numpy(dtype=np.float64)
    bad = ~np.isfinite(values)
    if integral or binary:
        bad |= values != np.round(values)
    if binary:
        bad |= ~np.isin(values, (0.0, 1.0))
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ParseError(
            f"cannot parse {raw.iloc[row]!r} in column {column!r} at data row {row + 1}",
            row=row + 1,
            column=column,
        )
    return values


def load_panel(source: Source, schema: ColumnSchema | None = None, post_start: int | None = None) -> Panel:
    """Load a long-format CSV panel.

    Parameters
    ----------
    source : path, bytes or text/binary file object
        CSV with a header row, one row per unit-period.
    schema : ColumnSchema, optional
        Column-name mapping. Defaults to ``unit,time,treat,group,outcome``
        with no covariates.
    post_start : int
        First post-treatment period.

    Raises
    ------
    MissingInput, MissingColumn, ParseError, DuplicateKey,
    InconsistentUnitAttribute
    """
    if post_start is None:
        raise ConfigInvalid("post_start is required")
    schema = schema or ColumnSchema()
    raw = _read_raw(source)
    missing = [c for c in schema.source_columns() if c not in raw.columns]
    if missing:
        raise MissingColumn(f"missing column(s): {', '.join(missing)}", columns=missing)

    df = pd.DataFrame(
        {
            "unit": raw[schema.unit].astype(str),
            "time": _parse_numeric(raw[schema.time], schema.time, integral=True).astype(np.int64),
            "treat": _parse_numeric(raw[schema.treat], schema.treat, binary=True).astype(np.int64),
            "group": _parse_numeric(raw[schema.group], schema.group, binary=True).astype(np.int64),
            "outcome": _parse_numeric(raw[schema.outcome], schema.outcome),
        }
    )
    for col in schema.covariates:
        df[col] = _parse_numeric(raw[col], col)
    return Panel.from_frame(df, post_start=post_start, covariates=schema.covariates)


def filter_positive_outcome(panel: Panel) -> tuple[Panel, int]:
    """Keep rows with a strictly positive outcome; return the row drop count.

    Dropping rows usually unbalances the panel, so callers normally follow
    with :func:`validate_balanced`.
    """
    keep = panel.column("outcome") > 0
    return panel.select_rows(keep), int((~keep).sum())


# -- balance ----------------------------------------------------------------

def validate_balanced(panel: Panel, policy: str = "reject") -> tuple[Panel, BalanceReport]:
    """Check that every unit is observed in every period.

    ``policy="reject"`` raises :class:`UnbalancedPanel` on any gap;
    ``policy="drop_incomplete"`` removes units with gaps and returns the
    largest balanced subpanel over the full period set.
    """
    if policy not in ("reject", "drop_incomplete"):
        raise ConfigInvalid(f"unknown balance policy {policy!r}")
    if panel.n_obs == 0:
        raise EmptyAfterDrop("panel is empty")
    times = panel.times
    observed = set(zip(panel.column("unit"), panel.column("time").tolist()))
    missing = [(u, int(t)) for u in panel.units for t in times if (u, int(t)) not in observed]
    if not missing:
        return panel, BalanceReport(is_balanced=True)
    if policy == "reject":
        raise UnbalancedPanel(
            f"panel is unbalanced: {len(missing)} missing unit-period pairs",
            n_missing=len(missing),
        )
    dropped = sorted({u for u, _ in missing})
    kept = [u for u in panel.units if u not in set(dropped)]
    if not kept:
        raise EmptyAfterDrop("no complete units remain after dropping incomplete ones")
    sub = panel.select_units(kept)
    return sub, BalanceReport(is_balanced=False, missing_pairs=missing, dropped_units=dropped)


# -- cell aggregation -------------------------------------------------------

def cell_mean(panel: Panel, key: CellKey, column: str = "outcome") -> float:
    """Mean of ``column`` over observations in the (treat, group, time) cell."""
    f = panel.frame
    sel = (f["treat"] == key.treat) & (f["group"] == key.group) & (f["time"] == key.time)
    if not sel.any():
        raise EmptyCell(
            f"empty cell treat={key.treat} group={key.group} time={key.time}",
            treat=key.treat,
            group=key.group,
            time=key.time,
        )
    return float(f.loc[sel, column].mean())


def cell_means(panel: Panel, column: str = "outcome") -> pd.DataFrame:
    """Means and counts for every non-empty (treat, group, time) cell."""
    out = panel.frame.groupby(["treat", "group", "time"], sort=True)[column].agg(["mean", "count"])
    return out
