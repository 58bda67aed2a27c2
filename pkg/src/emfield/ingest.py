"""Dataset handling: CSV loading with position grouping, per-position affine
linearity audits, RANSAC sweep cleaning with a scale-aware relative residual,
position-level train/val/test splitting, and positional subsampling.

The CSV schema is
    pos_x_m,pos_y_m,pos_z_m,i_1_A,...,i_S_A,b_x_T,b_y_T,b_z_T
with the coil count S inferred from the header.  Rows whose positions agree
within 1e-9 m share a position_id; a position's samples always travel
together through splits and subsampling so the affine models never see the
same position in two splits.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .core import DimensionError, Sample

POSITION_TOL_M = 1e-9


class DatasetFormatError(ValueError):
    """Dataset file violates the CSV schema."""


@dataclass
class Dataset:
    """Column-major measurement table; one row per sample."""

    positions: np.ndarray  # (n, 3) m
    currents: np.ndarray  # (n, S) A
    fields: np.ndarray  # (n, 3) T
    position_ids: np.ndarray  # (n,) int
    source_tag: str = ""

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.currents = np.asarray(self.currents, dtype=float)
        self.fields = np.asarray(self.fields, dtype=float)
        self.position_ids = np.asarray(self.position_ids, dtype=int)
        n = self.positions.shape[0]
        if self.positions.shape != (n, 3) or self.fields.shape != (n, 3):
            raise DimensionError("positions and fields must be (n, 3)")
        if self.currents.ndim != 2 or self.currents.shape[0] != n or self.currents.shape[1] < 1:
            raise DimensionError("currents must be (n, S) with S >= 1")
        if self.position_ids.shape != (n,):
            raise DimensionError("position_ids must be (n,)")
        if n and not np.all(np.isfinite(self.fields)):
            raise ValueError("field components must be finite")
        if n and self.position_ids.min() < 0:
            raise ValueError("position_ids must be non-negative")
        if n:
            order = np.argsort(self.position_ids, kind="stable")
            sorted_ids = self.position_ids[order]
            starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
            pos_sorted = self.positions[order]
            spread = np.maximum.reduceat(pos_sorted, starts, axis=0) - np.minimum.reduceat(
                pos_sorted, starts, axis=0
            )
            if spread.max() >= POSITION_TOL_M:
                pid = int(sorted_ids[starts[int(np.argmax(spread.max(axis=1)))]])
                raise ValueError(f"position_id {pid} spans more than {POSITION_TOL_M} m")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def coil_count(self) -> int:
        return self.currents.shape[1]

    @property
    def samples(self) -> list[Sample]:
        return [
            Sample(self.positions[k], self.currents[k], self.fields[k], int(self.position_ids[k]))
            for k in range(len(self))
        ]

    def unique_position_ids(self) -> np.ndarray:
        return np.unique(self.position_ids)

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(
            positions=self.positions[mask],
            currents=self.currents[mask],
            fields=self.fields[mask],
            position_ids=self.position_ids[mask],
            source_tag=self.source_tag,
        )

    def select_positions(self, pids) -> "Dataset":
        return self.subset(np.isin(self.position_ids, np.asarray(list(pids))))


def _expected_header(S: int) -> list[str]:
    return (
        ["pos_x_m", "pos_y_m", "pos_z_m"]
        + [f"i_{s}_A" for s in range(1, S + 1)]
        + ["b_x_T", "b_y_T", "b_z_T"]
    )


class _PositionGrouper:
    """Assigns position ids, merging positions that agree within the tolerance."""

    def __init__(self, tol: float = POSITION_TOL_M):
        self.tol = tol
        self.table: dict[tuple, int] = {}
        self.canonical: list[np.ndarray] = []

    def assign(self, pos: np.ndarray) -> int:
        key = tuple(int(math.floor(v / self.tol)) for v in pos)
        hit = self.table.get(key)
        if hit is not None and np.abs(self.canonical[hit] - pos).max() < self.tol:
            return hit
        for off in product((-1, 0, 1), repeat=3):
            cand = self.table.get((key[0] + off[0], key[1] + off[1], key[2] + off[2]))
            if cand is not None and np.abs(self.canonical[cand] - pos).max() < self.tol:
                return cand
        pid = len(self.canonical)
        self.canonical.append(pos.copy())
        self.table[key] = pid
        return pid


def load_dataset(path) -> Dataset:
    """Read a dataset CSV; infers the coil count from the header and groups
    rows into position ids (tolerance 1e-9 m)."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        n_cols = len(header)
        S = n_cols - 6
        if S < 1 or header != _expected_header(S):
            raise DatasetFormatError(
                f"{path}: malformed header {header!r}; expected "
                "pos_x_m,pos_y_m,pos_z_m,i_1_A,...,i_S_A,b_x_T,b_y_T,b_z_T"
            )
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_cols:
                raise DatasetFormatError(
                    f"{path}: row {line_no} has {len(row)} columns, expected {n_cols}"
                )
            vals = np.empty(n_cols)
            for c, cell in enumerate(row):
                try:
                    vals[c] = float(cell)
                except ValueError:
                    raise DatasetFormatError(
                        f"{path}: row {line_no}, column {header[c]}: "
                        f"non-numeric cell {cell!r}"
                    ) from None
                if not math.isfinite(vals[c]):
                    raise DatasetFormatError(
                        f"{path}: row {line_no}, column {header[c]}: "
                        f"non-finite value {cell!r}"
                    )
            rows.append(vals)
    if not rows:
        raise DatasetFormatError(f"{path}: no data rows")
    data = np.vstack(rows)
    positions = data[:, 0:3]
    grouper = _PositionGrouper()
    pids = np.array([grouper.assign(p) for p in positions], dtype=int)
    return Dataset(
        positions=positions,
        currents=data[:, 3 : 3 + S],
        fields=data[:, 3 + S :],
        position_ids=pids,
        source_tag=str(path),
    )


def write_dataset(ds: Dataset, path) -> None:
    """Write the CSV schema with full-precision floats (repr round-trip)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(_expected_header(ds.coil_count)) + "\n")
        for k in range(len(ds)):
            cells = [repr(v) for v in ds.positions[k]]
            cells += [repr(v) for v in ds.currents[k]]
            cells += [repr(v) for v in ds.fields[k]]
            fh.write(",".join(cells) + "\n")


# ---------------------------------------------------------------------------
# Linearity audit.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineAudit:
    """Per-position affine fit quality: B ~ slope @ i + offset."""

    position_id: int
    r_squared: float
    offset_norm_t: float
    slope: np.ndarray  # (3, S) T/A


def affine_audit(ds: Dataset):
    """Least-squares affine fit per position.

    Returns (audits, skipped) where skipped lists (position_id, reason) for
    underdetermined positions.  R^2 is computed on the stacked 3-component
    residuals.
    """
    S = ds.coil_count
    audits: list[AffineAudit] = []
    skipped: list[tuple[int, str]] = []
    for pid in ds.unique_position_ids():
        rows = np.flatnonzero(ds.position_ids == pid)
        I = ds.currents[rows]
        Y = ds.fields[rows]
        distinct = max(np.unique(I[:, s]).size for s in range(S))
        if rows.size < S + 2 or distinct < 2:
            skipped.append((int(pid), f"underdetermined ({rows.size} samples, "
                                      f"{distinct} distinct levels)"))
            continue
        X = np.column_stack([I, np.ones(rows.size)])
        theta, *_ = np.linalg.lstsq(X, Y, rcond=None)
        resid = Y - X @ theta
        ss_res = float(np.sum(resid**2))
        ss_tot = float(np.sum((Y - Y.mean(axis=0)) ** 2))
        if ss_tot <= 0.0:
            r2 = 1.0 if ss_res <= 1e-30 else -math.inf
        else:
            r2 = 1.0 - ss_res / ss_tot
        offset = theta[S]
        audits.append(
            AffineAudit(
                position_id=int(pid),
                r_squared=r2,
                offset_norm_t=float(np.linalg.norm(offset)),
                slope=theta[:S].T.copy(),
            )
        )
    return audits, skipped


# ---------------------------------------------------------------------------
# RANSAC cleaning of per-coil sweeps.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OutlierRow:
    row: int
    position_id: int
    coil: int  # -1 for all-zero-current rows (assessed against every sweep)
    residual: float
    flagged: bool


@dataclass
class OutlierReport:
    entries: list[OutlierRow]
    flagged_fraction: float
    unassessed: list[tuple[int, int, str]]  # (position_id, coil, reason)

    def flags(self, n_rows: int) -> np.ndarray:
        out = np.zeros(n_rows, dtype=bool)
        for e in self.entries:
            if e.flagged:
                out[e.row] = True
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("row,position_id,coil,residual,flag\n")
            for e in self.entries:
                fh.write(f"{e.row},{e.position_id},{e.coil},{repr(e.residual)},{int(e.flagged)}\n")


def _relative_residual(fields, predicted, floor_t):
    err = np.linalg.norm(fields - predicted, axis=1)
    scale = np.maximum(np.linalg.norm(fields, axis=1), floor_t)
    return err / scale


def ransac_clean(
    ds: Dataset,
    floor_t: float,
    inlier_tol: float = 0.20,
    iterations: int = 100,
    seed: int = 0,
):
    """Flag sweep samples inconsistent with an affine-in-current fit.

    For each (position, active coil) group, RANSAC fits a 3-component line in
    the active current (minimal sample: two distinct current levels), keeps
    the consensus with the most inliers under the scale-aware relative
    residual r = |B - Bhat| / max(|B|, floor), refits on the inliers by least
    squares, and flags samples with r > inlier_tol.  All-zero-current rows
    belong to every sweep at their position and are flagged only if they
    exceed the tolerance against every sweep's refit.

    Returns (cleaned Dataset, OutlierReport).
    """
    if floor_t <= 0:
        raise ValueError("floor must be positive")
    n = len(ds)
    active_count = np.count_nonzero(ds.currents, axis=1)
    multi = np.flatnonzero(active_count > 1)
    groups: dict[tuple[int, int], list[int]] = {}
    zero_rows: dict[int, list[int]] = {}
    for k in range(n):
        pid = int(ds.position_ids[k])
        if active_count[k] == 0:
            zero_rows.setdefault(pid, []).append(k)
        elif active_count[k] == 1:
            coil = int(np.flatnonzero(ds.currents[k])[0])
            groups.setdefault((pid, coil), []).append(k)

    flagged = np.zeros(n, dtype=bool)
    residual_of = np.full(n, np.nan)
    coil_of = np.full(n, -1, dtype=int)
    assessed = np.zeros(n, dtype=bool)
    zero_best = {}  # row -> min residual across its position's sweeps
    unassessed: list[tuple[int, int, str]] = []

    for (pid, coil), rows in sorted(groups.items()):
        rows = np.array(rows + zero_rows.get(pid, []), dtype=int)
        levels = ds.currents[rows, coil]
        fields = ds.fields[rows]
        distinct = np.unique(levels)
        if distinct.size < 3:
            unassessed.append((pid, coil, f"only {distinct.size} current levels"))
            continue
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(pid, coil)))
        by_level = [np.flatnonzero(levels == v) for v in distinct]
        best_inliers = None
        for _ in range(iterations):
            la, lb = rng.choice(distinct.size, size=2, replace=False)
            ia = by_level[la][rng.integers(by_level[la].size)]
            ib = by_level[lb][rng.integers(by_level[lb].size)]
            slope = (fields[ib] - fields[ia]) / (levels[ib] - levels[ia])
            intercept = fields[ia] - slope * levels[ia]
            pred = levels[:, None] * slope + intercept
            r = _relative_residual(fields, pred, floor_t)
            inliers = r <= inlier_tol
            if best_inliers is None or inliers.sum() > best_inliers.sum():
                best_inliers = inliers
        # final refit: plain least squares on the consensus inliers
        X = np.column_stack([levels[best_inliers], np.ones(int(best_inliers.sum()))])
        theta, *_ = np.linalg.lstsq(X, fields[best_inliers], rcond=None)
        pred = np.column_stack([levels, np.ones(rows.size)]) @ theta
        r = _relative_residual(fields, pred, floor_t)
        for j, row in enumerate(rows):
            if active_count[row] == 0:
                prev = zero_best.get(row)
                if prev is None or r[j] < prev:
                    zero_best[row] = r[j]
            else:
                assessed[row] = True
                residual_of[row] = r[j]
                coil_of[row] = coil
                flagged[row] = r[j] > inlier_tol

    for row, rmin in zero_best.items():
        assessed[row] = True
        residual_of[row] = rmin
        flagged[row] = rmin > inlier_tol

    for row in multi:
        unassessed.append((int(ds.position_ids[row]), -1, f"row {row} drives multiple coils"))

    entries = [
        OutlierRow(int(k), int(ds.position_ids[k]), int(coil_of[k]),
                   float(residual_of[k]), bool(flagged[k]))
        for k in range(n)
    ]
    report = OutlierReport(
        entries=entries,
        flagged_fraction=float(flagged.sum()) / n if n else 0.0,
        unassessed=unassessed,
    )
    return ds.subset(~flagged), report


def quartile_floor(ds: Dataset) -> float:
    """First quartile of the field-magnitude distribution (linear
    interpolation between closest ranks), in tesla."""
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    return float(np.percentile(np.linalg.norm(ds.fields, axis=1), 25.0))


# ---------------------------------------------------------------------------
# Position-level splitting and subsampling.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitAssignment:
    assignment: dict[int, str]  # position_id -> train | validation | test

    def ids(self, name: str) -> list[int]:
        return sorted(pid for pid, split in self.assignment.items() if split == name)

    def select(self, ds: Dataset, name: str) -> Dataset:
        return ds.select_positions(self.ids(name))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("position_id,split\n")
            for pid in sorted(self.assignment):
                fh.write(f"{pid},{self.assignment[pid]}\n")


def _largest_remainder_counts(total: int, fractions) -> list[int]:
    raw = [f * total for f in fractions]
    base = [int(math.floor(x)) for x in raw]
    leftover = total - sum(base)
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - base[k]), k))
    for k in order[:leftover]:
        base[k] += 1
    return base


def split_positions(ds: Dataset, fractions=(0.70, 0.15, 0.15), seed: int = 0) -> SplitAssignment:
    """Random position-level split; all samples of a position stay together.

    Counts follow largest-remainder apportionment of the fractions (ties go
    to the earlier split in train/validation/test order).
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions {fractions} do not sum to 1")
    if len(fractions) != 3:
        raise ValueError("need (train, validation, test) fractions")
    pids = ds.unique_position_ids()
    if pids.size < 3:
        raise ValueError("need at least 3 positions to split")
    perm = np.random.default_rng(seed).permutation(pids)
    n_tr, n_va, n_te = _largest_remainder_counts(pids.size, fractions)
    assignment: dict[int, str] = {}
    for pid in perm[:n_tr]:
        assignment[int(pid)] = "train"
    for pid in perm[n_tr : n_tr + n_va]:
        assignment[int(pid)] = "validation"
    for pid in perm[n_tr + n_va :]:
        assignment[int(pid)] = "test"
    return SplitAssignment(assignment)


def subsample_positions(ds: Dataset, keep_fraction: float, seed: int = 0) -> Dataset:
    """Keep ceil(keep_fraction * n_positions) positions chosen uniformly at
    random, with all their samples.  The caller is responsible for excluding
    test positions from the pool (the CLI subsamples the train/val files)."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must be in (0, 1]")
    pids = ds.unique_position_ids()
    if pids.size == 0:
        raise ValueError("dataset has no positions")
    k = int(math.ceil(keep_fraction * pids.size))
    chosen = np.random.default_rng(seed).permutation(pids)[:k]
    out = ds.select_positions(chosen)
    if len(out) == 0:
        raise ValueError("subsample produced an empty dataset")
    return out
