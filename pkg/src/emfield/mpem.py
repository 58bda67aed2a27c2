"""Multipole expansion field model (MPEM).

Each magnetic source is an azimuthally symmetric harmonic potential

    Phi(r, cos th) = sum_n  B_n r^-(n+1) P_n(cos th),   n = 1..N,

whose unit-current field follows from B = -grad Phi.  In world coordinates,
with rhat the unit vector from the source to the evaluation point, u = cos th
the cosine against the source zenith axis z, the field of order n is

    B^(n) = B_n r^-(n+2) [ ((n+1) P_n(u) + u P_n'(u)) rhat - P_n'(u) z ].

This form is free of the 1/sin(th) singularity on the symmetry axis (the
sin(th) in the colatitude component cancels against the unit vector), so it
is stable at the poles.  Spatial derivatives are analytic; the resulting
fields are divergence- and curl-free to rounding by construction.

A full model superposes, per electromagnet: one direct source, F
cross-magnetization sources (induced magnetization in neighbouring cores),
and one offset source driven by a constant 1 A.  Calibration estimates all
coefficients and source poses by Levenberg-Marquardt on the field residuals.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    DimensionError,
    EvaluationDomainError,
    AffineFieldEval,
    ModelArtifact,
)

_R_FLOOR = 1e-12  # guards r -> 0 during calibration line searches


def legendre_tables(nmax: int, u):
    """P_n, P_n' and P_n'' for n = 0..nmax at u, via the Bonnet recurrence
    and its first two derivatives.  u may be any array shape."""
    u = np.asarray(u, dtype=float)
    shape = (nmax + 1,) + u.shape
    P = np.empty(shape)
    dP = np.empty(shape)
    d2P = np.empty(shape)
    P[0], dP[0], d2P[0] = 1.0, 0.0, 0.0
    if nmax >= 1:
        P[1], dP[1], d2P[1] = u, 1.0, 0.0
    for k in range(1, nmax):
        a, b, c = 2 * k + 1, k, k + 1
        P[k + 1] = (a * u * P[k] - b * P[k - 1]) / c
        dP[k + 1] = (a * (P[k] + u * dP[k]) - b * dP[k - 1]) / c
        d2P[k + 1] = (a * (2.0 * dP[k] + u * d2P[k]) - b * d2P[k - 1]) / c
    return P, dP, d2P


def legendre_pair(n: int, x: float) -> tuple[float, float]:
    """(P_n(x), P_n'(x)) for |x| <= 1."""
    if n < 0:
        raise ValueError("Legendre order must be >= 0")
    x = float(x)
    if abs(x) > 1.0 + 1e-12:
        raise ValueError(f"Legendre argument {x} outside [-1, 1]")
    P, dP, _ = legendre_tables(n, np.clip(x, -1.0, 1.0))
    return float(P[n]), float(dP[n])


@dataclass(frozen=True)
class SourcePose:
    """Location (m) and zenith direction (unit symmetry axis) of a source."""

    location: np.ndarray
    zenith: np.ndarray

    def __post_init__(self):
        loc = np.array(self.location, dtype=float)
        zen = np.array(self.zenith, dtype=float)
        if loc.shape != (3,) or zen.shape != (3,):
            raise DimensionError("pose location and zenith must be 3-vectors")
        nz = np.linalg.norm(zen)
        if abs(nz - 1.0) > 1e-12:
            raise ValueError(f"zenith must be unit norm (got {nz})")
        loc.setflags(write=False)
        zen.setflags(write=False)
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "zenith", zen)


def pose_from_angles(location, azimuth: float, inclination: float) -> SourcePose:
    """Pose with zenith (sin i cos a, sin i sin a, cos i); used by the
    calibrator to keep the zenith unconstrained."""
    si, ci = math.sin(inclination), math.cos(inclination)
    return SourcePose(
        location=np.asarray(location, dtype=float),
        zenith=np.array([si * math.cos(azimuth), si * math.sin(azimuth), ci]),
    )


def angles_from_zenith(zenith) -> tuple[float, float]:
    z = np.asarray(zenith, dtype=float)
    return math.atan2(z[1], z[0]), math.acos(np.clip(z[2], -1.0, 1.0))


@dataclass(frozen=True)
class MultipoleSource:
    """One multipole source: pose plus coefficients B_n (T m^(n+2)/A, n=1..N)."""

    pose: SourcePose
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.ndim != 1 or c.size < 1:
            raise DimensionError("coeffs must be a vector of length >= 1")
        if not np.all(np.isfinite(c)):
            raise ValueError("multipole coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def order(self) -> int:
        return self.coeffs.size


@dataclass
class MpemParams:
    """All sources of a calibrated MPEM: per coil one direct source, F
    cross-magnetization sources and one constant-current offset source."""

    order: int
    coil_count: int
    cross_count: int
    direct: list[MultipoleSource]
    cross: list[list[MultipoleSource]]
    offset: list[MultipoleSource]
    offset_pose_shared: bool = True
    exclusion_radius_m: float = 5e-3

    def __post_init__(self):
        S, F = self.coil_count, self.cross_count
        if len(self.direct) != S or len(self.offset) != S:
            raise DimensionError("need one direct and one offset source per coil")
        if len(self.cross) != S or any(len(row) != F for row in self.cross):
            raise DimensionError(f"need {F} cross sources per coil")
        for src in self.iter_sources():
            if src.order != self.order:
                raise DimensionError("all sources must share the model order")
        self._packed = None

    def iter_sources(self):
        yield from self.direct
        for row in self.cross:
            yield from row
        yield from self.offset

    @property
    def source_count(self) -> int:
        return self.coil_count * (1 + self.cross_count + 1)

    def packed(self):
        """(locations (m,3), zeniths (m,3), coeffs (m,N), coil_index (m,)).

        coil_index is the driving coil column, or -1 for offset sources
        (constant 1 A).  Cached; params are immutable after construction.
        """
        if self._packed is None:
            srcs = list(self.iter_sources())
            S, F = self.coil_count, self.cross_count
            coil = np.concatenate(
                [
                    np.arange(S),
                    np.repeat(np.arange(S), F),
                    np.full(S, -1),
                ]
            ).astype(int)
            self._packed = (
                np.array([s.pose.location for s in srcs]),
                np.array([s.pose.zenith for s in srcs]),
                np.array([s.coeffs for s in srcs]),
                coil,
            )
        return self._packed


# ---------------------------------------------------------------------------
# Field and spatial-derivative kernels, vectorised over sources and points.
# ---------------------------------------------------------------------------


def _geometry(locations, zeniths, pts):
    rel = pts[None, :, :] - locations[:, None, :]  # (m, q, 3)
    r = np.linalg.norm(rel, axis=2)
    r = np.maximum(r, _R_FLOOR)
    rhat = rel / r[..., None]
    u = np.clip(np.einsum("mqk,mk->mq", rhat, zeniths), -1.0, 1.0)
    return r, rhat, u


def _unit_fields(locations, zeniths, coeffs, pts):
    """Unit-current fields (T/A) of m sources at q points -> (m, q, 3)."""
    r, rhat, u = _geometry(locations, zeniths, pts)
    N = coeffs.shape[1]
    P, dP, _ = legendre_tables(N, u)
    out = np.zeros((locations.shape[0], pts.shape[0], 3))
    z = zeniths[:, None, :]
    for n in range(1, N + 1):
        radial = coeffs[:, n - 1][:, None] * r ** -(n + 2)
        f = (n + 1) * P[n] + u * dP[n]
        out += radial[..., None] * (f[..., None] * rhat - dP[n][..., None] * z)
    return out

def _unit_terms(locations, zeniths, pts, order):
    """Per-order unit-coefficient fields -> (m, order, q, 3).  Column n-1 is
    the field a source would produce with B_n = 1 and all others zero; the
    model is linear in these, which gives the calibrator its analytic
    coefficient Jacobian."""
    r, rhat, u = _geometry(locations, zeniths, pts)
    P, dP, _ = legendre_tables(order, u)
    out = np.empty((locations.shape[0], order, pts.shape[0], 3))
    z = zeniths[:, None, :]
    for n in range(1, order + 1):
        radial = r ** -(n + 2)
        f = (n + 1) * P[n] + u * dP[n]
        out[:, n - 1] = radial[..., None] * (f[..., None] * rhat - dP[n][..., None] * z)
    return out


def _unit_jacobians(locations, zeniths, coeffs, pts):
    """Spatial Jacobians d(unit field)/dp (T/(A m)) -> (m, q, 3, 3)."""
    r, rhat, u = _geometry(locations, zeniths, pts)
    N = coeffs.shape[1]
    P, dP, d2P = legendre_tables(N, u)
    m, q = r.shape
    out = np.zeros((m, q, 3, 3))
    z = zeniths[:, None, :]
    eye = np.eye(3)
    rrT = np.einsum("mqi,mqj->mqij", rhat, rhat)
    w = z - u[..., None] * rhat  # (m, q, 3)
    for n in range(1, N + 1):
        radial = coeffs[:, n - 1][:, None] * r ** -(n + 3)
        f = (n + 1) * P[n] + u * dP[n]
        fp = (n + 2) * dP[n] + u * d2P[n]
        avec = f[..., None] * rhat - dP[n][..., None] * z
        bvec = fp[..., None] * rhat - d2P[n][..., None] * z
        term = (
            -(n + 2) * np.einsum("mqi,mqj->mqij", avec, rhat)
            + np.einsum("mqi,mqj->mqij", bvec, w)
            + f[..., None, None] * (eye - rrT)
        )
        out += radial[..., None, None] * term
    return out


def _check_exclusion(params: MpemParams, pts):
    locations = params.packed()[0]
    d = np.linalg.norm(pts[None, :, :] - locations[:, None, :], axis=2)
    dmin = d.min()
    if dmin < params.exclusion_radius_m:
        raise EvaluationDomainError(
            f"evaluation point within {dmin:.2e} m of a source "
            f"(exclusion radius {params.exclusion_radius_m:.2e} m)"
        )


# ---------------------------------------------------------------------------
# Public evaluation operations.
# ---------------------------------------------------------------------------


def source_unit_field(src: MultipoleSource, p, exclusion_radius_m: float = 0.0):
    """Unit-current field (T/A) of a single source at p (m)."""
    p = np.asarray(p, dtype=float).reshape(1, 3)
    d = np.linalg.norm(p[0] - src.pose.location)
    if d < max(exclusion_radius_m, _R_FLOOR):
        raise EvaluationDomainError(f"point within exclusion ball (distance {d:.2e} m)")
    return _unit_fields(
        src.pose.location[None], src.pose.zenith[None], src.coeffs[None], p
    )[0, 0]


def source_unit_jacobian(src: MultipoleSource, p, exclusion_radius_m: float = 0.0):
    """Spatial Jacobian (T/(A m)) of a single source's unit-current field."""
    p = np.asarray(p, dtype=float).reshape(1, 3)
    d = np.linalg.norm(p[0] - src.pose.location)
    if d < max(exclusion_radius_m, _R_FLOOR):
        raise EvaluationDomainError(f"point within exclusion ball (distance {d:.2e} m)")
    return _unit_jacobians(
        src.pose.location[None], src.pose.zenith[None], src.coeffs[None], p
    )[0, 0]


def unit_actuation_batch(params: MpemParams, pts):
    """Actuation matrices and offsets at many points.

    Returns (A, b): A (q, 3, S) in T/A, b (q, 3) in T.
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    _check_exclusion(params, pts)
    locations, zeniths, coeffs, coil = params.packed()
    F = _unit_fields(locations, zeniths, coeffs, pts)  # (m, q, 3)
    A = np.zeros((pts.shape[0], 3, params.coil_count))
    b = np.zeros((pts.shape[0], 3))
    for j, c in enumerate(coil):
        if c >= 0:
            A[:, :, c] += F[j]
        else:
            b += F[j]
    return A, b


def unit_jacobian_batch(params: MpemParams, pts):
    """Per-coil unit-current spatial Jacobians and the offset Jacobian.

    Returns (JA, Jb): JA (q, S, 3, 3) in T/(A m), Jb (q, 3, 3) in T/m.
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    _check_exclusion(params, pts)
    locations, zeniths, coeffs, coil = params.packed()
    J = _unit_jacobians(locations, zeniths, coeffs, pts)  # (m, q, 3, 3)
    JA = np.zeros((pts.shape[0], params.coil_count, 3, 3))
    Jb = np.zeros((pts.shape[0], 3, 3))
    for j, c in enumerate(coil):
        if c >= 0:
            JA[:, c] += J[j]
        else:
            Jb += J[j]
    return JA, Jb


def eval_affine_params(params: MpemParams, p) -> AffineFieldEval:
    A, b = unit_actuation_batch(params, np.asarray(p, dtype=float)[None, :])
    return AffineFieldEval(actuation=A[0], offset=b[0])


def mpem_forward(params: MpemParams, p, i):
    """Field (T) at p (m) under currents i (A): superposition of all direct,
    cross and constant-current offset sources."""
    i = np.asarray(i, dtype=float)
    if i.shape != (params.coil_count,):
        raise DimensionError(f"expected {params.coil_count} currents")
    A, b = unit_actuation_batch(params, np.asarray(p, dtype=float)[None, :])
    return A[0] @ i + b[0]


def mpem_forward_batch(params: MpemParams, pts, currents):
    """Vectorised forward over (n, 3) points and (n, S) currents; repeated
    positions are evaluated once."""
    pts = np.asarray(pts, dtype=float)
    currents = np.asarray(currents, dtype=float)
    upos, inv = np.unique(pts, axis=0, return_inverse=True)
    A, b = unit_actuation_batch(params, upos)
    inv = inv.reshape(-1)
    return np.einsum("ncs,ns->nc", A[inv], currents) + b[inv]


def mpem_spatial_jacobian(params: MpemParams, p, i):
    """Spatial Jacobian dB/dp (3 x 3, T/m) of the total field at currents i."""
    i = np.asarray(i, dtype=float)
    if i.shape != (params.coil_count,):
        raise DimensionError(f"expected {params.coil_count} currents")
    JA, Jb = unit_jacobian_batch(params, np.asarray(p, dtype=float)[None, :])
    return np.einsum("s,sij->ij", i, JA[0]) + Jb[0]


def ring_poses(coil_count: int, radius_m: float, z_m: float = 0.0,
               aim=(0.0, 0.0, 0.0)) -> list[SourcePose]:
    """Evenly spaced coil poses on a horizontal ring, zeniths aimed at a point.

    A convenient nominal layout for synthetic systems and as a calibration
    initialization when the true geometry is unknown.
    """
    aim = np.asarray(aim, dtype=float)
    poses = []
    for s in range(coil_count):
        phi = 2.0 * math.pi * s / coil_count
        loc = np.array([radius_m * math.cos(phi), radius_m * math.sin(phi), z_m])
        axis = aim - loc
        nz = np.linalg.norm(axis)
        zen = axis / nz if nz > 0 else np.array([0.0, 0.0, 1.0])
        poses.append(SourcePose(location=loc, zenith=zen))
    return poses


# ---------------------------------------------------------------------------
# Serialization glue (used by core.serialize_model).
# ---------------------------------------------------------------------------


def _source_to_dict(src: MultipoleSource) -> dict:
    return {
        "location": src.pose.location.tolist(),
        "zenith": src.pose.zenith.tolist(),
        "coeffs": src.coeffs.tolist(),
    }


def _source_from_dict(d: dict) -> MultipoleSource:
    return MultipoleSource(
        pose=SourcePose(location=np.array(d["location"]), zenith=np.array(d["zenith"])),
        coeffs=np.array(d["coeffs"]),
    )


def params_to_dict(params: MpemParams) -> dict:
    return {
        "order": params.order,
        "coil_count": params.coil_count,
        "cross_count": params.cross_count,
        "offset_pose_shared": params.offset_pose_shared,
        "exclusion_radius_m": params.exclusion_radius_m,
        "direct": [_source_to_dict(s) for s in params.direct],
        "cross": [[_source_to_dict(s) for s in row] for row in params.cross],
        "offset": [_source_to_dict(s) for s in params.offset],
    }


def params_from_dict(d: dict) -> MpemParams:
    return MpemParams(
        order=int(d["order"]),
        coil_count=int(d["coil_count"]),
        cross_count=int(d["cross_count"]),
        direct=[_source_from_dict(s) for s in d["direct"]],
        cross=[[_source_from_dict(s) for s in row] for row in d["cross"]],
        offset=[_source_from_dict(s) for s in d["offset"]],
        offset_pose_shared=bool(d["offset_pose_shared"]),
        exclusion_radius_m=float(d["exclusion_radius_m"]),
    )


def make_artifact(params: MpemParams, training_meta: dict | None = None) -> ModelArtifact:
    return ModelArtifact(
        model_kind="mpem",
        coil_count=params.coil_count,
        payload=params,
        normalization=None,
        training_meta=training_meta,
    )


# ---------------------------------------------------------------------------
# Levenberg-Marquardt calibration.
#
# The model is linear in the coefficients, so their Jacobian columns are the
# per-order unit fields; pose columns use forward finite differences.  The
# damped normal equations use Marquardt diagonal scaling.  A penalty residual
# keeps every source at least `hull_margin_m` outside the convex hull of the
# training positions (the r -> 0 singularity would otherwise swallow the fit).
# ---------------------------------------------------------------------------


@dataclass
class CalibConfig:
    """Calibration settings.  nominal_poses seed the per-coil source poses."""

    nominal_poses: list[SourcePose]
    damping_init: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 10.0
    max_iterations: int = 200
    val_stop_delta_t: float = 1e-7  # stop when val RMSE changes less than this
    fd_step_loc_m: float = 1e-6
    fd_step_angle_rad: float = 1e-6
    restarts: int = 1
    seed: int = 0
    restart_loc_sigma_m: float = 5e-3
    restart_angle_sigma_rad: float = math.radians(5.0)
    share_offset_pose: bool = True
    hull_margin_m: float = 0.01
    hull_penalty_weight: float = 1e4  # mT per metre of margin violation
    exclusion_radius_m: float = 5e-3

    def __post_init__(self):
        if self.val_stop_delta_t <= 0 or self.max_iterations < 1:
            raise ValueError("stop threshold and iteration budget must be positive")


@dataclass(frozen=True)
class IterationRecord:
    restart: int
    iteration: int
    damping: float
    train_rmse_mt: float
    val_rmse_mt: float
    accepted: bool


@dataclass
class FitReport:
    iterations: list[IterationRecord]
    best_restart: int
    best_val_rmse_mt: float
    warnings: list[str]

    def as_text(self) -> str:
        lines = ["# MPEM calibration report", "# restart iter damping train_rmse_mt val_rmse_mt accepted"]
        for rec in self.iterations:
            lines.append(
                f"{rec.restart} {rec.iteration} {rec.damping:.3e} "
                f"{rec.train_rmse_mt:.9e} {rec.val_rmse_mt:.9e} {int(rec.accepted)}"
            )
        lines.append(f"# best_restart {self.best_restart}")
        lines.append(f"# best_val_rmse_mt {self.best_val_rmse_mt:.9e}")
        for w in self.warnings:
            lines.append(f"# warning: {w}")
        return "\n".join(lines) + "\n"


def _hull_faces(points):
    """Outward face planes (a, b) with a.x + b <= 0 inside the convex hull.
    Falls back to the bounding box for degenerate point sets."""
    from scipy.spatial import ConvexHull, QhullError

    try:
        eq = ConvexHull(points).equations
        return eq[:, :3], eq[:, 3]
    except (QhullError, ValueError):
        lo, hi = points.min(axis=0), points.max(axis=0)
        a = np.vstack([np.eye(3), -np.eye(3)])
        b = np.concatenate([-hi, lo])
        return a, b


class _CalibProblem:
    def __init__(self, train, val, cfg: CalibConfig, order: int, cross_count: int):
        self.cfg = cfg
        self.N = order
        self.S = train.coil_count
        self.F = cross_count
        if len(cfg.nominal_poses) != self.S:
            raise DimensionError("need one nominal pose per coil")

        self.tr_upos, tr_inv = np.unique(train.positions, axis=0, return_inverse=True)
        self.tr_inv = tr_inv.reshape(-1)
        self.tr_meas = train.fields
        self.va_upos, va_inv = np.unique(val.positions, axis=0, return_inverse=True)
        self.va_inv = va_inv.reshape(-1)
        self.va_meas = val.fields

        # source layout: direct 0..S-1, cross (s, f), offsets last
        S, F = self.S, self.F
        self.m = S * (1 + F + 1)
        coil = np.concatenate([np.arange(S), np.repeat(np.arange(S), F), np.full(S, -1)])
        self.src_coil = coil.astype(int)
        # pose layout: direct poses 0..S-1, cross poses S..S+S*F-1,
        # offsets share their coil pose unless decoupled
        pose_of = list(range(S)) + list(range(S, S + S * F))
        if cfg.share_offset_pose:
            pose_of += list(range(S))
            self.n_pose = S + S * F
        else:
            pose_of += list(range(S + S * F, S + S * F + S))
            self.n_pose = S + S * F + S
        self.src_pose = np.array(pose_of, dtype=int)

        self.W_tr = self._weights(train.currents)
        self.W_va = self._weights(val.currents)
        self.hull_a, self.hull_b = _hull_faces(self.tr_upos)
        self.n_data = 3 * train.positions.shape[0]

    def _weights(self, currents):
        n = currents.shape[0]
        W = np.empty((n, self.m))
        for j, c in enumerate(self.src_coil):
            W[:, j] = currents[:, c] if c >= 0 else 1.0
        return W

    # -- theta layout: poses (loc xyz then azimuth/inclination), then coeffs --

    def pack_theta(self, locs, angles, coeffs):
        return np.concatenate([locs.ravel(), angles.ravel(), coeffs.ravel()])

    def unpack_theta(self, theta):
        np_ = self.n_pose
        locs = theta[: 3 * np_].reshape(np_, 3)
        angles = theta[3 * np_ : 5 * np_].reshape(np_, 2)
        coeffs = theta[5 * np_ :].reshape(self.m, self.N)
        return locs, angles, coeffs

    def source_geometry(self, theta):
        locs, angles, coeffs = self.unpack_theta(theta)
        az, inc = angles[:, 0], angles[:, 1]
        si = np.sin(inc)
        zen = np.stack([si * np.cos(az), si * np.sin(az), np.cos(inc)], axis=1)
        return locs[self.src_pose], zen[self.src_pose], coeffs

    def fields_per_source(self, theta, pts, subset=None):
        loc, zen, coeffs = self.source_geometry(theta)
        if subset is not None:
            loc, zen, coeffs = loc[subset], zen[subset], coeffs[subset]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return _unit_fields(loc, zen, coeffs, pts)

    def predict_mt(self, theta, upos, inv, W):
        F_src = self.fields_per_source(theta, upos)  # (m, q, 3)
        return 1e3 * np.einsum("nm,mnk->nk", W, F_src[:, inv, :])

    def penalties(self, theta):
        loc, _, _ = self.source_geometry(theta)
        margin = (loc @ self.hull_a.T + self.hull_b).max(axis=1)  # >0 outside hull
        viol = np.maximum(0.0, self.cfg.hull_margin_m - margin)
        return self.cfg.hull_penalty_weight * viol

    def residuals(self, theta):
        pred = self.predict_mt(theta, self.tr_upos, self.tr_inv, self.W_tr)
        data = (pred - 1e3 * self.tr_meas).ravel()
        return np.concatenate([data, self.penalties(theta)])

    def train_rmse_mt(self, resid):
        data = resid[: self.n_data]
        return math.sqrt(np.mean(np.sum(data.reshape(-1, 3) ** 2, axis=1)))

    def val_rmse_mt(self, theta):
        pred = self.predict_mt(theta, self.va_upos, self.va_inv, self.W_va)
        return math.sqrt(np.mean(np.sum((pred - 1e3 * self.va_meas) ** 2, axis=1)))

    def coeff_columns(self, theta, upos, inv, W):
        """Analytic Jacobian block for the (linear) coefficients: (3n, m*N)."""
        loc, zen, _ = self.source_geometry(theta)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            T = _unit_terms(loc, zen, upos, self.N)  # (m, N, q, 3)
        contrib = W.T[:, None, :, None] * T[:, :, inv, :]  # (m, N, n, 3)
        n = W.shape[0]
        return 1e3 * contrib.transpose(2, 3, 0, 1).reshape(3 * n, self.m * self.N)

    def jacobian(self, theta, resid):
        n_rows = self.n_data + self.m
        n_par = theta.size
        J = np.zeros((n_rows, n_par))
        J[: self.n_data, 5 * self.n_pose :] = self.coeff_columns(
            theta, self.tr_upos, self.tr_inv, self.W_tr
        )
        base_pen = resid[self.n_data :]
        base_F = self.fields_per_source(theta, self.tr_upos)
        pose_sources = [np.flatnonzero(self.src_pose == k) for k in range(self.n_pose)]
        for k in range(self.n_pose):
            subset = pose_sources[k]
            for jpar in range(5):
                h = self.cfg.fd_step_loc_m if jpar < 3 else self.cfg.fd_step_angle_rad
                idx = (3 * k + jpar) if jpar < 3 else (3 * self.n_pose + 2 * k + (jpar - 3))
                tp = theta.copy()
                tp[idx] += h
                F_new = self.fields_per_source(tp, self.tr_upos, subset=subset)
                dF = (F_new - base_F[subset]) / h  # (m_sub, q, 3)
                col = 1e3 * np.einsum("nj,jnk->nk", self.W_tr[:, subset], dF[:, self.tr_inv, :])
                J[: self.n_data, idx] = col.ravel()
                if jpar < 3:
                    pen_new = self.penalties(tp)[subset]
                    J[self.n_data + subset, idx] = (pen_new - base_pen[subset]) / h
        return J

    def init_coeffs(self, theta_poses):
        """Linear least-squares coefficients at fixed initial poses."""
        A = self.coeff_columns(theta_poses, self.tr_upos, self.tr_inv, self.W_tr)
        y = (1e3 * self.tr_meas).ravel()
        coeffs, *_ = np.linalg.lstsq(A, y, rcond=None)
        return coeffs.reshape(self.m, self.N)

    def initial_theta(self, restart, rng):
        cfg, S, F = self.cfg, self.S, self.F
        locs = np.zeros((self.n_pose, 3))
        angles = np.zeros((self.n_pose, 2))

        def set_pose(k, pose: SourcePose, jitter):
            loc = pose.location + (jitter[:3] if jitter is not None else 0.0)
            az, inc = angles_from_zenith(pose.zenith)
            if jitter is not None:
                az, inc = az + jitter[3], inc + jitter[4]
            locs[k] = loc
            angles[k] = (az, inc)

        def draw():
            if restart == 0:
                return None
            j = np.empty(5)
            j[:3] = rng.normal(scale=cfg.restart_loc_sigma_m, size=3)
            j[3:] = rng.normal(scale=cfg.restart_angle_sigma_rad, size=2)
            return j

        for s in range(S):
            set_pose(s, cfg.nominal_poses[s], draw())
        for s in range(S):
            for f in range(F):
                # cross sources start at the neighbouring coils' locations
                # with the host coil's zenith (induced-magnetization picture)
                neighbour = cfg.nominal_poses[(s + f + 1) % S]
                host = cfg.nominal_poses[s]
                set_pose(S + s * F + f, SourcePose(neighbour.location, host.zenith), draw())
        if not cfg.share_offset_pose:
            for s in range(S):
                set_pose(S + S * F + s, cfg.nominal_poses[s], draw())
        theta = self.pack_theta(locs, angles, np.zeros((self.m, self.N)))
        coeffs = self.init_coeffs(theta)
        return self.pack_theta(locs, angles, coeffs)

    def to_params(self, theta) -> MpemParams:
        loc, zen, coeffs = self.source_geometry(theta)
        # renormalize zeniths against rounding in the angle map
        zen = zen / np.linalg.norm(zen, axis=1, keepdims=True)
        S, F = self.S, self.F

        def src(j):
            return MultipoleSource(pose=SourcePose(loc[j], zen[j]), coeffs=coeffs[j])

        direct = [src(s) for s in range(S)]
        cross = [[src(S + s * F + f) for f in range(F)] for s in range(S)]
        offset = [src(S * (1 + F) + s) for s in range(S)]
        return MpemParams(
            order=self.N,
            coil_count=S,
            cross_count=F,
            direct=direct,
            cross=cross,
            offset=offset,
            offset_pose_shared=self.cfg.share_offset_pose,
            exclusion_radius_m=self.cfg.exclusion_radius_m,
        )


def lm_calibrate(train, val, cfg: CalibConfig, order: int = 1, cross_count: int = 0):
    """Calibrate an MPEM on the training split.

    Returns (MpemParams, FitReport).  Among restarts, the parameter set with
    the lowest validation RMSE is returned; the report carries per-iteration
    train/val RMSE, damping and accepted/rejected flags.
    """
    if train.positions.shape[0] == 0:
        raise ValueError("training split is empty")
    prob = _CalibProblem(train, val, cfg, order, cross_count)
    rng = np.random.default_rng(cfg.seed)
    stop_delta_mt = cfg.val_stop_delta_t * 1e3

    records: list[IterationRecord] = []
    warns: list[str] = []
    best = None  # (val_rmse_mt, restart, theta)
    any_accepted = False

    for restart in range(max(1, cfg.restarts)):
        theta = prob.initial_theta(restart, rng)
        resid = prob.residuals(theta)
        sse = float(resid @ resid)
        if not math.isfinite(sse):
            warns.append(f"restart {restart}: non-finite initial residual")
            continue
        val_rmse = prob.val_rmse_mt(theta)
        records.append(
            IterationRecord(restart, 0, cfg.damping_init, prob.train_rmse_mt(resid), val_rmse, True)
        )
        if best is None or val_rmse < best[0]:
            best = (val_rmse, restart, theta.copy())
        lam = cfg.damping_init
        prev_val = val_rmse

        for it in range(1, cfg.max_iterations + 1):
            J = prob.jacobian(theta, resid)
            g = J.T @ resid
            H = J.T @ J
            diag = np.maximum(np.diag(H), 1e-12 * max(float(np.max(np.diag(H))), 1.0))
            accepted = False
            while lam <= 1e12:
                try:
                    delta = np.linalg.solve(H + lam * np.diag(diag), -g)
                except np.linalg.LinAlgError:
                    delta, *_ = np.linalg.lstsq(H + lam * np.diag(diag), -g, rcond=None)
                theta_new = theta + delta
                resid_new = prob.residuals(theta_new)
                sse_new = float(resid_new @ resid_new)
                if math.isfinite(sse_new) and sse_new < sse:
                    theta, resid, sse = theta_new, resid_new, sse_new
                    lam = max(lam / cfg.damping_down, 1e-15)
                    accepted = True
                    any_accepted = True
                    break
                lam *= cfg.damping_up
            if not accepted:
                records.append(
                    IterationRecord(restart, it, lam, prob.train_rmse_mt(resid), prev_val, False)
                )
                break
            val_rmse = prob.val_rmse_mt(theta)
            records.append(
                IterationRecord(restart, it, lam, prob.train_rmse_mt(resid), val_rmse, True)
            )
            if val_rmse < best[0]:
                best = (val_rmse, restart, theta.copy())
            if abs(val_rmse - prev_val) < stop_delta_mt:
                break
            prev_val = val_rmse

    if best is None:
        raise ValueError("calibration failed on every restart (non-finite residuals)")
    if not any_accepted:
        warns.append("no restart reduced the residual; returning best initialization")
        warnings.warn(warns[-1])

    params = prob.to_params(best[2])
    report = FitReport(
        iterations=records,
        best_restart=best[1],
        best_val_rmse_mt=best[0],
        warnings=warns,
    )
    return params, report


def fit_mpem(train, val, cfg: CalibConfig, order: int = 1, cross_count: int = 0):
    """lm_calibrate wrapped into a ModelArtifact (plus the fit report)."""
    params, report = lm_calibrate(train, val, cfg, order=order, cross_count=cross_count)
    stop_iter = max((r.iteration for r in report.iterations if r.restart == report.best_restart), default=0)
    meta = {
        "seed": cfg.seed,
        "stopping_epoch": stop_iter,
        "final_val_rmse_mt": report.best_val_rmse_mt,
    }
    return make_artifact(params, training_meta=meta), report
