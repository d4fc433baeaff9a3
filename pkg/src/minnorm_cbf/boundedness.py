"""Boundedness of the min-norm controller at a candidate discontinuity point.

At a point x̄ of Z the linear system A v = (c1, c2, 0) with
A = [grad h; beta_f; beta_G^T] decides boundedness: a solution with c1 >= 0,
c2 < 0 certifies blow-up along x̄ + v t, while the absence of any nontrivial
solution with c1 >= 0, c2 <= 0 certifies boundedness. The feasible set is a
subspace cut by two homogeneous half-spaces, so the decision is made in closed
form after projecting onto ker(beta_G^T).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .model import BarrierSpec, Region, SystemModel, field_values, lie_data

ZPOINT_CHECK_TOL = 1e-6
CROSS_CHECK_RTOL = 1e-5
FD_STEP = 1e-5
CERT_LGH_TOL = 1e-9
CERT_H_TOL = 1e-12
CERT_STRICT = 1e-9
PROBE_DENOM_TOL = 1e-14
CAVEAT = "straight-line directions only"


class NotAZPoint(ValueError):
    pass


class CrossCheckFailure(ArithmeticError):
    pass


class AllUndefined(ArithmeticError):
    pass


class Verdict(str, enum.Enum):
    UNBOUNDED = "Unbounded"
    BOUNDED = "Bounded"
    INDETERMINATE = "Indeterminate"


class Inevitability(str, enum.Enum):
    INEVITABLY_UNBOUNDED = "InevitablyUnbounded"
    NOT_DETERMINED = "NotDetermined"


@dataclass
class TestMatrix:
    x_bar: np.ndarray
    row_h: np.ndarray
    row_bf: np.ndarray
    rows_bG: np.ndarray  # (m, n)
    alpha_prime0: float

    __test__ = False  # not a pytest class

    @property
    def A(self) -> np.ndarray:
        return np.vstack([self.row_h, self.row_bf, self.rows_bG])

    def scaled(self, c_h: float, c_f: float, c_g: float) -> "TestMatrix":
        return TestMatrix(self.x_bar, c_h * self.row_h, c_f * self.row_bf, c_g * self.rows_bG, self.alpha_prime0)


@dataclass
class BoundednessVerdict:
    kind: Verdict
    certificate: np.ndarray | None
    kernel_dim: int
    a: np.ndarray
    b: np.ndarray
    kernel_basis: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "certificate_v": None if self.certificate is None else self.certificate.tolist(),
            "kernel_dim": self.kernel_dim,
            "diagnostics": {"a": self.a.tolist(), "b": self.b.tolist()},
            "caveat": CAVEAT,
        }


@dataclass
class RayProbeReport:
    x_bar: np.ndarray
    v: np.ndarray
    t_samples: np.ndarray
    u_norms: np.ndarray
    region_labels: list[Region]
    h_values: np.ndarray
    fitted_exponent: float | None
    limsup_estimate: float

    def to_dict(self) -> dict:
        return {
            "x_bar": self.x_bar.tolist(),
            "v": self.v.tolist(),
            "t": self.t_samples.tolist(),
            "u_norm": self.u_norms.tolist(),
            "region": [r.value for r in self.region_labels],
            "h": self.h_values.tolist(),
            "exponent": self.fitted_exponent,
            "limsup_estimate": self.limsup_estimate,
        }


def _rank_threshold(s: np.ndarray) -> float:
    smax = float(s.max()) if s.size else 0.0
    return max(1e-10 * smax, 1e-14)


def null_space(M: np.ndarray) -> np.ndarray:
    """Orthonormal basis (columns) of ker M via SVD."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    n = M.shape[1]
    if M.shape[0] == 0:
        return np.eye(n)
    _, s, Vt = np.linalg.svd(M, full_matrices=True)
    rank = int(np.sum(s > _rank_threshold(s)))
    return Vt[rank:].T.copy()


def matrix_rank(M: np.ndarray) -> int:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > _rank_threshold(s)))


# -- assembly -------------------------------------------------------------


def _central_gradient(fn, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (fn(x + e) - fn(x - e)) / (2 * step)
    return g


def _close(sym_row: np.ndarray, fd_row: np.ndarray, rtol: float) -> bool:
    scale = max(1.0, float(np.linalg.norm(sym_row)))
    return float(np.linalg.norm(sym_row - fd_row)) <= rtol * scale


def assemble_test_matrix(
    model: SystemModel, barrier: BarrierSpec, x_bar, cross_check: bool = True
) -> TestMatrix:
    x = np.asarray(x_bar, dtype=float)
    lie = lie_data(model, barrier)
    h = float(barrier.value(x))
    nf = float(lie.Lfh_fn(x))
    lgh = np.asarray(lie.Lgh_fn(x), dtype=float)
    if abs(h) > ZPOINT_CHECK_TOL or abs(nf) > ZPOINT_CHECK_TOL or np.linalg.norm(lgh) > ZPOINT_CHECK_TOL:
        raise NotAZPoint(
            f"x={x.tolist()} is not in Z: h={h:.3g}, Lfh={nf:.3g}, |Lgh|={np.linalg.norm(lgh):.3g}"
        )
    n = model.n
    grad = np.asarray(barrier.gradient(x), dtype=float)
    H = np.asarray(barrier.hessian(x), dtype=float)
    fx = np.asarray(model.drift(x), dtype=float)
    Jf = np.asarray(model._J_f_fn(x), dtype=float)
    Gx = np.asarray(model.input_matrix(x), dtype=float).reshape(n, model.m)
    a0 = barrier.alpha.derivative_at_zero

    row_bf = H @ fx + (Jf.T + a0 * np.eye(n)) @ grad
    rows_bG = np.empty((model.m, n))
    for i, Jg_fn in enumerate(model._J_G_fn):
        Jg = np.asarray(Jg_fn(x), dtype=float)
        rows_bG[i] = H @ Gx[:, i] + Jg.T @ grad

    if cross_check:
        def N_of(p):
            return float(lie.Lfh_fn(p)) + float(barrier.alpha(barrier.value(p)))

        fd_bf = _central_gradient(N_of, x)
        if not _close(row_bf, fd_bf, CROSS_CHECK_RTOL):
            raise CrossCheckFailure(f"beta_f {row_bf.tolist()} vs finite differences {fd_bf.tolist()}")
        for i in range(model.m):
            fd = _central_gradient(lambda p: float(np.asarray(lie.Lgh_fn(p))[i]), x)
            if not _close(rows_bG[i], fd, CROSS_CHECK_RTOL):
                raise CrossCheckFailure(
                    f"beta_g{i + 1} {rows_bG[i].tolist()} vs finite differences {fd.tolist()}"
                )
    return TestMatrix(x, grad, row_bf, rows_bG, a0)


# -- decision -------------------------------------------------------------


def _certificate_valid(T: TestMatrix, v: np.ndarray) -> bool:
    return (
        float(np.linalg.norm(T.rows_bG @ v)) < CERT_LGH_TOL
        and float(T.row_h @ v) >= -CERT_H_TOL
        and float(T.row_bf @ v) < -CERT_STRICT
    )


def decide_boundedness(T: TestMatrix) -> BoundednessVerdict:
    K = null_space(T.rows_bG)
    k = K.shape[1]
    a = K.T @ T.row_h
    b = K.T @ T.row_bf
    if k == 0:
        return BoundednessVerdict(Verdict.BOUNDED, None, 0, a, b, K)

    w = None
    if k == 1:
        for s in (1.0, -1.0):
            if a[0] * s >= -CERT_H_TOL and b[0] * s < -CERT_STRICT:
                w = np.array([s])
                break
    else:
        aa = float(a @ a)
        cand = -b.copy()
        if aa > 0:
            cand += max(0.0, float(a @ b) / aa) * a
        norm = float(np.linalg.norm(cand))
        if norm > 0:
            w = cand / norm
    if w is not None:
        v = K @ w
        v /= np.linalg.norm(v)
        if _certificate_valid(T, v):
            return BoundednessVerdict(Verdict.UNBOUNDED, v, k, a, b, K)

    if k == 1 and abs(a[0]) > CERT_H_TOL and abs(b[0]) > CERT_STRICT and a[0] * b[0] > 0:
        return BoundednessVerdict(Verdict.BOUNDED, None, k, a, b, K)
    return BoundednessVerdict(Verdict.INDETERMINATE, None, k, a, b, K)


def inevitability_check(T: TestMatrix) -> Inevitability:
    K = null_space(T.rows_bG)
    if K.shape[1] < 2:
        return Inevitability.NOT_DETERMINED
    P = np.column_stack([K.T @ T.row_h, K.T @ T.row_bf])
    if matrix_rank(P) == 2:
        return Inevitability.INEVITABLY_UNBOUNDED
    return Inevitability.NOT_DETERMINED


# -- ray probe ------------------------------------------------------------


def ray_probe(
    model: SystemModel,
    barrier: BarrierSpec,
    x_bar,
    v,
    t_max: float = 0.01,
    samples: int = 12,
    ratio: float = 0.5,
) -> RayProbeReport:
    """Sample |u*(x̄ + v t)| for geometrically shrinking t.

    The closed-form expression is evaluated wherever its denominator is
    nonzero, including just outside C: tangential rays leave C at second order.
    Regions are labeled by the sign of N along the ray.
    """
    x_bar = np.asarray(x_bar, dtype=float)
    v = np.asarray(v, dtype=float)
    if abs(np.linalg.norm(v) - 1.0) > 1e-9:
        raise ValueError("direction v must be a unit vector")
    if samples < 8:
        raise ValueError("at least 8 samples are required")
    if not (t_max > 0 and 0 < ratio < 1):
        raise ValueError("need t_max > 0 and 0 < ratio < 1")
    t = t_max * ratio ** np.arange(samples)
    X = x_bar[:, None] + v[:, None] * t[None, :]
    h, N, lgh = field_values(model, barrier, X)
    lgh_norm = np.sqrt(np.sum(np.asarray(lgh, dtype=float).reshape(model.m, -1) ** 2, axis=0))
    defined = lgh_norm > PROBE_DENOM_TOL
    if np.all(~defined & (N < 0)):
        raise AllUndefined(f"u* undefined at every sample along v={v.tolist()} from {x_bar.tolist()}")
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(N >= 0, 0.0, np.where(defined, -N / lgh_norm, np.nan))
    labels = [Region.DPLUS if n_ >= 0 else Region.DMINUS for n_ in N]
    minus = (N < 0) & defined & (u > 0)
    exponent = None
    if np.count_nonzero(minus) >= 5:
        slope, _ = np.polyfit(np.log(t[minus]), np.log(u[minus]), 1)
        exponent = float(slope)
    finite = u[np.isfinite(u)]
    limsup = float(finite.max()) if finite.size else math.nan
    return RayProbeReport(x_bar, v, t, u, labels, np.asarray(h, dtype=float), exponent, limsup)


def reference_directions(T: TestMatrix, count: int = 8) -> list[np.ndarray]:
    """Unit directions spread over the plane spanned by the inward normal and one tangent."""
    normal = T.row_h / np.linalg.norm(T.row_h)
    n = normal.size
    if n == 1:
        return [normal, -normal]
    basis = null_space(normal[None, :])
    tangent = basis[:, 0]
    angles = 2 * np.pi * np.arange(count) / count
    return [np.cos(th) * normal + np.sin(th) * tangent for th in angles]


def admissible_directions(T: TestMatrix, count: int = 64) -> list[np.ndarray]:
    """Directions with grad h . v >= 0 (pointing into C or tangent to it)."""
    normal = T.row_h / np.linalg.norm(T.row_h)
    n = normal.size
    if n == 1:
        return [normal]
    if n == 2:
        tangent = null_space(normal[None, :])[:, 0]
        angles = np.linspace(-np.pi / 2, np.pi / 2, count)
        return [np.cos(th) * normal + np.sin(th) * tangent for th in angles]
    rng = np.random.default_rng(0)
    out = []
    while len(out) < count:
        d = rng.normal(size=n)
        d /= np.linalg.norm(d)
        out.append(d if d @ normal >= 0 else -d)
    return out
