"""Locating the boundary points where the min-norm controller may be discontinuous.

Z = {x on the boundary of C : grad h . f = 0 and |grad h . G| = 0}. Points are
found by Levenberg-damped Gauss-Newton on the stacked residual
(h, Lfh, Lg1h, ..., Lgmh) started from boundary points of C.
"""
from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import BarrierSpec, SystemModel, field_values, lie_data

ZPOINT_RESIDUAL_TOL = 1e-8
GRADIENT_FLOOR = 1e-6
WITNESS_LGH_TOL = 1e-9
WITNESS_N_TOL = 1e-12


class SignDisagreement(ValueError):
    """Two barriers claimed to share a safe set disagree in sign somewhere."""

    def __init__(self, x, h1: float, h2: float):
        self.x = np.asarray(x, dtype=float)
        super().__init__(f"h1={h1:.6g} and h2={h2:.6g} have opposite signs at x={self.x.tolist()}")


@dataclass
class ZPoint:
    x: np.ndarray
    residuals: tuple[float, float, float]  # (h, Lfh, |LgH|)
    basin_count: int

    def to_dict(self) -> dict:
        return {"x": self.x.tolist(), "residuals": list(self.residuals), "basin_count": self.basin_count}


class Strength(str, enum.Enum):
    EVIDENCE_WEAK = "EvidenceWeak"
    NO_WEAK_EVIDENCE = "NoWeakEvidenceFound"


@dataclass
class StrengthReport:
    classification: Strength
    witnesses: list[np.ndarray]
    collar_scales: list[float]
    witness_scales: list[float] = field(default_factory=list)
    loci: list[np.ndarray] = field(default_factory=list)  # boundary points the witnesses collapse onto

    def to_dict(self) -> dict:
        return {
            "classification": self.classification.value,
            "witnesses": [w.tolist() for w in self.witnesses],
            "witness_scales": list(self.witness_scales),
            "scales": list(self.collar_scales),
            "loci": [p.tolist() for p in self.loci],
            "note": "sampling evidence only; strong/weak cannot be certified by sampling",
        }


@dataclass
class IndependenceReport:
    z1: list[ZPoint]
    z2: list[ZPoint]
    hausdorff: float
    passed: bool
    threshold: float = 1e-5

    def to_dict(self) -> dict:
        return {
            "z1": [z.to_dict() for z in self.z1],
            "z2": [z.to_dict() for z in self.z2],
            "hausdorff": self.hausdorff,
            "passed": self.passed,
        }


# -- numerics -------------------------------------------------------------


def levenberg_marquardt(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    tol: float,
    max_iter: int = 200,
    lam: float = 1e-3,
) -> tuple[np.ndarray, float]:
    """Damped Gauss-Newton; returns (x, |r(x)|). Stops once |r| < tol."""
    x = np.array(x0, dtype=float)
    r = residual(x)
    cost = float(np.linalg.norm(r))
    n = x.size
    for _ in range(max_iter):
        if not math.isfinite(cost) or cost < tol:
            break
        J = jacobian(x)
        g = J.T @ r
        A = J.T @ J
        improved = False
        for _ in range(30):
            try:
                step = np.linalg.solve(A + lam * np.eye(n), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            x_new = x + step
            r_new = residual(x_new)
            c_new = float(np.linalg.norm(r_new))
            if math.isfinite(c_new) and c_new < cost:
                x, r, cost = x_new, r_new, c_new
                lam = max(lam / 10, 1e-15)
                improved = True
                break
            lam *= 10
        if not improved or np.linalg.norm(step) < 1e-17 * (1 + np.linalg.norm(x)):
            break
    return x, cost


def cluster_points(points: Sequence[np.ndarray], radius: float) -> list[list[int]]:
    """Single-linkage clusters (index lists) at the given linking radius."""
    k = len(points)
    parent = list(range(k))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    P = np.asarray(points, dtype=float).reshape(k, -1) if k else np.zeros((0, 0))
    for i in range(k):
        d = np.linalg.norm(P[i + 1 :] - P[i], axis=1)
        for j in np.nonzero(d <= radius)[0]:
            a, b = find(i), find(i + 1 + int(j))
            if a != b:
                parent[max(a, b)] = min(a, b)
    groups: dict[int, list[int]] = {}
    for i in range(k):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def boundary_points(
    barrier: BarrierSpec,
    lines_per_axis: int,
    samples_per_line: int = 129,
    offsets: np.ndarray | None = None,
) -> np.ndarray:
    """Points on {h = 0} found by bisection along coordinate lines of the domain box.

    Returns an array of shape (k, n). ``offsets`` (in [0, 1), one per non-swept
    axis) shifts the line grid inside each cell, for randomized probing.
    """
    n = barrier.n
    lo, hi = barrier.domain_box[:, 0], barrier.domain_box[:, 1]
    found = []
    for axis in range(n):
        others = [i for i in range(n) if i != axis]
        grids = []
        for j, i in enumerate(others):
            if offsets is None:
                grids.append(np.linspace(lo[i], hi[i], lines_per_axis))
            else:
                cell = (hi[i] - lo[i]) / lines_per_axis
                grids.append(lo[i] + cell * (np.arange(lines_per_axis) + offsets[j]))
        if others:
            mesh = np.array(np.meshgrid(*grids, indexing="ij")).reshape(len(others), -1)
        else:
            mesh = np.zeros((0, 1))
        t = np.linspace(lo[axis], hi[axis], samples_per_line)
        L = mesh.shape[1]
        X = np.empty((n, L, samples_per_line))
        for j, i in enumerate(others):
            X[i] = mesh[j][:, None]
        X[axis] = t[None, :]
        H = barrier.value(X)
        s = np.sign(H)
        li, ti = np.nonzero(s[:, :-1] * s[:, 1:] < 0)
        exact_l, exact_t = np.nonzero(H == 0)
        a = t[ti].copy()
        b = t[ti + 1].copy()
        ha = H[li, ti]
        base = X[:, li, 0].copy()
        for _ in range(60):
            mid = 0.5 * (a + b)
            P = base.copy()
            P[axis] = mid
            hm = barrier.value(P)
            left = np.sign(hm) == np.sign(ha)
            a = np.where(left, mid, a)
            ha = np.where(left, hm, ha)
            b = np.where(left, b, mid)
        P = base.copy()
        P[axis] = 0.5 * (a + b)
        found.append(P.T)
        found.append(X[:, exact_l, exact_t].T)
    return np.concatenate(found, axis=0) if found else np.zeros((0, n))


def default_seed_count(n: int) -> int:
    return 64 if n <= 2 else 512


def boundary_seeds(barrier: BarrierSpec, seeds: int) -> np.ndarray:
    """At least ``min(seeds, available)`` boundary points, evenly subsampled to ``seeds``."""
    n = barrier.n
    lines = max(2, math.ceil((seeds / (2 * n)) ** (1 / max(n - 1, 1))))
    pts = boundary_points(barrier, lines)
    for _ in range(6):
        if len(pts) >= seeds:
            break
        lines *= 2
        pts = boundary_points(barrier, lines)
    if len(pts) > seeds:
        idx = np.round(np.linspace(0, len(pts) - 1, seeds)).astype(int)
        pts = pts[idx]
    return pts


# -- Z location -----------------------------------------------------------


def zpoint_residuals(model: SystemModel, barrier: BarrierSpec, x) -> tuple[float, float, float]:
    x = np.asarray(x, dtype=float)
    lie = lie_data(model, barrier)
    h = barrier.value(x)
    nf = float(lie.Lfh_fn(x))
    lgh = np.asarray(lie.Lgh_fn(x), dtype=float)
    return float(h), nf, float(np.linalg.norm(lgh))


def is_zpoint(model, barrier, x, tol: float = ZPOINT_RESIDUAL_TOL) -> bool:
    h, nf, lg = zpoint_residuals(model, barrier, x)
    grad = np.asarray(barrier.gradient(np.asarray(x, dtype=float)), dtype=float)
    return abs(h) < tol and abs(nf) < tol and lg < tol and np.linalg.norm(grad) > GRADIENT_FLOOR


def locate_zset(
    model: SystemModel,
    barrier: BarrierSpec,
    seeds: int | None = None,
    tolerance: float = 1e-10,
    jobs: int = 1,
) -> list[ZPoint]:
    """Multistart search for Z; an empty list means nothing was found at this density."""
    if seeds is None:
        seeds = default_seed_count(model.n)
    if seeds < 1:
        raise ValueError("seeds must be at least 1")
    if not 0 < tolerance <= 1e-4:
        raise ValueError("tolerance must lie in (0, 1e-4]")
    lie = lie_data(model, barrier)

    def res(x):
        return np.asarray(lie.residual_fn(x), dtype=float)

    def jac(x):
        return np.asarray(lie.residual_jac_fn(x), dtype=float)

    starts = boundary_seeds(barrier, seeds)

    def refine(x0):
        return levenberg_marquardt(res, jac, x0, tolerance)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(refine, starts))
    else:
        results = [refine(x0) for x0 in starts]
    converged = [x for x, cost in results if cost < tolerance]
    points = []
    for group in cluster_points(converged, 10 * tolerance):
        members = [converged[i] for i in group]
        best = min(members, key=lambda x: float(np.linalg.norm(res(x))))
        if not is_zpoint(model, barrier, best):
            continue
        points.append(ZPoint(best, zpoint_residuals(model, barrier, best), len(members)))
    points.sort(key=lambda z: tuple(z.x))
    return points


def hausdorff(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    if not a and not b:
        return 0.0
    if not a or not b:
        return math.inf
    A = np.asarray(a, dtype=float)
    B = np.asarray(b, dtype=float)
    D = np.linalg.norm(A[:, None, :] - B[None, :, :], axis=2)
    return float(max(D.min(axis=1).max(), D.min(axis=0).max()))


def verify_z_independence(
    model: SystemModel,
    barrier1: BarrierSpec,
    barrier2: BarrierSpec,
    seeds: int | None = None,
    tolerance: float = 1e-10,
    samples: int = 10_000,
    rng: np.random.Generator | None = None,
) -> IndependenceReport:
    """Check that two barrier specs sharing a safe set yield the same Z."""
    rng = np.random.default_rng(42) if rng is None else rng
    lo, hi = barrier1.domain_box[:, 0], barrier1.domain_box[:, 1]
    P = rng.uniform(lo, hi, size=(samples, model.n)).T
    h1 = barrier1.value(P)
    h2 = barrier2.value(P)
    bad = np.nonzero((h1 * h2 < 0) & (np.abs(h1) > 1e-6))[0]
    if bad.size:
        k = int(bad[0])
        raise SignDisagreement(P[:, k], float(h1[k]), float(h2[k]))
    z1 = locate_zset(model, barrier1, seeds, tolerance)
    z2 = locate_zset(model, barrier2, seeds, tolerance)
    d = hausdorff([z.x for z in z1], [z.x for z in z2])
    return IndependenceReport(z1, z2, d, d < 1e-5)


# -- weakness probe -------------------------------------------------------


def _project_to_boundary(barrier: BarrierSpec, x: np.ndarray, iters: int = 50) -> np.ndarray:
    x = np.array(x, dtype=float)
    for _ in range(iters):
        h = barrier.value(x)
        g = np.asarray(barrier.gradient(x), dtype=float)
        gg = float(g @ g)
        if gg == 0 or abs(h) < 1e-15:
            break
        x = x - h * g / gg
    return x


def probe_weakness(
    model: SystemModel,
    barrier: BarrierSpec,
    collar_scales: Sequence[float] = (1e-2, 1e-3, 1e-4),
    samples_per_scale: int = 32,
    rng: np.random.Generator | None = None,
) -> StrengthReport:
    """Look for exterior states near the boundary where no input satisfies the CBF inequality.

    Each sample starts at a random boundary point pushed out to a random level
    -c with 0 < c < scale, then moves along that level set to minimize |Lgh|.
    Witnesses are collapsed back onto the boundary; EvidenceWeak is reported when
    some boundary locus collects witnesses from every scale.
    """
    scales = [float(s) for s in collar_scales]
    if not scales or any(s <= 0 for s in scales) or any(b >= a for a, b in zip(scales, scales[1:])):
        raise ValueError("collar_scales must be positive and strictly decreasing")
    rng = np.random.default_rng(42) if rng is None else rng
    lie = lie_data(model, barrier)
    n = model.n
    lines = max(2, math.ceil((samples_per_scale / (2 * n)) ** (1 / max(n - 1, 1))))

    witnesses, witness_scale, footprints = [], [], []
    for si, scale in enumerate(scales):
        pts = boundary_points(barrier, lines, offsets=rng.uniform(0, 1, size=max(n - 1, 1)))
        if len(pts) == 0:
            continue
        pick = rng.choice(len(pts), size=min(samples_per_scale, len(pts)), replace=False)
        for x_b in pts[np.sort(pick)]:
            c = scale * rng.uniform(0.1, 0.9)
            g = np.asarray(barrier.gradient(x_b), dtype=float)
            gg = float(g @ g)
            if gg == 0:
                continue
            x0 = x_b - c * g / gg

            def res(x, c=c):
                return np.concatenate(([barrier.value(x) + c], np.asarray(lie.Lgh_fn(x), dtype=float)))

            def jac(x):
                return np.vstack(
                    [np.asarray(barrier.gradient(x), dtype=float), np.asarray(lie.grad_Lgh_fn(x), dtype=float)]
                )

            x, _ = levenberg_marquardt(res, jac, x0, tol=1e-15, max_iter=300)
            h, N, lgh = field_values(model, barrier, x)
            h, N = float(h), float(N)
            lgh_norm = float(np.linalg.norm(np.asarray(lgh, dtype=float)))
            if -scale < h < 0 and lgh_norm <= WITNESS_LGH_TOL and N < -WITNESS_N_TOL:
                witnesses.append(x)
                witness_scale.append(si)
                footprints.append(_project_to_boundary(barrier, x))

    radius = 10 * scales[-1]
    loci = []
    for group in cluster_points(footprints, radius):
        if {witness_scale[i] for i in group} == set(range(len(scales))):
            loci.append(np.mean([footprints[i] for i in group], axis=0))
    kind = Strength.EVIDENCE_WEAK if loci else Strength.NO_WEAK_EVIDENCE
    return StrengthReport(
        kind, witnesses, scales, [scales[i] for i in witness_scale], loci
    )

