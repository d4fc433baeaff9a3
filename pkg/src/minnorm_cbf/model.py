"""System and barrier models, and the closed-form min-norm safe controller."""
from __future__ import annotations

import contextlib
import enum
import json
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import symbolic as sym
from .symbolic import Expr, VectorField

BOUNDARY_TOL = 1e-9
ZERO_TOL = 1e-12
FEASIBILITY_TOL = 1e-12
SCHEMA_VERSION = "1"


class ModelError(ValueError):
    """Invalid system specification document."""


class CBFViolation(ArithmeticError):
    """N(x) < 0 while the input has no authority over h at a state in C."""

    def __init__(self, x, N: float, lgh_norm: float):
        self.x = np.asarray(x, dtype=float)
        self.N = N
        self.lgh_norm = lgh_norm
        super().__init__(
            f"CBF condition fails at x={self.x.tolist()}: N={N:.6g}, |Lgh|={lgh_norm:.3g}"
        )


class Region(str, enum.Enum):
    DPLUS = "DPlus"
    DMINUS = "DMinus"
    EXTERIOR = "Exterior"


REGION_CODES = {0: Region.DPLUS, 1: Region.DMINUS, 2: Region.EXTERIOR}


@dataclass(frozen=True)
class AlphaSpec:
    family: str = "linear"
    k1: float = 1.0
    k3: float = 0.0

    def __post_init__(self):
        if self.family not in ("linear", "odd-cubic"):
            raise ModelError(f"unknown alpha family {self.family!r}")
        if not self.k1 > 0:
            raise ModelError("alpha gain k1 must be positive")
        if self.k3 < 0:
            raise ModelError("alpha cubic coefficient k3 must be nonnegative")
        if self.family == "linear" and self.k3 != 0:
            raise ModelError("linear alpha takes no cubic coefficient")

    def __call__(self, r):
        if self.family == "linear":
            return self.k1 * r
        return self.k1 * r + self.k3 * r**3

    def derivative(self, r):
        return self.k1 + 3.0 * self.k3 * r**2

    @property
    def derivative_at_zero(self) -> float:
        return self.k1

    def to_dict(self) -> dict:
        d = {"family": self.family, "k1": self.k1}
        if self.family == "odd-cubic":
            d["k3"] = self.k3
        return d


@dataclass(eq=False)
class SystemModel:
    """Control-affine dynamics xdot = f(x) + G(x) u with G given by columns."""

    n: int
    m: int
    f: VectorField
    G: tuple[VectorField, ...]

    def __post_init__(self):
        self.G = tuple(self.G)
        if self.f.n != self.n:
            raise ModelError(f"drift has dimension {self.f.n}, expected {self.n}")
        if len(self.G) != self.m:
            raise ModelError(f"G has {len(self.G)} columns, expected m={self.m}")
        for i, g in enumerate(self.G):
            if g.n != self.n:
                raise ModelError(f"column g{i + 1} has dimension {g.n}, expected {self.n}")
        self.J_f = sym.jacobian(self.f)
        self.J_G = [sym.jacobian(g) for g in self.G]

    @cached_property
    def _f_fn(self):
        return sym.compile_many(list(self.f.components), strict=False)

    @cached_property
    def _G_fn(self):
        # shape (n, m)
        return sym.compile_many(
            [[self.G[j][i] for j in range(self.m)] for i in range(self.n)], strict=False
        )

    @cached_property
    def _J_f_fn(self):
        return sym.compile_many(self.J_f, strict=False)

    @cached_property
    def _J_G_fn(self):
        return [sym.compile_many(J, strict=False) for J in self.J_G]

    def drift(self, x) -> np.ndarray:
        return self._f_fn(x)

    def input_matrix(self, x) -> np.ndarray:
        return self._G_fn(x)

    def rhs(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.drift(x) + self.input_matrix(x) @ np.asarray(u, dtype=float)


@dataclass(eq=False)
class BarrierSpec:
    h: Expr
    alpha: AlphaSpec
    domain_box: np.ndarray  # (n, 2)
    n: int = field(init=False)

    def __post_init__(self):
        self.domain_box = np.asarray(self.domain_box, dtype=float)
        if self.domain_box.ndim != 2 or self.domain_box.shape[1] != 2:
            raise ModelError("domain_box must be a list of [lo, hi] pairs")
        if np.any(self.domain_box[:, 0] >= self.domain_box[:, 1]):
            raise ModelError("domain_box intervals must have lo < hi")
        self.n = self.domain_box.shape[0]
        if sym.max_var_index(self.h) > self.n:
            raise ModelError("h references a variable beyond the domain dimension")
        self.grad_h = sym.gradient(self.h, self.n)
        self.hess_h = sym.hessian(self.h, self.n)

    @cached_property
    def _h_fn(self):
        return sym.compile_expr(self.h, strict=False)

    @cached_property
    def _grad_fn(self):
        return sym.compile_many(self.grad_h, strict=False)

    @cached_property
    def _hess_fn(self):
        return sym.compile_many(self.hess_h, strict=False)

    def value(self, x):
        v = self._h_fn(x)
        if np.ndim(x[0]):
            return np.broadcast_to(v, np.shape(x[0])).astype(float)
        return float(v)

    def gradient(self, x) -> np.ndarray:
        return self._grad_fn(x)

    def hessian(self, x) -> np.ndarray:
        return self._hess_fn(x)

    def with_h(self, h: Expr) -> "BarrierSpec":
        return BarrierSpec(h, self.alpha, self.domain_box.copy())

    def with_alpha(self, alpha: AlphaSpec) -> "BarrierSpec":
        return BarrierSpec(self.h, alpha, self.domain_box.copy())


class LieData:
    """Symbolic Lie derivatives of h shared by the analysis modules."""

    def __init__(self, model: SystemModel, barrier: BarrierSpec):
        n = model.n
        self.Lfh = sym.dot(barrier.grad_h, model.f.components)
        self.Lgh = [sym.dot(barrier.grad_h, g.components) for g in model.G]
        self.grad_Lfh = sym.gradient(self.Lfh, n)
        self.grad_Lgh = [sym.gradient(e, n) for e in self.Lgh]
        self.Lfh_fn = sym.compile_expr(self.Lfh, strict=False)
        self.Lgh_fn = sym.compile_many(self.Lgh, strict=False)
        self.grad_Lgh_fn = sym.compile_many(self.grad_Lgh, strict=False)
        # residual (h, Lfh, Lgh_1..m) and its Jacobian, used by the Z locator
        self.residual_fn = sym.compile_many([barrier.h, self.Lfh, *self.Lgh], strict=False)
        self.residual_jac_fn = sym.compile_many(
            [barrier.grad_h, self.grad_Lfh, *self.grad_Lgh], strict=False
        )


_LIE_CACHE: "weakref.WeakKeyDictionary[SystemModel, weakref.WeakKeyDictionary]" = (
    weakref.WeakKeyDictionary()
)


def lie_data(model: SystemModel, barrier: BarrierSpec) -> LieData:
    if model.n != barrier.n:
        raise ModelError(f"model dimension {model.n} != barrier dimension {barrier.n}")
    per_model = _LIE_CACHE.setdefault(model, weakref.WeakKeyDictionary())
    data = per_model.get(barrier)
    if data is None:
        data = per_model[barrier] = LieData(model, barrier)
    return data


# -- loading --------------------------------------------------------------

_REQUIRED = ("n", "m", "f", "G", "h", "alpha", "domain_box")


def load_model(document: Mapping[str, Any] | str | Path) -> tuple[SystemModel, BarrierSpec]:
    """Build (SystemModel, BarrierSpec) from a spec document, a JSON string or a path.

    All derivative expressions are computed here and kept on the returned objects.
    """
    if isinstance(document, Path) or (isinstance(document, str) and not document.lstrip().startswith("{")):
        document = json.loads(Path(document).read_text())
    elif isinstance(document, str):
        document = json.loads(document)
    doc = dict(document)
    missing = [k for k in _REQUIRED if k not in doc]
    if missing:
        raise ModelError(f"spec document is missing {', '.join(missing)}")
    n, m = doc["n"], doc["m"]
    if not (isinstance(n, int) and n >= 1 and isinstance(m, int) and m >= 1):
        raise ModelError("n and m must be positive integers")
    if not isinstance(doc["f"], list) or len(doc["f"]) != n:
        raise ModelError(f"f must list {n} expressions (got {len(doc['f'])})")
    if not isinstance(doc["G"], list) or len(doc["G"]) != m:
        raise ModelError(f"G must list {m} columns")
    for j, col in enumerate(doc["G"]):
        if not isinstance(col, list) or len(col) != n:
            raise ModelError(f"column {j + 1} of G must list {n} expressions")
    box = doc["domain_box"]
    if not isinstance(box, list) or len(box) != n or any(len(b) != 2 for b in box):
        raise ModelError(f"domain_box must list {n} [lo, hi] intervals")
    a = doc["alpha"]
    if not isinstance(a, Mapping) or "family" not in a or "k1" not in a:
        raise ModelError("alpha must give family and k1")
    alpha = AlphaSpec(a["family"], float(a["k1"]), float(a.get("k3", 0.0)))

    f = VectorField.parse(doc["f"], n)
    G = tuple(VectorField.parse(col, n) for col in doc["G"])
    h = sym.parse(doc["h"], n)
    model = SystemModel(n, m, f, G)
    barrier = BarrierSpec(h, alpha, box)
    _check_safe_set_nonempty(barrier)
    lie_data(model, barrier)
    return model, barrier


def _check_safe_set_nonempty(barrier: BarrierSpec) -> None:
    lo, hi = barrier.domain_box[:, 0], barrier.domain_box[:, 1]
    rng = np.random.default_rng(0)
    P = np.column_stack([(lo + hi) / 2, rng.uniform(lo, hi, size=(4096, barrier.n)).T])
    if not np.any(barrier.value(P) > 0):
        raise ModelError("h > 0 nowhere in domain_box; the safe set looks empty")


def dump_model(model: SystemModel, barrier: BarrierSpec) -> dict:
    return {
        "n": model.n,
        "m": model.m,
        "f": [sym.to_string(c) for c in model.f],
        "G": [[sym.to_string(c) for c in g] for g in model.G],
        "h": sym.to_string(barrier.h),
        "alpha": barrier.alpha.to_dict(),
        "domain_box": barrier.domain_box.tolist(),
    }


# -- controller -----------------------------------------------------------


@dataclass
class ControlEvaluation:
    x: np.ndarray
    h_val: float
    N: float
    lgh: np.ndarray
    lgh_norm: float
    region: Region
    u_star: np.ndarray


def field_values(model: SystemModel, barrier: BarrierSpec, X):
    """Vectorized (h, N, Lgh) at states ``X`` of shape (n, ...); Lgh has shape (m, ...)."""
    X = np.asarray(X, dtype=float)
    lie = lie_data(model, barrier)
    h = _as_batch(barrier._h_fn(X), X.shape[1:])
    with np.errstate(all="ignore"):
        N = _as_batch(lie.Lfh_fn(X), X.shape[1:]) + barrier.alpha(h)
    lgh = lie.Lgh_fn(X)
    return h, N, lgh


def _as_batch(v, shape):
    v = np.asarray(v, dtype=float)
    if v.shape != shape:
        v = np.broadcast_to(v, shape).copy()
    return v


def min_norm_input(N, lgh):
    """Closed-form minimizer of |u| subject to N + lgh.u >= 0 (lgh along axis 0)."""
    N = np.asarray(N, dtype=float)
    lgh = np.asarray(lgh, dtype=float)
    sq = np.sum(lgh**2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(N < 0, -N / sq, 0.0)
        u = scale * lgh
    return np.where(N < 0, u, 0.0)


def evaluate_controller(model: SystemModel, barrier: BarrierSpec, x) -> ControlEvaluation:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.n,):
        raise ValueError(f"state must have shape ({model.n},)")
    h, N, lgh = field_values(model, barrier, x)
    h, N = float(h), float(N)
    lgh = np.asarray(lgh, dtype=float).reshape(model.m)
    lgh_norm = float(np.linalg.norm(lgh))
    inside = h >= -BOUNDARY_TOL
    if N >= 0:
        u = np.zeros(model.m)
    elif lgh_norm > ZERO_TOL:
        u = -(N / lgh_norm**2) * lgh
    elif inside:
        raise CBFViolation(x, N, lgh_norm)
    else:
        u = np.full(model.m, np.nan)
    if not inside:
        region = Region.EXTERIOR
    else:
        region = Region.DPLUS if N >= 0 else Region.DMINUS
    return ControlEvaluation(x, h, N, lgh, lgh_norm, region, u)


def feasible_set_check(model: SystemModel, barrier: BarrierSpec, x, u) -> bool:
    """Whether ``u`` satisfies the CBF inequality at ``x``."""
    h, N, lgh = field_values(model, barrier, np.asarray(x, dtype=float))
    lgh = np.asarray(lgh, dtype=float).reshape(model.m)
    return bool(float(N) + float(lgh @ np.asarray(u, dtype=float).reshape(model.m)) >= -FEASIBILITY_TOL)


# -- grid sweep -----------------------------------------------------------


@dataclass
class SweepResult:
    axes: list[np.ndarray]  # one coordinate vector per state dimension
    X: np.ndarray  # (n, *grid)
    h: np.ndarray
    N: np.ndarray
    lgh_norm: np.ndarray
    region_code: np.ndarray  # 0 DPlus, 1 DMinus, 2 Exterior
    u: np.ndarray  # (m, *grid)
    violations: list[np.ndarray]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.h.shape

    @property
    def u_norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.u**2, axis=0))

    @property
    def inside(self) -> np.ndarray:
        return self.region_code != 2

    def at(self, index: tuple[int, ...]) -> ControlEvaluation:
        return ControlEvaluation(
            self.X[(slice(None),) + tuple(index)].copy(),
            float(self.h[index]),
            float(self.N[index]),
            np.full(self.u.shape[0], np.nan),
            float(self.lgh_norm[index]),
            REGION_CODES[int(self.region_code[index])],
            self.u[(slice(None),) + tuple(index)].copy(),
        )

    def rows(self):
        """Flattened row-major iteration: (x, h, N, lgh_norm, region, u, u_norm)."""
        n = self.X.shape[0]
        Xf = self.X.reshape(n, -1)
        uf = self.u.reshape(self.u.shape[0], -1)
        un = self.u_norm.ravel()
        for k, (h, N, ln, rc) in enumerate(
            zip(self.h.ravel(), self.N.ravel(), self.lgh_norm.ravel(), self.region_code.ravel())
        ):
            yield Xf[:, k], h, N, ln, REGION_CODES[int(rc)], uf[:, k], un[k]


def _evaluate_block(model, barrier, X):
    h, N, lgh = field_values(model, barrier, X)
    lgh_norm = np.sqrt(np.sum(lgh**2, axis=0))
    inside = h >= -BOUNDARY_TOL
    code = np.where(inside, np.where(N >= 0, 0, 1), 2)
    u = min_norm_input(N, lgh)
    undefined = (N < 0) & (lgh_norm <= ZERO_TOL)
    u = np.where(undefined, np.nan, u)
    violation = undefined & inside
    return h, N, lgh_norm, code, u, violation


def sweep_grid(
    model: SystemModel,
    barrier: BarrierSpec,
    resolution: int | Sequence[int],
    fixed: Mapping[int, float] | None = None,
    jobs: int = 1,
) -> SweepResult:
    """Evaluate the controller on a row-major grid over the domain box.

    ``fixed`` pins some coordinates (0-based index -> value) for slice sweeps;
    the remaining axes are swept at ``resolution`` points each.
    """
    n = model.n
    fixed = dict(fixed or {})
    res = [resolution] * n if np.isscalar(resolution) else list(resolution)
    if len(res) != n:
        raise ValueError("one resolution per axis is required")
    axes = []
    for i in range(n):
        lo, hi = barrier.domain_box[i]
        if i in fixed:
            axes.append(np.array([float(fixed[i])]))
        else:
            if res[i] < 2:
                raise ValueError("resolution must be at least 2 per swept axis")
            axes.append(np.linspace(lo, hi, int(res[i])))
    X = np.array(np.meshgrid(*axes, indexing="ij"))
    shape = X.shape[1:]
    # partition along the first axis; results merged by index
    chunks = np.array_split(np.arange(shape[0]), max(1, min(jobs, shape[0])))
    out_h = np.empty(shape)
    out_N = np.empty(shape)
    out_ln = np.empty(shape)
    out_code = np.empty(shape, dtype=np.int8)
    out_u = np.empty((model.m,) + shape)
    out_v = np.zeros(shape, dtype=bool)

    def work(idx):
        return idx, _evaluate_block(model, barrier, X[:, idx])

    lie_data(model, barrier)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(c) for c in chunks]
    for idx, (h, N, ln, code, u, viol) in results:
        out_h[idx], out_N[idx], out_ln[idx], out_code[idx] = h, N, ln, code
        out_u[:, idx] = u
        out_v[idx] = viol
    violations = [X[(slice(None),) + tuple(ix)] for ix in np.argwhere(out_v)]
    return SweepResult(axes, X, out_h, out_N, out_ln, out_code, out_u, violations)


@contextlib.contextmanager
def _open_text(target):
    if hasattr(target, "write"):
        yield target
    else:
        with open(target, "w") as fh:
            yield fh


def write_sweep_csv(result: SweepResult, path, m: int | None = None) -> None:
    n = result.X.shape[0]
    m = result.u.shape[0] if m is None else m
    header = [f"x{i + 1}" for i in range(n)] + ["h", "N", "lgh_norm", "region"]
    header += [f"u{j + 1}" for j in range(m)] + ["u_norm"]
    fmt = "{:.17g}".format
    with _open_text(path) as fh:
        fh.write(",".join(header) + "\n")
        for x, h, N, ln, region, u, un in result.rows():
            vals = [fmt(v) for v in x] + [fmt(h), fmt(N), fmt(ln), region.value]
            vals += [fmt(v) for v in u] + [fmt(un)]
            fh.write(",".join(vals) + "\n")


def sample_safe_set(barrier: BarrierSpec, count: int, rng: np.random.Generator, batch: int = 4096):
    """Rejection-sample ``count`` states with h >= 0 from the domain box."""
    lo, hi = barrier.domain_box[:, 0], barrier.domain_box[:, 1]
    out = []
    total = 0
    for _ in range(10_000):
        P = rng.uniform(lo, hi, size=(batch, barrier.n)).T
        keep = P[:, barrier.value(P) >= 0]
        out.append(keep)
        total += keep.shape[1]
        if total >= count:
            break
    else:
        raise ValueError("could not sample the safe set; is C empty within domain_box?")
    return np.concatenate(out, axis=1)[:, :count]
