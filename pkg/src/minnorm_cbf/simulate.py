"""Closed-loop simulation of xdot = f(x) + G(x) u*(x) with safety monitoring."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import (
    BOUNDARY_TOL,
    ZERO_TOL,
    BarrierSpec,
    CBFViolation,
    SystemModel,
    _open_text,
    field_values,
)

NEAR_Z_LGH = 1e-4
SAFETY_TOL = 1e-6


class InitialStateUnsafe(ValueError):
    pass


class EventKind(str, enum.Enum):
    NEAR_Z = "NearZ"
    CONTROL_SATURATED = "ControlSaturated"
    LEFT_DOMAIN_BOX = "LeftDomainBox"
    SAFETY_VIOLATED = "SafetyViolated"


# bit values used in the trajectory CSV event_flags column
EVENT_BITS = {
    EventKind.NEAR_Z: 1,
    EventKind.CONTROL_SATURATED: 2,
    EventKind.LEFT_DOMAIN_BOX: 4,
    EventKind.SAFETY_VIOLATED: 8,
}


@dataclass
class Event:
    time: float
    kind: EventKind
    data: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"time": self.time, "kind": self.kind.value, "data": self.data}


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (K, n)
    inputs: np.ndarray  # (K, m), applied (possibly capped)
    u_star_norms: np.ndarray  # uncapped
    h_values: np.ndarray
    N_values: np.ndarray
    lgh_norms: np.ndarray
    flags: np.ndarray  # bitmask per sample
    events: list[Event]
    step_tolerance: float

    def discrete_cbf_residuals(self, alpha) -> np.ndarray:
        """h(t_{k+1}) - h(t_k) + alpha(h(t_k)) dt; must stay >= -10 * step tolerance."""
        h = self.h_values
        dt = np.diff(self.times)
        return h[1:] - h[:-1] + alpha(h[:-1]) * dt

    def discrete_cbf_holds(self, alpha) -> bool:
        return bool(np.all(self.discrete_cbf_residuals(alpha) >= -10 * self.step_tolerance))

    def events_of(self, kind: EventKind) -> list[Event]:
        return [e for e in self.events if e.kind == kind]


@dataclass
class HazardWindow:
    z: np.ndarray
    t_start: float
    t_end: float
    min_distance: float
    max_u_star: float
    saturated_steps: int

    def to_dict(self) -> dict:
        return {
            "z": self.z.tolist(),
            "t_start": self.t_start,
            "t_end": self.t_end,
            "min_distance": self.min_distance,
            "max_u_star": self.max_u_star,
            "saturated_steps": self.saturated_steps,
        }


def _closed_loop_input(model, barrier, X, u_cap):
    """u*(X) for a batch X of shape (n, B); returns (u_applied, |u*|, h, N, |Lgh|)."""
    h, N, lgh = field_values(model, barrier, X)
    lgh = np.asarray(lgh, dtype=float).reshape(model.m, -1)
    h = np.asarray(h, dtype=float).reshape(-1)
    N = np.asarray(N, dtype=float).reshape(-1)
    sq = np.einsum("ib,ib->b", lgh, lgh)
    lgh_norm = np.sqrt(sq)
    neg = N < 0
    scale = np.zeros_like(N)
    if neg.any():
        bad = neg & (lgh_norm <= ZERO_TOL) & (h >= -BOUNDARY_TOL)
        if bad.any():
            k = int(np.argmax(bad))
            raise CBFViolation(X[:, k], float(N[k]), float(lgh_norm[k]))
        active = neg & (lgh_norm > ZERO_TOL)
        scale[active] = -N[active] / sq[active]
    u = scale * lgh
    un = np.abs(scale) * lgh_norm
    applied = u
    if u_cap is not None:
        over = un > u_cap
        if over.any():
            shrink = np.ones_like(un)
            shrink[over] = u_cap / un[over]
            applied = u * shrink
    return applied, un, h, N, lgh_norm


def _rhs(model, barrier, X, u_cap):
    u = _closed_loop_input(model, barrier, X, u_cap)[0]
    f = np.asarray(model.drift(X), dtype=float).reshape(model.n, -1)
    G = np.asarray(model.input_matrix(X), dtype=float).reshape(model.n, model.m, -1)
    return f + np.einsum("imb,mb->ib", G, u)


def _check_initial(barrier, X0):
    h0 = np.atleast_1d(barrier.value(X0))
    if np.any(h0 < 0):
        k = int(np.argmin(h0))
        raise InitialStateUnsafe(f"h(x0) = {h0[k]:.6g} < 0 at x0={X0[:, k].tolist()}")


def _events_from_flags(times, flags, u_star_norms, kind, bit) -> list[Event]:
    on = (flags & bit) != 0
    events = []
    k = 0
    K = len(on)
    while k < K:
        if on[k]:
            j = k
            while j + 1 < K and on[j + 1]:
                j += 1
            data = {"until": float(times[j]), "steps": int(j - k + 1)}
            if kind == EventKind.CONTROL_SATURATED:
                data["max_u_star"] = float(np.max(u_star_norms[k : j + 1]))
            events.append(Event(float(times[k]), kind, data))
            k = j + 1
        else:
            k += 1
    return events


def _finish(model, barrier, times, states, u_cap, step_tol) -> Trajectory:
    X = states.T
    u, un, h, N, ln = _closed_loop_input(model, barrier, X, u_cap)
    lo, hi = barrier.domain_box[:, 0], barrier.domain_box[:, 1]
    flags = np.zeros(len(times), dtype=np.int64)
    flags |= np.where((ln < NEAR_Z_LGH) & (N < 0), EVENT_BITS[EventKind.NEAR_Z], 0)
    if u_cap is not None:
        flags |= np.where(un > u_cap, EVENT_BITS[EventKind.CONTROL_SATURATED], 0)
    outside = np.any((states < lo) | (states > hi), axis=1)
    flags |= np.where(outside, EVENT_BITS[EventKind.LEFT_DOMAIN_BOX], 0)
    flags |= np.where(h < -SAFETY_TOL, EVENT_BITS[EventKind.SAFETY_VIOLATED], 0)
    events = []
    for kind, bit in EVENT_BITS.items():
        events += _events_from_flags(times, flags, un, kind, bit)
    events.sort(key=lambda e: (e.time, list(EVENT_BITS).index(e.kind)))
    return Trajectory(times, states, u.T.copy(), un, h, N, ln, flags, events, step_tol)


def simulate_batch(
    model: SystemModel,
    barrier: BarrierSpec,
    x0s: Sequence[Sequence[float]],
    t_final: float,
    dt: float = 1e-3,
    u_cap: float | None = None,
    step_tolerance: float | None = None,
) -> list[Trajectory]:
    """Fixed-step RK4 for several initial states at once (states advance in lockstep)."""
    X = np.asarray(x0s, dtype=float).T.copy()  # (n, B)
    if X.shape[0] != model.n:
        raise ValueError(f"initial states must have dimension {model.n}")
    if not t_final > 0 or not dt > 0:
        raise ValueError("t_final and dt must be positive")
    _check_initial(barrier, X)
    steps = int(round(t_final / dt))
    times = dt * np.arange(steps + 1)
    hist = np.empty((steps + 1,) + X.shape)
    hist[0] = X
    for k in range(steps):
        k1 = _rhs(model, barrier, X, u_cap)
        k2 = _rhs(model, barrier, X + 0.5 * dt * k1, u_cap)
        k3 = _rhs(model, barrier, X + 0.5 * dt * k2, u_cap)
        k4 = _rhs(model, barrier, X + dt * k3, u_cap)
        X = X + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        hist[k + 1] = X
    tol = dt**2 if step_tolerance is None else step_tolerance
    return [
        _finish(model, barrier, times, hist[:, :, b].copy(), u_cap, tol) for b in range(X.shape[1])
    ]


def simulate(
    model: SystemModel,
    barrier: BarrierSpec,
    x0,
    t_final: float,
    dt: float = 1e-3,
    adaptive: bool = False,
    rtol: float = 1e-8,
    atol: float = 1e-10,
    u_cap: float | None = None,
) -> Trajectory:
    """Integrate the closed loop from ``x0``.

    Fixed-step RK4 is the default; its step tolerance is dt**2. With
    ``adaptive`` an embedded Runge-Kutta 4(5) pair is used and the step
    tolerance is ``atol``. Events are evaluated at accepted steps only.
    """
    if not adaptive:
        return simulate_batch(model, barrier, [x0], t_final, dt=dt, u_cap=u_cap)[0]
    from scipy.integrate import solve_ivp

    x0 = np.asarray(x0, dtype=float)
    _check_initial(barrier, x0[:, None])
    if not t_final > 0:
        raise ValueError("t_final must be positive")

    def fun(t, x):
        return _rhs(model, barrier, x[:, None], u_cap)[:, 0]

    sol = solve_ivp(fun, (0.0, t_final), x0, method="RK45", rtol=rtol, atol=atol, max_step=dt * 100)
    if not sol.success:
        raise RuntimeError(f"integration failed: {sol.message}")
    return _finish(model, barrier, sol.t, sol.y.T.copy(), u_cap, atol)


def hazard_scan(trajectory: Trajectory, zpoints, radius: float) -> list[HazardWindow]:
    """Time windows where the state passes within ``radius`` of a Z point."""
    windows = []
    if radius <= 0:
        return windows
    sat_bit = EVENT_BITS[EventKind.CONTROL_SATURATED]
    for zp in zpoints:
        z = np.asarray(getattr(zp, "x", zp), dtype=float)
        d = np.linalg.norm(trajectory.states - z, axis=1)
        inside = d < radius
        k, K = 0, len(d)
        while k < K:
            if not inside[k]:
                k += 1
                continue
            j = k
            while j + 1 < K and inside[j + 1]:
                j += 1
            seg = slice(k, j + 1)
            windows.append(
                HazardWindow(
                    z,
                    float(trajectory.times[k]),
                    float(trajectory.times[j]),
                    float(d[seg].min()),
                    float(np.max(trajectory.u_star_norms[seg])),
                    int(np.count_nonzero(trajectory.flags[seg] & sat_bit)),
                )
            )
            k = j + 1
    windows.sort(key=lambda w: w.t_start)
    return windows


def write_trajectory_csv(traj: Trajectory, path) -> None:
    n = traj.states.shape[1]
    m = traj.inputs.shape[1]
    legend = ", ".join(f"{bit}={kind.value}" for kind, bit in EVENT_BITS.items())
    header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)]
    header += ["h", "N", "lgh_norm", "event_flags"]
    fmt = "{:.17g}".format
    with _open_text(path) as fh:
        fh.write(f"# event_flags bitmask: {legend}\n")
        fh.write(",".join(header) + "\n")
        for k in range(len(traj.times)):
            row = [fmt(traj.times[k])] + [fmt(v) for v in traj.states[k]]
            row += [fmt(v) for v in traj.inputs[k]]
            row += [fmt(traj.h_values[k]), fmt(traj.N_values[k]), fmt(traj.lgh_norms[k])]
            row.append(str(int(traj.flags[k])))
            fh.write(",".join(row) + "\n")
