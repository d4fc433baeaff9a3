import numpy as np
import pytest
from scipy.optimize import linprog

from conftest import central_diff
from minnorm_cbf.boundedness import (
    AllUndefined,
    CrossCheckFailure,
    Inevitability,
    NotAZPoint,
    TestMatrix,
    Verdict,
    admissible_directions,
    assemble_test_matrix,
    decide_boundedness,
    inevitability_check,
    matrix_rank,
    null_space,
    ray_probe,
    reference_directions,
)
from minnorm_cbf.model import Region, lie_data, load_model
from minnorm_cbf.zset import locate_zset


def matrix(row_h, row_bf, rows_bG):
    return TestMatrix(
        np.zeros(len(row_h)),
        np.asarray(row_h, dtype=float),
        np.asarray(row_bf, dtype=float),
        np.atleast_2d(np.asarray(rows_bG, dtype=float)),
        1.0,
    )


def check_certificate(T, v):
    assert abs(np.linalg.norm(v) - 1) < 1e-12
    assert np.linalg.norm(T.rows_bG @ v) < 1e-9
    assert T.row_h @ v >= -1e-12
    assert T.row_bf @ v < -1e-9


# -- matrix assembly ------------------------------------------------------


def test_example1_matrix(ex1):
    T = assemble_test_matrix(*ex1, [1.0, 0.0])
    np.testing.assert_allclose(T.A, -2 * np.array([[1, 0], [1, 1], [0, 1]]), atol=1e-9)
    assert T.alpha_prime0 == 1.0


def test_example2_matrix(ex2):
    T = assemble_test_matrix(*ex2, [1.0, 0.0])
    np.testing.assert_allclose(T.A, -2 * np.array([[1, 0], [1, 1], [0, 0]]), atol=1e-9)


def test_example1_matrix_at_left_point(ex1):
    T = assemble_test_matrix(*ex1, [-1.0, 0.0])
    np.testing.assert_allclose(T.A, -2 * np.array([[-1, 0], [-1, -1], [0, 1]]), atol=1e-9)


def test_alpha_prime_enters_beta_f(ex1):
    model, barrier = ex1
    from minnorm_cbf.model import AlphaSpec

    T = assemble_test_matrix(model, barrier.with_alpha(AlphaSpec("odd-cubic", 3.0, 5.0)), [1.0, 0.0])
    np.testing.assert_allclose(T.row_bf, [-6.0, -2.0], atol=1e-9)


def test_not_a_zpoint(ex1):
    with pytest.raises(NotAZPoint):
        assemble_test_matrix(*ex1, [0.6, 0.8])


def test_cross_check_catches_wrong_hessian(ex1):
    model, barrier = ex1
    barrier.__dict__["_hess_fn"] = lambda x: np.zeros((2, 2))
    with pytest.raises(CrossCheckFailure):
        assemble_test_matrix(model, barrier, [1.0, 0.0])


def _random_poly(rng, degree=2):
    terms = []
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            c = rng.normal()
            terms.append(f"({c:.9f}) * x1^{i} * x2^{j}")
    return " + ".join(terms)


def random_polynomial_system(seed):
    """Polynomial data with Lfh and Lgh both divisible by x2, so (±1, 0) lie in Z."""
    rng = np.random.default_rng(seed)
    q1, q2, s, r = (_random_poly(rng) for _ in range(4))
    doc = {
        "n": 2,
        "m": 1,
        "f": [f"x2 * ({q1})", f"x2 * ({q2})"],
        "G": [[f"x2 * ({s})", r]],
        "h": "1 - x1^2 - x2^2",
        "alpha": {"family": "odd-cubic", "k1": float(rng.uniform(0.1, 3)), "k3": float(rng.uniform(0, 2))},
        "domain_box": [[-1.5, 1.5], [-1.5, 1.5]],
    }
    return load_model(doc)


@pytest.mark.parametrize("seed", range(50))
def test_assembly_matches_finite_differences(seed):
    model, barrier = random_polynomial_system(seed)
    lie = lie_data(model, barrier)
    for x_bar in ([1.0, 0.0], [-1.0, 0.0]):
        T = assemble_test_matrix(model, barrier, x_bar, cross_check=False)

        def N(p):
            return float(lie.Lfh_fn(p)) + float(barrier.alpha(barrier.value(p)))

        fd_f = central_diff(N, x_bar)
        fd_g = central_diff(lambda p: float(np.asarray(lie.Lgh_fn(p))[0]), x_bar)
        scale_f = max(1.0, np.linalg.norm(T.row_bf))
        scale_g = max(1.0, np.linalg.norm(T.rows_bG[0]))
        assert np.linalg.norm(T.row_bf - fd_f) / scale_f < 1e-5
        assert np.linalg.norm(T.rows_bG[0] - fd_g) / scale_g < 1e-5
        # the built-in cross-check must agree
        assemble_test_matrix(model, barrier, x_bar)


# -- decision -------------------------------------------------------------


def test_example1_bounded(ex1):
    for x_bar in ([1.0, 0.0], [-1.0, 0.0]):
        T = assemble_test_matrix(*ex1, x_bar)
        verdict = decide_boundedness(T)
        assert verdict.kind is Verdict.BOUNDED
        assert verdict.kernel_dim == 1
        assert verdict.certificate is None
        assert verdict.a[0] * verdict.b[0] == pytest.approx(4.0)


def test_example2_unbounded(ex2):
    for x_bar in ([1.0, 0.0], [-1.0, 0.0]):
        T = assemble_test_matrix(*ex2, x_bar)
        verdict = decide_boundedness(T)
        assert verdict.kind is Verdict.UNBOUNDED
        assert verdict.kernel_dim == 2
        v = verdict.certificate
        assert abs(v @ [1.0, 0.0]) < 1e-9
        check_certificate(T, v)
    T = assemble_test_matrix(*ex2, [1.0, 0.0])
    np.testing.assert_allclose(decide_boundedness(T).certificate, [0.0, 1.0], atol=1e-12)


def test_indeterminate_when_beta_f_in_row_space():
    T = matrix([1, 0, 0], [0, 3, 0], [[0, 1, 0]])
    verdict = decide_boundedness(T)
    assert verdict.kernel_dim == 2
    np.testing.assert_allclose(verdict.b, 0, atol=1e-15)
    assert verdict.kind is Verdict.INDETERMINATE


def test_indeterminate_when_b_is_positive_multiple_of_a():
    # only w with a.w = 0 remain, and those give b.w = 0 too
    T = matrix([1, 0, 0], [2, 0, 0], [[0, 0, 1]])
    assert decide_boundedness(T).kind is Verdict.INDETERMINATE


def test_unbounded_when_b_is_negative_multiple_of_a():
    T = matrix([1, 0, 0], [-2, 0, 0], [[0, 0, 1]])
    verdict = decide_boundedness(T)
    assert verdict.kind is Verdict.UNBOUNDED
    check_certificate(T, verdict.certificate)


def test_empty_kernel_is_bounded():
    T = matrix([1, 0], [0, 1], [[1, 0], [0, 1]])
    verdict = decide_boundedness(T)
    assert verdict.kind is Verdict.BOUNDED and verdict.kernel_dim == 0
    assert inevitability_check(T) is Inevitability.NOT_DETERMINED


@pytest.mark.parametrize(
    "row_h, row_bf, kind",
    [
        ([1, 0], [1, 0], Verdict.BOUNDED),  # a b > 0
        ([1, 0], [-1, 0], Verdict.UNBOUNDED),  # a b < 0
        ([0, 0], [1, 0], Verdict.UNBOUNDED),  # a = 0, pick w = -1
        ([1, 0], [0, 0], Verdict.INDETERMINATE),  # b = 0
        ([1, 0], [-1e-12, 0], Verdict.INDETERMINATE),  # inside the strictness margin
    ],
)
def test_one_dimensional_kernel_cases(row_h, row_bf, kind):
    T = matrix(row_h, row_bf, [[0, 1]])
    verdict = decide_boundedness(T)
    assert verdict.kernel_dim == 1
    assert verdict.kind is kind
    if kind is Verdict.UNBOUNDED:
        check_certificate(T, verdict.certificate)


def _lp_feasible(A_eq, A_ub, b_ub, n, fix=None):
    bounds = [(-1, 1)] * n
    if fix is not None:
        i, s = fix
        bounds[i] = (s, s)
    res = linprog(
        np.zeros(n),
        A_ub=A_ub,
        b_ub=b_ub,
        A_eq=A_eq,
        b_eq=np.zeros(A_eq.shape[0]),
        bounds=bounds,
        method="highs",
    )
    return res.status == 0


def lp_oracle(T):
    """Classify with linear programs, independently of the kernel projection."""
    n = T.row_h.size
    # condition (i): row_h.v >= 0, row_bf.v <= -margin, with |v|_inf <= 1
    A_ub = np.vstack([-T.row_h, T.row_bf])
    if _lp_feasible(T.rows_bG, A_ub, np.array([0.0, -1e-6]), n):
        return Verdict.UNBOUNDED
    # condition (ii): cone is trivial iff no point with some |v_i| = 1
    cone = np.vstack([-T.row_h, T.row_bf])
    for i in range(n):
        for s in (1.0, -1.0):
            if _lp_feasible(T.rows_bG, cone, np.zeros(2), n, fix=(i, s)):
                return Verdict.INDETERMINATE
    return Verdict.BOUNDED


def _random_matrix(rng):
    n = int(rng.integers(2, 5))
    m = int(rng.integers(1, n + 1))
    row_h = rng.normal(size=n)
    row_bf = rng.normal(size=n)
    rows_bG = rng.normal(size=(m, n))
    kind = rng.integers(0, 4)
    if kind == 1 and m > 1:
        rows_bG[-1] = rows_bG[0] * rng.normal()  # rank deficient
    elif kind == 2:
        row_bf = abs(rng.normal()) * row_h + rows_bG.T @ rng.normal(size=m)
    elif kind == 3:
        row_bf = rows_bG.T @ rng.normal(size=m)
    return matrix(row_h, row_bf, rows_bG)


@pytest.mark.parametrize("seed", range(200))
def test_decision_agrees_with_lp_oracle(seed):
    T = _random_matrix(np.random.default_rng(seed))
    verdict = decide_boundedness(T)
    assert verdict.kind is lp_oracle(T)
    if verdict.kind is Verdict.UNBOUNDED:
        check_certificate(T, verdict.certificate)


@pytest.mark.parametrize("seed", range(50))
def test_verdict_invariant_under_positive_scaling(seed):
    rng = np.random.default_rng(1000 + seed)
    T = _random_matrix(rng)
    c = rng.uniform(0.1, 10, size=3)
    assert decide_boundedness(T.scaled(*c)).kind is decide_boundedness(T).kind


def test_verdict_invariant_under_scaling_h(ex1, ex2):
    from minnorm_cbf import symbolic as sym

    for model, barrier in (ex1, ex2):
        scaled = barrier.with_h(sym.mul(sym.Const(3.0), barrier.h))
        for x_bar in ([1.0, 0.0], [-1.0, 0.0]):
            k1 = decide_boundedness(assemble_test_matrix(model, barrier, x_bar)).kind
            k2 = decide_boundedness(assemble_test_matrix(model, scaled, x_bar)).kind
            assert k1 is k2


# -- inevitability --------------------------------------------------------


def test_inevitability(ex1, ex2):
    T2 = assemble_test_matrix(*ex2, [1.0, 0.0])
    assert inevitability_check(T2) is Inevitability.INEVITABLY_UNBOUNDED
    T1 = assemble_test_matrix(*ex1, [1.0, 0.0])
    assert inevitability_check(T1) is Inevitability.NOT_DETERMINED


@pytest.mark.parametrize("seed", range(50))
def test_inevitable_implies_unbounded(seed):
    T = _random_matrix(np.random.default_rng(2000 + seed))
    K = null_space(T.rows_bG)
    expected = K.shape[1] >= 2 and matrix_rank(np.column_stack([K.T @ T.row_h, K.T @ T.row_bf])) == 2
    got = inevitability_check(T)
    assert (got is Inevitability.INEVITABLY_UNBOUNDED) == expected
    if expected:
        assert decide_boundedness(T).kind is Verdict.UNBOUNDED


def test_null_space_and_rank():
    M = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]])
    K = null_space(M)
    assert K.shape == (3, 2)
    np.testing.assert_allclose(M @ K, 0, atol=1e-12)
    np.testing.assert_allclose(K.T @ K, np.eye(2), atol=1e-12)
    assert matrix_rank(M) == 1
    assert null_space(np.zeros((1, 2))).shape == (2, 2)


# -- ray probe ------------------------------------------------------------


def test_example2_ray_diverges(ex2):
    rep = ray_probe(*ex2, [1.0, 0.0], [0.0, 1.0], t_max=0.01, samples=12)
    assert rep.fitted_exponent == pytest.approx(-2.0, abs=0.1)
    assert np.all(np.diff(rep.t_samples) < 0)
    assert rep.t_samples[0] == 0.01 and np.all(rep.t_samples > 0)
    finite = np.isfinite(rep.u_norms)
    t = rep.t_samples[finite]
    np.testing.assert_allclose(rep.u_norms[finite], (2 * t + t**2) / (2 * t**3), rtol=1e-9)


def test_example1_ray_bounded(ex1):
    rep = ray_probe(*ex1, [1.0, 0.0], [0.0, 1.0], t_max=0.01, samples=12)
    assert rep.fitted_exponent == pytest.approx(0.0, abs=0.05)
    assert 1.0 <= rep.limsup_estimate <= 1.01
    np.testing.assert_allclose(rep.u_norms, 1 + rep.t_samples / 2, rtol=1e-12)


def test_inward_normal_stays_in_dplus(ex1):
    rep = ray_probe(*ex1, [1.0, 0.0], [-1.0, 0.0])
    assert all(r is Region.DPLUS for r in rep.region_labels)
    assert np.all(rep.u_norms == 0)
    assert rep.fitted_exponent is None


def test_outward_normal_all_undefined(ex1):
    with pytest.raises(AllUndefined):
        ray_probe(*ex1, [1.0, 0.0], [1.0, 0.0])


@pytest.mark.parametrize("kwargs", [{"samples": 7}, {"t_max": 0.0}, {"ratio": 1.0}])
def test_ray_probe_rejects_bad_arguments(ex1, kwargs):
    with pytest.raises(ValueError):
        ray_probe(*ex1, [1.0, 0.0], [0.0, 1.0], **kwargs)


def test_ray_probe_requires_unit_direction(ex1):
    with pytest.raises(ValueError):
        ray_probe(*ex1, [1.0, 0.0], [0.0, 2.0])


def _assert_probe_diverges(model, barrier, x_bar, v):
    rep = ray_probe(model, barrier, x_bar, v)
    assert rep.fitted_exponent is not None and rep.fitted_exponent <= -0.5
    tail = rep.u_norms[np.isfinite(rep.u_norms)][-5:]
    assert len(tail) == 5 and np.all(np.diff(tail) > 0)


def test_unbounded_verdicts_agree_with_probe(ex2):
    for x_bar in ([1.0, 0.0], [-1.0, 0.0]):
        T = assemble_test_matrix(*ex2, x_bar)
        _assert_probe_diverges(*ex2, x_bar, decide_boundedness(T).certificate)


@pytest.mark.parametrize("seed", range(5))
def test_unbounded_verdicts_agree_with_probe_random_family(seed):
    rng = np.random.default_rng(300 + seed)
    c, d = rng.uniform(0, 2, size=2)
    doc = {
        "n": 2, "m": 1, "f": [f"x2 * (1 + {c:.6f} * x1^2)", "0"],
        "G": [["0", f"x2^2 * (1 + {d:.6f} * x1^2)"]],
        "h": "1 - x1^2 - x2^2", "alpha": {"family": "linear", "k1": float(rng.uniform(0.5, 2))},
        "domain_box": [[-1.2, 1.2], [-1.2, 1.2]],
    }
    model, barrier = load_model(doc)
    for z in locate_zset(model, barrier):
        verdict = decide_boundedness(assemble_test_matrix(model, barrier, z.x))
        assert verdict.kind is Verdict.UNBOUNDED
        _assert_probe_diverges(model, barrier, z.x, verdict.certificate)


def test_bounded_verdicts_agree_with_probe(ex1):
    for x_bar in ([1.0, 0.0], [-1.0, 0.0]):
        T = assemble_test_matrix(*ex1, x_bar)
        assert decide_boundedness(T).kind is Verdict.BOUNDED
        dirs = admissible_directions(T, 64)
        assert len(dirs) == 64
        for v in dirs:
            assert T.row_h @ v >= -1e-9
            try:
                rep = ray_probe(*ex1, x_bar, v)
            except AllUndefined:
                continue
            assert rep.limsup_estimate < 1e3
            if rep.fitted_exponent is not None:
                assert rep.fitted_exponent >= -0.1


def test_reference_directions(ex1):
    T = assemble_test_matrix(*ex1, [1.0, 0.0])
    dirs = reference_directions(T)
    assert len(dirs) == 8
    np.testing.assert_allclose([np.linalg.norm(d) for d in dirs], 1.0)
    np.testing.assert_allclose(dirs[0], [-1.0, 0.0], atol=1e-12)


def test_report_serialization(ex2):
    T = assemble_test_matrix(*ex2, [1.0, 0.0])
    d = decide_boundedness(T).to_dict()
    assert d["kind"] == "Unbounded" and d["caveat"] == "straight-line directions only"
    assert set(d["diagnostics"]) == {"a", "b"}
    p = ray_probe(*ex2, [1.0, 0.0], [0.0, 1.0]).to_dict()
    assert set(p) >= {"v", "t", "u_norm", "region", "exponent", "limsup_estimate"}
