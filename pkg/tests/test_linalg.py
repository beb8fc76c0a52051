import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import dense_lower, naive_matmul, random_rotation, random_tri
from gpe.errors import NearSingular, Singular
from gpe.linalg import (chol_to_precision, cholesky3, mat3_inverse, mat_to_tri, precision_to_covariance,
                        quadratic_form, sym_eig_max, tri_to_mat)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_chol_identity_and_diag():
    assert np.array_equal(chol_to_precision([1, 0, 1, 0, 0, 1]), np.eye(3))
    assert np.array_equal(chol_to_precision([2, 0, 1, 0, 0, 1]), np.diag([4.0, 1, 1]))


def test_chol_matches_dense_multiply(rng):
    for _ in range(50):
        l = random_tri(rng)
        lm = dense_lower(l)
        assert np.abs(chol_to_precision(l) - naive_matmul(lm, lm.T)).max() <= 1e-12


def test_pack_roundtrip(rng):
    l = random_tri(rng, 7)
    assert np.array_equal(mat_to_tri(tri_to_mat(l)), l)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 6, elements=finite))
def test_chol_psd_property(l):
    p = chol_to_precision(l)
    assert np.array_equal(p, p.T)
    scale = max(1.0, np.abs(p).max())
    assert np.linalg.eigvalsh(p).min() >= -1e-12 * scale


def test_covariance_closed_forms():
    assert np.allclose(precision_to_covariance([1, 0, 1, 0, 0, 1]), np.eye(3), atol=0)
    assert np.allclose(precision_to_covariance([2, 0, 1, 0, 0, 1]), np.diag([0.25, 1, 1]), atol=1e-15)


def test_covariance_roundtrip(rng):
    for _ in range(50):
        l = random_tri(rng)
        prod = precision_to_covariance(l) @ chol_to_precision(l)
        assert np.abs(prod - np.eye(3)).max() <= 1e-9


def test_covariance_roundtrip_ill_conditioned(rng):
    # condition number of L L^T up to ~1e6 means diagonal ratio ~1e3
    for _ in range(20):
        l = random_tri(rng)
        l[[0, 2, 5]] = rng.permutation([1e-1, 1.0, 1e2]) * np.sign(l[[0, 2, 5]])
        l[[1, 3, 4]] *= 0.01
        p = chol_to_precision(l)
        assert np.linalg.cond(p) <= 1.1e6
        assert np.abs(precision_to_covariance(l) @ p - np.eye(3)).max() <= 1e-9


def test_covariance_near_singular():
    with pytest.raises(NearSingular):
        precision_to_covariance([1, 0, 1e-7, 0, 0, 1])
    with pytest.raises(NearSingular):
        precision_to_covariance([[1, 0, 1, 0, 0, 1], [1, 0, 1, 0, 0, 0]])
    # negative diagonals are fine
    assert np.allclose(precision_to_covariance([-2, 0, 1, 0, 0, -1]), np.diag([0.25, 1, 1]))


def test_quadratic_form_examples():
    assert quadratic_form(np.eye(3), [1, 0, 0]) == 1.0
    assert quadratic_form(np.diag([4.0, 1, 1]), [1, 0, 0]) == 4.0


def test_quadratic_form_naive(rng):
    for _ in range(50):
        a = rng.normal(size=(3, 3))
        m = a @ a.T
        d = rng.normal(size=3)
        ref = sum(d[i] * m[i, j] * d[j] for i in range(3) for j in range(3))
        assert abs(quadratic_form(m, d) - ref) <= 1e-12 * max(1.0, abs(ref))
        assert quadratic_form(m, d) >= 0


def _charpoly_max_root(m):
    c1 = np.trace(m)
    c2 = m[0, 0] * m[1, 1] + m[0, 0] * m[2, 2] + m[1, 1] * m[2, 2] - m[0, 1] ** 2 - m[0, 2] ** 2 - m[1, 2] ** 2
    c3 = np.linalg.det(m)
    roots = np.roots([1.0, -c1, c2, -c3])
    top = roots.real.max()
    # polish with Newton on the cubic
    for _ in range(5):
        f = top ** 3 - c1 * top ** 2 + c2 * top - c3
        df = 3 * top ** 2 - 2 * c1 * top + c2
        if df == 0:
            break
        top -= f / df
    return top


def test_eig_max_examples():
    assert sym_eig_max(np.eye(3)) == 1.0
    assert abs(sym_eig_max(np.diag([0.25, 1, 9])) - 9.0) <= 1e-12


def test_eig_max_charpoly_oracle(rng):
    for _ in range(100):
        a = rng.normal(size=(3, 3))
        m = a @ a.T + 0.1 * np.eye(3)
        ref = _charpoly_max_root(m)
        assert abs(sym_eig_max(m) - ref) <= 1e-9 * abs(ref)


def test_eig_max_rayleigh(rng):
    for _ in range(50):
        a = rng.normal(size=(3, 3))
        m = a @ a.T
        lam = sym_eig_max(m)
        v = rng.normal(size=(20, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        assert np.all(lam >= np.einsum("ni,ij,nj->n", v, m, v) - 1e-12 * lam)


def test_eig_max_repeated():
    assert abs(sym_eig_max(np.diag([2.0, 2.0, 1.0])) - 2.0) <= 1e-12
    assert abs(sym_eig_max(np.diag([1.0, 3.0, 3.0])) - 3.0) <= 1e-12


def test_inverse_examples():
    assert np.array_equal(mat3_inverse(np.eye(3)), np.eye(3))
    assert np.array_equal(mat3_inverse(2 * np.eye(3)), 0.5 * np.eye(3))


def test_inverse_rotation(rng):
    for _ in range(50):
        r = random_rotation(rng)
        assert np.abs(mat3_inverse(r) - r.T).max() <= 1e-9


def test_inverse_general(rng):
    for _ in range(50):
        t = rng.normal(size=(3, 3)) + 2 * np.eye(3)
        assert np.abs(t @ mat3_inverse(t) - np.eye(3)).max() <= 1e-9


def test_inverse_singular():
    with pytest.raises(Singular):
        mat3_inverse(np.diag([1.0, 1.0, 0.0]))
    with pytest.raises(Singular):
        mat3_inverse(np.ones((3, 3)))


def test_cholesky3_roundtrip(rng):
    for _ in range(20):
        a = rng.normal(size=(3, 3))
        p = a @ a.T + 0.1 * np.eye(3)
        assert np.allclose(chol_to_precision(cholesky3(p)), p, atol=1e-12)


def test_eig_max_near_repeated(rng):
    for _ in range(500):
        r = random_rotation(rng)
        e = np.sort(rng.uniform(0.1, 10, 3))
        e[1] = e[2] * (1 - 10 ** rng.uniform(-16, -3))
        m = r @ np.diag(e) @ r.T
        m = 0.5 * (m + m.T)
        ref = np.linalg.eigvalsh(m)[-1]
        assert abs(sym_eig_max(m) - ref) <= 1e-9 * ref


def test_eig_max_batched(rng):
    a = rng.normal(size=(64, 3, 3))
    m = a @ a.transpose(0, 2, 1)
    assert np.allclose(sym_eig_max(m), [sym_eig_max(x) for x in m], rtol=0, atol=1e-12)
