import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from emohead4d.core import (SH_C0, Camera, DegenerateCovarianceError, GaussianCloud, InvalidInputError,
                            build_covariance, eval_sh, gaussian_density, look_at_camera, quat_multiply,
                            quat_multiply_backward, quat_normalize, quat_to_rotmat, quat_to_rotmat_backward,
                            rotmat_to_quat, sh_basis, sh_basis_jacobian, sh_from_rgb)

finite = st.floats(-1.0, 1.0, allow_nan=False)
quats = arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 0.1)
log_scales = arrays(np.float64, 3, elements=st.floats(-4.0, 1.0))


def test_identity_quaternion():
    assert np.array_equal(quat_to_rotmat([1.0, 0, 0, 0]), np.eye(3))


def test_quarter_turn_about_z():
    h = np.sqrt(0.5)
    expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.allclose(quat_to_rotmat([h, 0, 0, h]), expected, atol=1e-15)


def test_zero_quaternion_rejected():
    with pytest.raises(InvalidInputError):
        quat_to_rotmat([0.0, 0, 0, 0])


@given(quats)
def test_rotation_orthonormal(q):
    R = quat_to_rotmat(q)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1.0) < 1e-9


@given(quats)
def test_double_cover(q):
    assert np.allclose(quat_to_rotmat(q), quat_to_rotmat(-q), atol=1e-12)


@given(quats)
def test_rotmat_to_quat_roundtrip(q):
    q = quat_normalize(q)
    back = rotmat_to_quat(quat_to_rotmat(q))
    assert np.allclose(quat_to_rotmat(back), quat_to_rotmat(q), atol=1e-12)
    assert back[0] >= 0


def test_covariance_examples():
    assert np.allclose(build_covariance(np.log([1.0, 2.0, 3.0]), [1.0, 0, 0, 0]), np.diag([1.0, 4.0, 9.0]))
    h = np.sqrt(0.5)
    assert np.allclose(build_covariance(np.log([1.0, 2.0, 1.0]), [h, 0, 0, h]), np.diag([4.0, 1.0, 1.0]),
                       atol=1e-12)


@given(log_scales, quats)
def test_covariance_symmetric_psd_and_eigenvalues(ls, q):
    cov = build_covariance(ls, q)
    assert np.abs(cov - cov.T).max() <= 1e-9
    eig = np.sort(np.linalg.eigvalsh(cov))
    assert eig.min() >= -1e-9
    assert np.allclose(eig, np.sort(np.exp(2 * ls)), rtol=1e-8, atol=1e-12)


def test_covariance_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        build_covariance([np.nan, 0, 0], [1.0, 0, 0, 0])
    with pytest.raises(InvalidInputError):
        build_covariance([0, 0, 0], [np.inf, 0, 0, 0])


def test_density_examples():
    mu = np.array([0.3, -0.2, 1.0])
    assert gaussian_density(mu, mu, np.eye(3)) == 1.0
    assert np.isclose(gaussian_density(mu + [0, 1.0, 0], mu, np.eye(3)), 0.6065306597126334, rtol=1e-12)
    assert np.isclose(gaussian_density([2.0, 0, 0], [0, 0, 0], 4 * np.eye(3)), np.exp(-0.5), rtol=1e-12)


def test_density_singular():
    with pytest.raises(DegenerateCovarianceError):
        gaussian_density([0, 0, 0], [0, 0, 0], np.diag([1.0, 1.0, 0.0]))


@given(log_scales, quats, arrays(np.float64, 3, elements=finite).filter(lambda d: np.linalg.norm(d) > 1e-3))
def test_density_decreases_along_rays(ls, q, direction):
    cov = build_covariance(ls, q)
    mu = np.zeros(3)
    vals = [gaussian_density(t * direction, mu, cov) for t in np.linspace(0.0, 0.5, 6)]
    assert vals[0] == 1.0
    # strict in exact arithmetic; allow flat tails that underflow to zero
    assert all(b < a or (a == 0.0 and b == 0.0) for a, b in zip(vals[:-1], vals[1:]))


def test_sh_zero_and_dc():
    d = np.array([0.3, -0.4, 0.866])
    _, raw = eval_sh(np.zeros(48), d)
    assert np.array_equal(raw, np.zeros(3))
    H = np.zeros(48)
    H[[0, 16, 32]] = [0.5, -1.0, 2.0]
    _, raw = eval_sh(H, d)
    assert np.allclose(raw, np.array([0.5, -1.0, 2.0]) * 0.28209479, rtol=1e-7)
    assert np.isclose(SH_C0, 0.28209479, atol=1e-8)


def test_sh_dc_view_independent(rng):
    H = np.zeros(48)
    H[[0, 16, 32]] = rng.normal(size=3)
    dirs = rng.normal(size=(100, 3))
    _, raw = eval_sh(np.broadcast_to(H, (100, 48)), dirs)
    assert np.all(raw == raw[0])


def test_sh_degree_one_is_odd(rng):
    H = np.zeros(48)
    for c in range(3):
        H[c * 16 + 1:c * 16 + 4] = rng.normal(size=3)
    d = rng.normal(size=3)
    _, a = eval_sh(H, d)
    _, b = eval_sh(H, -d)
    assert np.allclose(a, -b, atol=1e-15)


def test_sh_display_offset_and_clamp():
    rgb = np.array([[0.2, 0.5, 0.9]])
    disp, raw = eval_sh(sh_from_rgb(rgb)[0], [0, 0, 1.0])
    assert np.allclose(disp, rgb[0])
    disp, _ = eval_sh(sh_from_rgb([[5.0, -5.0, 0.5]])[0], [0, 0, 1.0])
    assert np.allclose(disp, [1.0, 0.0, 0.5])


@pytest.mark.parametrize("seed", range(20))
def test_sh_basis_jacobian_fd(seed):
    r = np.random.default_rng(seed)
    d = r.normal(size=3)
    J = sh_basis_jacobian(d)
    eps = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = eps
        fd = (sh_basis(d + e) - sh_basis(d - e)) / (2 * eps)
        assert np.allclose(J[:, k], fd, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("seed", range(20))
def test_quat_backward_fd(seed):
    r = np.random.default_rng(seed)
    q = r.normal(size=4)
    G = r.normal(size=(3, 3))
    g = quat_to_rotmat_backward(q, G)
    eps = 1e-6
    for k in range(4):
        e = np.zeros(4)
        e[k] = eps
        fd = (np.sum(G * quat_to_rotmat(q + e)) - np.sum(G * quat_to_rotmat(q - e))) / (2 * eps)
        assert np.isclose(g[k], fd, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("seed", range(20))
def test_quat_multiply_backward_fd(seed):
    r = np.random.default_rng(seed)
    a, b, G = r.normal(size=4), r.normal(size=4), r.normal(size=4)
    ga, gb = quat_multiply_backward(a, b, G)
    eps = 1e-6
    for k in range(4):
        e = np.zeros(4)
        e[k] = eps
        fa = (G @ quat_multiply(a + e, b) - G @ quat_multiply(a - e, b)) / (2 * eps)
        fb = (G @ quat_multiply(a, b + e) - G @ quat_multiply(a, b - e)) / (2 * eps)
        assert np.isclose(ga[k], fa, rtol=1e-7, atol=1e-9)
        assert np.isclose(gb[k], fb, rtol=1e-7, atol=1e-9)


def test_quat_multiply_matches_rotation_composition(rng):
    a, b = quat_normalize(rng.normal(size=4)), quat_normalize(rng.normal(size=4))
    assert np.allclose(quat_to_rotmat(quat_multiply(a, b)), quat_to_rotmat(a) @ quat_to_rotmat(b), atol=1e-12)


def test_camera_rejects_non_orthonormal():
    with pytest.raises(InvalidInputError):
        Camera(100, 100, 16, 16, np.diag([1.0, 1.0, -1.0]), np.zeros(3), 32, 32)
    with pytest.raises(InvalidInputError):
        Camera(100, 100, 16, 16, 1.01 * np.eye(3), np.zeros(3), 32, 32)


def test_look_at_projects_target_to_principal_point():
    cam = look_at_camera([0.3, 0.1, 0.5], [0.0, -0.02, 0.0], 64, 48, 90.0)
    uv, z = cam.project(np.array([[0.0, -0.02, 0.0]]))
    assert np.allclose(uv[0], [32.0, 24.0], atol=1e-9) and z[0] > 0
    assert np.allclose(cam.center, [0.3, 0.1, 0.5])
    back = Camera.from_dict(cam.to_dict())
    assert back.to_dict() == cam.to_dict()


def test_cloud_concat_and_copy(rng):
    n = 4
    c = GaussianCloud(rng.normal(size=(n, 3)), np.zeros((n, 3)), np.tile([1.0, 0, 0, 0], (n, 1)), np.zeros(n),
                      np.zeros((n, 48)))
    d = c.copy()
    d.positions[0] = 99.0
    assert c.positions[0, 0] != 99.0
    both = GaussianCloud.concat([c, d])
    assert len(both) == 2 * n and both.opacity_weight is None
    assert np.allclose(both.opacities, 0.5)
