import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgdun import degradation as deg
from mgdun.selftest import adjoint_gap


def blur_then_sample_loop(z, kernel, scale):
    """Per-output-pixel reference: reflect-padded 3x3 correlation sampled at the top-left of each cell."""
    h, w = z.shape
    out = np.zeros((h // scale, w // scale))

    def px(i, j):
        i = -i if i < 0 else (2 * (h - 1) - i if i >= h else i)
        j = -j if j < 0 else (2 * (w - 1) - j if j >= w else j)
        return z[i, j]

    for a in range(h // scale):
        for b in range(w // scale):
            i, j = a * scale, b * scale
            out[a, b] = sum(kernel[u + 1, v + 1] * px(i + u, j + v) for u in (-1, 0, 1) for v in (-1, 0, 1))
    return out


def test_gaussian_kernel_normalized_and_symmetric():
    k = deg.gaussian_kernel3(1.0)
    assert k.shape == (3, 3)
    assert abs(k.sum() - 1) < 1e-15
    assert np.allclose(k, k.T) and np.allclose(k, k[::-1, ::-1])
    with pytest.raises(ValueError):
        deg.gaussian_kernel3(0.0)


def test_dk_matches_loop():
    rng = np.random.default_rng(0)
    z = rng.uniform(0, 1, (12, 16))
    for scale in (2, 4):
        op = deg.DegradationOp(sigma=0.8, scale=scale)
        got = deg.apply_dk(z[None, None], op)[0, 0]
        np.testing.assert_allclose(got, blur_then_sample_loop(z, op.kernel, scale), rtol=1e-13, atol=1e-14)


def test_blur_preserves_constants():
    z = np.full((1, 1, 8, 8), 0.37)
    op = deg.DegradationOp(sigma=1.3)
    np.testing.assert_allclose(deg.blur(z, op), z, rtol=1e-14)


def test_dk_rejects_indivisible():
    with pytest.raises(ValueError):
        deg.apply_dk(np.zeros((1, 1, 10, 12)), deg.DegradationOp(scale=4))
    with pytest.raises(ValueError):
        deg.DegradationOp(scale=3)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(4, 16), w=st.integers(4, 16), scale=st.sampled_from([2, 4]),
       sigma=st.floats(0.2, 3.0), seed=st.integers(0, 10_000))
def test_dk_adjoint_property(h, w, scale, sigma, seed):
    rng = np.random.default_rng(seed)
    op = deg.DegradationOp(sigma=sigma, scale=scale)
    shape = (1, 1, h * scale, w * scale)
    gap = adjoint_gap(lambda z: deg.apply_dk(z, op), lambda x: deg.apply_dk_adjoint(x, op),
                      shape, (1, 1, h, w), rng)
    assert gap < 1e-12


@settings(max_examples=40, deadline=None)
@given(h=st.integers(2, 40), w=st.integers(2, 40), sigma=st.floats(0.2, 3.0), gain=st.floats(0.1, 2.0),
       sign=st.sampled_from([-1, 1]), seed=st.integers(0, 10_000))
def test_p_adjoint_property(h, w, sigma, gain, sign, seed):
    rng = np.random.default_rng(seed)
    op = deg.LinearCrossModalOp.gaussian(sigma, sign * gain)
    gap = adjoint_gap(lambda z: deg.apply_p(z, op), lambda y: deg.apply_p_adjoint(y, op),
                      (2, 1, h, w), (2, 1, h, w), rng)
    assert gap < 1e-12


def test_adjoint_as_explicit_matrix_transpose():
    # build both operators column by column and compare matrices
    op = deg.DegradationOp(sigma=0.9, scale=2)
    n = 6 * 8
    cols = [deg.apply_dk(np.eye(n)[k].reshape(1, 1, 6, 8), op).ravel() for k in range(n)]
    a = np.stack(cols, axis=1)
    m = a.shape[0]
    cols_t = [deg.apply_dk_adjoint(np.eye(m)[k].reshape(1, 1, 3, 4), op).ravel() for k in range(m)]
    np.testing.assert_allclose(np.stack(cols_t, axis=1), a.T, atol=1e-15)


def test_catmull_rom_hand_weights():
    # a = -0.5 at offsets 1.5, 0.5, 0.5, 1.5 gives (-1, 9, 9, -1) / 16
    w = deg._cubic(np.array([1.5, 0.5, -0.5, -1.5]))
    np.testing.assert_allclose(w, np.array([-1, 9, 9, -1]) / 16, rtol=1e-15)
    assert deg._cubic(np.array([0.0]))[0] == 1.0
    assert np.all(deg._cubic(np.array([1.0, 2.0, 2.5])) == 0)


def test_bicubic_up_reproduces_linear_ramp_interior():
    x = np.arange(16.0)[None, None, None, :].repeat(8, axis=2)
    up = deg.bicubic_resize(x, 2, "up")
    assert up.shape == (1, 1, 16, 32)
    # the anchored grid places output column k at input coordinate k / 2
    np.testing.assert_allclose(up[0, 0, 4, 4:26], np.arange(4, 26) / 2, atol=1e-12)


def test_bicubic_preserves_constants_both_ways():
    c = np.full((1, 1, 8, 8), 0.6)
    np.testing.assert_allclose(deg.bicubic_resize(c, 2, "up"), 0.6, rtol=1e-13)
    np.testing.assert_allclose(deg.bicubic_resize(c, 4, "down"), 0.6, rtol=1e-13)


def test_phantom_deterministic_and_shared_geometry():
    spec = deg.PhantomSpec(seed=11)
    t1, g1 = deg.make_phantom(spec)
    t2, g2 = deg.make_phantom(spec)
    assert np.array_equal(t1, t2) and np.array_equal(g1, g2)
    lab = deg.phantom_labels(spec)
    # both contrasts are functions of the same label map
    for k in np.unique(lab):
        assert np.ptp(t1[0, 0][lab == k]) == 0 and np.ptp(g1[0, 0][lab == k]) == 0
    assert t1.dtype == np.float32 and t1.min() >= 0 and t1.max() <= 1


def test_synth_noiseless_satisfies_forward_model():
    op = deg.DegradationOp(sigma=1.0, scale=2)
    cross = deg.LinearCrossModalOp.gaussian(0.5, 0.8)
    prob = deg.synth_problem(deg.PhantomSpec(seed=3), op, cross)
    np.testing.assert_allclose(prob.x, deg.apply_dk(prob.z, op), atol=1e-6)
    np.testing.assert_allclose(prob.y, deg.apply_p(prob.z, cross), atol=1e-6)
    assert prob.x.shape == (1, 1, 16, 16) and prob.y.shape == (1, 1, 32, 32)


def test_noise_does_not_move_geometry():
    clean = deg.synth_problem(deg.PhantomSpec(seed=5), deg.DegradationOp(), deg.LinearCrossModalOp())
    noisy = deg.synth_problem(deg.PhantomSpec(seed=5), deg.DegradationOp(noise_std=0.05),
                              deg.LinearCrossModalOp(noise_std=0.05))
    assert np.array_equal(clean.z, noisy.z)
    assert not np.array_equal(clean.x, noisy.x)


def test_recon_problem_shape_guard():
    with pytest.raises(ValueError, match="does not match"):
        deg.ReconProblem(x=np.zeros((1, 1, 8, 8)), y=np.zeros((1, 1, 15, 16)), scale=2)
