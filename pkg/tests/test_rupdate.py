import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from das3d import numgrid as ng
from das3d.numgrid import Tensor
from das3d.rupdate import (SampleSourceGen, UpdateConfig, UpdateStack, multi_source_update_step,
                           recursive_update_step, stack_updates)


def _affine_field(H, W, joints):
    """U[q] = j - q for each joint; the depth channel is affine with slope
    ``jd`` per cell along x and vanishes at the joint."""
    ys, xs = np.mgrid[0:H, 0:W].astype(float)
    out = np.zeros((H, W, len(joints), 3))
    for k, (jx, jy, jd) in enumerate(joints):
        out[:, :, k, 0] = jx - xs
        out[:, :, k, 1] = jy - ys
        out[:, :, k, 2] = jd * (jx - xs) - 3.0 * (jy - ys)
    return out


def _all_pixels(H, W):
    r, c = np.mgrid[0:H, 0:W]
    return r.ravel(), c.ravel()


def _dense_reference(U, n_layers, gens=None):
    """Materialize every U^j on the full grid; gens[j] None means recursive."""
    H, W, K, _ = U.shape
    cur = U.copy()
    for j in range(n_layers):
        gen = None if gens is None else gens[j]
        nxt = np.empty_like(cur)
        for r in range(H):
            for c in range(W):
                for k in range(K):
                    u = cur[r, c, k]
                    t = np.array([c + u[0], r + u[1]])
                    grid = cur[:, :, k, :]
                    if gen is None:
                        local = ng.bilinear_sample(grid, t[None]).data[0]
                    else:
                        disp, probs = gen(u[None])
                        d, pw = disp.data[0], probs.data[0]
                        samples = ng.bilinear_sample(grid, t[None] + d).data
                        lifted = np.concatenate([d, np.zeros((len(d), 1))], axis=1)
                        local = (pw[:, None] * (lifted + samples)).sum(axis=0)
                    nxt[r, c, k] = u + local
        cur = nxt
    return cur


def test_zero_field_fixed():
    out = recursive_update_step(np.zeros((4, 5, 6)), _all_pixels(4, 5))
    np.testing.assert_array_equal(out.data, 0.0)


def test_constant_field_doubles():
    c = np.array([0.3, -0.2, 17.0])
    U = np.broadcast_to(c, (5, 5, 1, 3)).copy()
    out = recursive_update_step(U, _all_pixels(5, 5)).data
    np.testing.assert_allclose(out, np.broadcast_to(2 * c, out.shape), rtol=0, atol=1e-12)


def test_uniform_two_sources_constant_field():
    c = np.array([0.1, 0.4, -5.0])
    U = np.broadcast_to(c, (5, 5, 1, 3)).copy()
    gen = SampleSourceGen(M=2, hidden=4)
    gen.mlp.w2.data[:] = 0.0
    gen.mlp.b2.data = np.array([1.0, 0.0, -0.5, 2.0, 0.0, 0.0])
    out = multi_source_update_step(U, _all_pixels(5, 5), gen).data
    d_bar = np.array([0.25, 1.0, 0.0])
    np.testing.assert_allclose(out, np.broadcast_to(c + d_bar + c, out.shape), rtol=0, atol=1e-12)


@pytest.mark.parametrize("mode", ["recursive", "multi_source"])
@pytest.mark.parametrize("n_layers", [0, 1, 2, 3, 5])
def test_affine_fixed_point(mode, n_layers):
    H, W = 7, 8
    # multi-source lifts displacements with zero depth, so its fixed point
    # needs a depth channel that vanishes near the joint
    slopes = (40.0, -25.0) if mode == "recursive" else (0.0, 0.0)
    U = _affine_field(H, W, [(3.3, 2.6, slopes[0]), (5.9, 4.1, slopes[1])])
    if mode == "multi_source":
        U[..., 2] = 0.0
    rng = np.random.default_rng(n_layers)
    stack = UpdateStack(UpdateConfig(n_layers=n_layers, mode=mode, M=3), rng)
    for g in stack.gens:
        if g is not None:
            g.mlp.randomize(rng, 0.5)
    out = stack(U, _all_pixels(H, W)).data
    np.testing.assert_allclose(out, U.reshape(-1, 2, 3), rtol=0, atol=1e-6)


def test_multi_source_reduces_to_recursive_bitwise():
    rng = np.random.default_rng(0)
    U = rng.normal(0, 1.5, size=(6, 6, 3, 3))
    pix = _all_pixels(6, 6)
    for n in (1, 2, 3):
        rec = stack_updates(U, pix, UpdateConfig(n_layers=n, mode="recursive")).data
        ms = UpdateStack(UpdateConfig(n_layers=n, mode="multi_source", M=1))
        for g in ms.gens:
            assert g.M == 1
        out = ms(U, pix).data
        assert out.tobytes() == rec.tobytes()


def test_probabilities_sum_to_one():
    gen = SampleSourceGen(M=5, hidden=8)
    gen.mlp.randomize(np.random.default_rng(1), 1.0)
    _, probs = gen(np.random.default_rng(2).normal(size=(20, 3)) * 10)
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_default_displacements_axis_neighbors():
    disp, probs = SampleSourceGen(M=4)(np.zeros((1, 3)))
    np.testing.assert_allclose(disp.data[0], [[1, 0], [0, 1], [-1, 0], [0, -1]], atol=1e-15)
    np.testing.assert_array_equal(probs.data, 0.25)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_lazy_matches_dense_recursive(seed):
    rng = np.random.default_rng(seed)
    U = rng.normal(0, 2.0, size=(5, 6, 2, 3))
    pix = _all_pixels(5, 6)
    out = stack_updates(U, pix, UpdateConfig(n_layers=3)).data
    ref = _dense_reference(U, 3).reshape(-1, 2, 3)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-9)


def test_lazy_matches_dense_multi_source():
    rng = np.random.default_rng(7)
    U = rng.normal(0, 2.0, size=(5, 5, 1, 3))
    stack = UpdateStack(UpdateConfig(n_layers=2, mode="multi_source", M=3), rng)
    for g in stack.gens:
        g.mlp.randomize(rng, 0.5)
    out = stack(U, _all_pixels(5, 5)).data
    ref = _dense_reference(U, 2, stack.gens).reshape(-1, 1, 3)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-9)


def test_n_layers_zero_identity():
    U = np.random.default_rng(3).normal(size=(4, 4, 6))
    rows, cols = np.array([0, 3]), np.array([2, 1])
    out = stack_updates(U, (rows, cols), UpdateConfig(n_layers=0)).data
    np.testing.assert_array_equal(out, U[rows, cols].reshape(2, 2, 3))


def test_localized_error_reduced_by_stacking():
    H = W = 15
    j = (7.2, 6.6, 0.0)
    exact = _affine_field(H, W, [j])
    ys, xs = np.mgrid[0:H, 0:W]
    far = np.hypot(xs - j[0], ys - j[1]) > 2.0
    rng = np.random.default_rng(0)
    noisy = exact.copy()
    noisy[far, 0, :2] += rng.normal(0, 0.4, size=(far.sum(), 2))
    noisy[far, 0, 2] += rng.normal(0, 30.0, size=far.sum())
    pix = _all_pixels(H, W)
    truth = exact.reshape(-1, 1, 3)
    scale = np.array([1.0, 1.0, 1 / 30.0])

    def err(n):
        out = stack_updates(noisy, pix, UpdateConfig(n_layers=n)).data
        return np.abs((out - truth) * scale).sum(axis=-1).mean()

    errs = [err(n) for n in range(4)]
    assert errs[3] < errs[0]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


@pytest.mark.parametrize("mode", ["recursive", "multi_source"])
def test_two_layer_gradcheck(mode):
    rng = np.random.default_rng(11)
    U = Tensor(rng.normal(0, 0.8, size=(6, 6, 2, 3)), requires_grad=True)
    stack = UpdateStack(UpdateConfig(n_layers=2, mode=mode, M=2, sampler_hidden=4), rng)
    for g in stack.gens:
        if g is not None:
            g.mlp.randomize(rng, 0.3)
    rows, cols = np.array([1, 2, 4]), np.array([4, 2, 3])
    w = rng.normal(size=(3, 2, 3))
    err = ng.gradcheck(lambda: (stack(U, (rows, cols)) * w).sum(), [U] + stack.parameters())
    assert err < 1e-4


def test_non_finite_offset_names_pixel():
    U = np.zeros((3, 3, 3))
    U[1, 2, 0] = np.nan
    with pytest.raises(ng.NonFiniteError, match="row=1, col=2"):
        recursive_update_step(U, (np.array([1]), np.array([2])))


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        UpdateConfig(n_layers=-1)
    with pytest.raises(ValueError):
        UpdateConfig(M=0)
    with pytest.raises(ValueError):
        UpdateConfig(mode="sideways")
    rng = np.random.default_rng(0)
    stack = UpdateStack(UpdateConfig(n_layers=2, mode="multi_source"), rng)
    stack.gens[0].mlp.randomize(rng, 0.5)
    back = UpdateStack.from_dict(stack.to_dict())
    U = rng.normal(size=(4, 4, 3))
    pix = _all_pixels(4, 4)
    np.testing.assert_array_equal(back(U, pix).data, stack(U, pix).data)
