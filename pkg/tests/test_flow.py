import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nirdml.errors import CheckpointError, DimensionMismatch
from nirdml.flow import (FLOW_VERSION, ConditionalFlow, CouplingBlock, conditioned_blocks,
                         coupling_forward, coupling_inverse, flow_forward, flow_from_bytes,
                         flow_grad, flow_inverse, flow_to_bytes, pushforward_logpdf,
                         sample_residual)
from nirdml.trainer import grad_check


def random_flow(d=4, depth=2, width=16, placement="all", seed=0, scale=0.3):
    return ConditionalFlow(d, depth, width, placement=placement, seed=seed).randomize(scale, seed)


def fd_jacobian(fn, x, h=1e-6):
    d = x.size
    J = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        J[:, j] = (fn(x + e) - fn(x - e)) / (2 * h)
    return J


class TestCoupling:
    def _block(self, d=4, seed=0, zero=True):
        return CouplingBlock(d, 16, d, True, perm_seed=seed, rng=np.random.default_rng(seed),
                             zero_init=zero)

    def test_zero_subnets_identity(self):
        block = self._block()
        x, c = np.array([0.3, -1.0, 2.0, 0.5]), np.ones(4)
        y, ld = coupling_forward(x, c, block)
        np.testing.assert_array_equal(y, x)
        assert ld == 0.0
        xi, ldi = coupling_inverse(y, c, block)
        np.testing.assert_array_equal(xi, x)
        assert ldi == 0.0

    @pytest.mark.parametrize("c", [0.3, -0.7, 1.5])
    def test_constant_scale(self, c):
        block = self._block()
        raw = block.clamp * np.arctanh(c / block.clamp)
        for net in (block.net1, block.net2):
            net.W2[:] = 0.0
            net.b2[:] = np.r_[np.full(2, raw), np.zeros(2)]
        x = np.array([0.3, -1.0, 2.0, 0.5])
        y, ld = coupling_forward(x, np.zeros(4), block)
        # both halves scale by e^c and land back in their original slots
        np.testing.assert_allclose(y, x * np.exp(c), rtol=1e-14)
        assert ld == pytest.approx(4 * c, rel=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_logdet_matches_fd_jacobian(self, seed):
        block = self._block(seed=seed, zero=False)
        rng = np.random.default_rng(seed)
        x, c = rng.standard_normal(4), rng.standard_normal(4)
        _, ld = coupling_forward(x, c, block)
        J = fd_jacobian(lambda v: coupling_forward(v, c, block)[0], x)
        ref = np.linalg.slogdet(J)[1]
        assert abs(ld - ref) / abs(ref) < 1e-4

    def test_roundtrip_d128(self):
        block = CouplingBlock(128, 128, 128, True, perm_seed=3, zero_init=False)
        rng = np.random.default_rng(0)
        x, c = rng.uniform(-5, 5, (10, 128)), rng.standard_normal((10, 128))
        y, ld = coupling_forward(x, c, block)
        xi, ldi = coupling_inverse(y, c, block)
        assert np.max(np.abs(xi - x)) < 1e-6
        np.testing.assert_allclose(ld + ldi, 0.0, atol=1e-8)

    def test_dimension_mismatch(self):
        block = self._block()
        with pytest.raises(DimensionMismatch):
            coupling_forward(np.ones(6), np.ones(4), block)
        with pytest.raises(DimensionMismatch):
            coupling_inverse(np.ones(4), np.ones(3), block)

    def test_odd_dimension_rejected(self):
        with pytest.raises(ValueError):
            CouplingBlock(5, 8, 5, True, perm_seed=0)
        with pytest.raises(ValueError):
            ConditionalFlow(7)


class TestFlow:
    def test_depth_zero_identity(self):
        flow = ConditionalFlow(4, depth=0)
        z = np.random.default_rng(0).standard_normal((3, 4))
        y, ld = flow_forward(z, np.ones((3, 4)), flow)
        np.testing.assert_array_equal(y, z)
        np.testing.assert_array_equal(ld, 0.0)
        x, ldi = flow_inverse(z, np.ones((3, 4)), flow)
        np.testing.assert_array_equal(x, z)
        np.testing.assert_array_equal(ldi, 0.0)

    def test_roundtrip_depth8(self):
        flow = random_flow(d=16, depth=8, width=32, scale=0.1)
        rng = np.random.default_rng(1)
        z, rho = rng.uniform(-5, 5, (50, 16)), rng.standard_normal((50, 16))
        psi, ld = flow_forward(z, rho, flow)
        zi, ldi = flow_inverse(psi, rho, flow)
        assert np.max(np.abs(zi - z)) < 1e-5
        np.testing.assert_allclose(ldi, -ld, atol=1e-6)
        psi2, _ = flow_forward(zi, rho, flow)
        assert np.max(np.abs(psi2 - psi)) < 1e-5

    def test_batched_equals_rowwise(self):
        flow = random_flow(d=6, depth=3)
        rng = np.random.default_rng(2)
        z, rho = rng.standard_normal((5, 6)), rng.standard_normal((5, 6))
        y, ld = flow_forward(z, rho, flow)
        for i in range(5):
            yi, ldi = flow_forward(z[i:i + 1], rho[i:i + 1], flow)
            # BLAS may block a 1-row product differently; agreement is to roundoff
            np.testing.assert_allclose(yi[0], y[i], rtol=1e-12, atol=1e-14)
            assert ldi[0] == pytest.approx(ld[i], rel=1e-12, abs=1e-14)

    def test_logdet_is_sum_of_blocks(self):
        flow = random_flow(d=6, depth=4)
        rng = np.random.default_rng(3)
        x, rho = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
        total = np.zeros(4)
        y = x
        for block in flow.blocks:
            y, ld, _ = block.forward(y, rho)
            total += ld
        _, ld_flow = flow_forward(x, rho, flow)
        np.testing.assert_array_equal(ld_flow, total)

    def test_flow_logdet_fd(self):
        flow = random_flow(d=4, depth=2)
        rng = np.random.default_rng(4)
        for _ in range(10):
            z, rho = rng.standard_normal(4), rng.standard_normal(4)
            _, ld = flow_forward(z[None], rho[None], flow)
            J = fd_jacobian(lambda v: flow_forward(v[None], rho[None], flow)[0][0], z)
            ref = np.linalg.slogdet(J)[1]
            assert abs(ld[0] - ref) / abs(ref) < 1e-4

    def test_shape_checks(self):
        flow = ConditionalFlow(4, depth=1, width=8)
        with pytest.raises(DimensionMismatch):
            flow_forward(np.ones((2, 4)), np.ones((3, 4)), flow)
        with pytest.raises(DimensionMismatch):
            flow_inverse(np.ones((2, 6)), np.ones((2, 4)), flow)

    def test_density_integrates_to_one(self):
        flow = random_flow(d=2, depth=4, width=16, scale=0.2, seed=5)
        g = np.linspace(-6, 6, 301)
        xx, yy = np.meshgrid(g, g)
        pts = np.c_[xx.ravel(), yy.ravel()]
        rho = np.tile([0.6, 0.8], (len(pts), 1))
        dens = np.exp(pushforward_logpdf(pts, rho, flow)).reshape(xx.shape)
        mass = np.trapezoid(np.trapezoid(dens, g, axis=1), g)
        assert abs(mass - 1) < 0.02


class TestPlacement:
    @pytest.mark.parametrize("depth,placement,expected", [
        (8, "all", set(range(8))), (8, "start", {0}), (8, "mid", {3}), (8, "end", {7}),
        (7, "mid", {3}), (1, "mid", {0}), (0, "all", set()),
    ])
    def test_conditioned_blocks(self, depth, placement, expected):
        assert conditioned_blocks(depth, placement) == expected
        flow = ConditionalFlow(4, depth=depth, width=8, placement=placement)
        assert {i for i, b in enumerate(flow.blocks) if b.conditioned} == expected

    def test_bad_placement(self):
        with pytest.raises(ValueError):
            conditioned_blocks(4, "middle")

    @pytest.mark.parametrize("placement", ["start", "mid", "end", "all"])
    def test_rho_gradient_sparsity(self, placement):
        flow = random_flow(d=4, depth=4, placement=placement)
        rng = np.random.default_rng(6)
        psi, rho = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        _, ld, caches = flow.inverse(psi, rho, return_cache=True)
        zeta = flow.inverse(psi, rho)[0]
        dy = 2 * zeta
        nonzero = set()
        for i, block in enumerate(flow.blocks):
            dy, dc, _ = block.inverse_backward(dy, -np.ones(3), caches[i])
            if np.any(dc != 0):
                nonzero.add(i)
        assert nonzero == conditioned_blocks(4, placement)


class TestFlowGrad:
    def test_zero_subnets_at_origin(self):
        flow = ConditionalFlow(4, depth=2, width=8)
        _, dpsi, drho, grads = flow_grad(np.zeros((2, 4)), np.ones((2, 4)), flow)
        np.testing.assert_array_equal(dpsi, 0.0)

    def test_rho_unused_without_conditioned_blocks(self):
        flow = ConditionalFlow(4, depth=0)
        _, _, drho, _ = flow_grad(np.ones((2, 4)), np.ones((2, 4)), flow)
        np.testing.assert_array_equal(drho, 0.0)

    @pytest.mark.parametrize("placement", ["all", "start", "mid", "end"])
    def test_matches_finite_differences(self, placement):
        flow = random_flow(d=4, depth=2, placement=placement, seed=7)
        rng = np.random.default_rng(7)
        params = {"psi": rng.standard_normal((3, 4)), "rho": rng.standard_normal((3, 4))}
        params.update({f"f.{k}": v.copy() for k, v in flow.params().items()})

        def fn(p):
            flow.set_params({k[2:]: v for k, v in p.items() if k.startswith("f.")})
            value, dpsi, drho, grads = flow_grad(p["psi"], p["rho"], flow)
            g = {"psi": dpsi, "rho": drho}
            g.update({f"f.{k}": v for k, v in grads.items()})
            return value, g

        assert grad_check(fn, params, n_coords=30) < 1e-4

    def test_forward_backward_matches_fd(self):
        flow = random_flow(d=4, depth=2, seed=8)
        rng = np.random.default_rng(8)
        w = rng.standard_normal((3, 4))
        params = {"z": rng.standard_normal((3, 4)), "rho": rng.standard_normal((3, 4))}

        def fn(p):
            psi, ld, caches = flow.forward(p["z"], p["rho"], return_cache=True)
            value = float(np.sum(w * psi) + 0.5 * np.sum(ld))
            dz, drho, _ = flow.forward_backward(w, 0.5 * np.ones(3), caches)
            return value, {"z": dz, "rho": drho}

        assert grad_check(fn, params) < 1e-4


class TestResiduals:
    def test_deterministic(self):
        np.testing.assert_array_equal(sample_residual(5, 3, 9), sample_residual(5, 3, 9))
        assert sample_residual(5, 3, 9).shape == (5, 3)

    def test_moments(self):
        z = sample_residual(100_000, 2, 0)
        assert np.all(np.abs(z.mean(axis=0)) < 0.02)
        assert np.all(np.abs(z.var(axis=0) - 1) < 0.03)


class TestSerialization:
    def test_roundtrip_float32(self):
        flow = random_flow(d=6, depth=3, placement="mid", seed=2)
        back = flow_from_bytes(flow_to_bytes(flow))
        assert back.header() == flow.header()
        for k, v in flow.params().items():
            np.testing.assert_array_equal(back.params()[k], v.astype(np.float32))
        # a second trip is bit-exact
        assert flow_to_bytes(back) == flow_to_bytes(flow)

    def test_version_mismatch(self):
        blob = bytearray(flow_to_bytes(ConditionalFlow(4, depth=1, width=8)))
        blob[8:12] = (FLOW_VERSION + 1).to_bytes(4, "little")
        with pytest.raises(CheckpointError, match="version"):
            flow_from_bytes(bytes(blob))

    def test_bad_magic(self):
        with pytest.raises(CheckpointError):
            flow_from_bytes(b"garbage" * 4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from(["all", "start", "mid", "end"]))
def test_inverse_property(seed, placement):
    flow = random_flow(d=8, depth=3, placement=placement, seed=seed % 997)
    rng = np.random.default_rng(seed)
    z, rho = rng.uniform(-5, 5, (4, 8)), rng.standard_normal((4, 8))
    psi, ld = flow_forward(z, rho, flow)
    zi, ldi = flow_inverse(psi, rho, flow)
    assert np.max(np.abs(zi - z)) < 1e-8
    np.testing.assert_allclose(ld + ldi, 0.0, atol=1e-10)
