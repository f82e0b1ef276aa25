"""Priors, noise, regularized and subspace inverses, reversion, projections."""

import numpy as np
import pytest

from eitrev import fem
from eitrev.calculus import DerivativeStack, vec
from eitrev.inversion import (
    AssumptionViolatedError,
    PriorGammas,
    PriorModel,
    SubspacePseudoInverse,
    TikhonovInverse,
    build_noise_cov,
    build_prior,
    inout_projector,
    project_in_out,
    revert,
    sequential_linearize,
    solve_tikhonov,
)
from eitrev.model import ConductivityPair, ParamVector


class TestPrior:
    def test_diagonal_is_pointwise_variance(self, smooth8):
        prior = build_prior(smooth8, PriorGammas(0.4, 0.8, 0.2, 0.05))
        diag = np.diag(prior.cov)
        assert np.allclose(diag[:20], 0.16)
        assert np.allclose(diag[20:28], 0.04)
        assert np.allclose(diag[28:], 0.0025)

    def test_short_correlation_length_decouples(self, smooth8):
        centers = smooth8.partition.centers
        dists = np.linalg.norm(centers[:, None] - centers[None, :], axis=2)
        min_dist = dists[dists > 0].min()
        prior = build_prior(smooth8, PriorGammas(0.4, 1e-3 * min_dist, 0.2, 0.05))
        off = prior.cov[:20, :20].copy()
        np.fill_diagonal(off, 0.0)
        assert np.abs(off).max() < 1e-12

    def test_table_values_give_spd(self, smooth16):
        prior = build_prior(smooth16, PriorGammas(0.1, 1.0, 0.1, 0.02))
        evals = np.linalg.eigvalsh(prior.cov)
        assert evals.min() > 0
        assert prior.cov.shape == (80 + 16 + 32,) * 2

    def test_gaussian_kernel_entries(self, smooth8):
        gammas = PriorGammas(0.3, 0.9, 0.1, 0.02)
        prior = build_prior(smooth8, gammas)
        centers = smooth8.partition.centers
        i, j = 2, 11
        expect = 0.09 * np.exp(-np.sum((centers[i] - centers[j]) ** 2) / (2 * 0.81))
        assert prior.cov[i, j] == pytest.approx(expect, rel=1e-12)

    def test_block_order_matches_serialization(self, smooth8):
        # a draw reshaped through the parametrization puts the blocks where
        # the covariance says they are
        prior = build_prior(smooth8, PriorGammas(1e-6, 1.0, 1e-6, 5.0))
        draw = prior.sample(np.random.default_rng(0))
        pv = smooth8.from_flat(draw)
        # only the xi block has non-negligible variance
        assert np.abs(pv.kappa).max() < 1e-4
        assert np.abs(pv.rho).max() < 1e-4
        assert np.abs(pv.xi).max() > 0.5

    def test_cem_prior_has_no_location_block(self, cem8):
        prior = build_prior(cem8, PriorGammas(0.1, 1.0, 0.1))
        assert prior.cov.shape == (28, 28)

    def test_invalid_gammas(self, smooth8):
        with pytest.raises(ValueError):
            build_prior(smooth8, PriorGammas(0.0, 1.0, 0.1, 0.02))


class TestNoise:
    def test_zero_levels_zero_covariance(self, stack8, basis8):
        noise = build_noise_cov(0.0, 0.0, stack8.lam, basis8)
        assert np.all(noise.cov == 0.0)
        assert np.all(noise.pattern_std == 0.0)

    def test_delta2_zero_gives_constant_std(self, stack8, basis8):
        noise = build_noise_cov(0.01, 0.0, stack8.lam, basis8)
        assert np.allclose(noise.pattern_std, noise.pattern_std[0, 0])

    def test_noise_scale_from_peak_measurement(self, stack8, basis8):
        noise = build_noise_cov(0.01, 0.0, stack8.lam, basis8)
        U0 = basis8.B @ stack8.lam @ basis8.B_pinv @ basis8.Bhat
        assert noise.pattern_std[0, 0] == pytest.approx(0.01 * np.abs(U0).max(), rel=1e-13)

    @pytest.mark.parametrize("deltas", [(5e-5, 5e-4), (1e-4, 1e-3), (5e-4, 5e-3)])
    def test_monte_carlo_covariance(self, stack8, basis8, deltas):
        # oracle: empirical covariance of the transformed physical noise
        noise = build_noise_cov(deltas[0], deltas[1], stack8.lam, basis8)
        M = 8
        rng = np.random.Generator(np.random.Philox(key=[99, 0]))
        n = 100_000
        acc = np.zeros((49, 49))
        tail = basis8.Bhat_pinv @ basis8.B
        for _ in range(10):
            theta = noise.pattern_std[None, :, :] * rng.standard_normal((n // 10, M, M - 1))
            data = np.einsum("im,cmn,nj->cij", basis8.B_pinv, theta, tail)
            flat = data.reshape(n // 10, -1, order="F")
            acc += flat.T @ flat
        emp = acc / n
        rel = np.linalg.norm(emp - noise.cov) / np.linalg.norm(noise.cov)
        assert rel < 0.05

    def test_inverse_is_pseudo_inverse(self, stack8, basis8):
        noise = build_noise_cov(1e-4, 1e-3, stack8.lam, basis8)
        approx = noise.cov @ noise.inv @ noise.cov
        assert np.allclose(approx, noise.cov, rtol=1e-8, atol=1e-12 * np.abs(noise.cov).max())


def _small_prior(dim, variance):
    cov = variance * np.eye(dim)
    chol = np.sqrt(variance) * np.eye(dim)
    inv = np.eye(dim) / variance
    return PriorModel(cov=cov, chol=chol, inv=inv, gammas=PriorGammas(1, 1, 1), kind="test")


class TestTikhonov:
    def test_zero_data_zero_solution(self, stack8, smooth8, basis8):
        prior = build_prior(smooth8, PriorGammas(0.1, 1.0, 0.1, 0.02))
        noise = build_noise_cov(1e-4, 1e-3, stack8.lam, basis8)
        inverse = TikhonovInverse(stack8, prior, noise)
        out = inverse(np.zeros((7, 7)))
        assert np.all(out.to_flat() == 0.0)

    def test_weak_prior_approaches_least_squares(self, stack8, basis8):
        J5 = stack8.jacobian()[:, [0, 3, 7, 21, 30]]
        noise = build_noise_cov(1e-4, 1e-3, stack8.lam, basis8)
        rng = np.random.default_rng(31)
        psi = rng.standard_normal((7, 7))
        eta = solve_tikhonov(J5, _small_prior(5, 1e6), noise, psi)
        # oracle: weighted least squares through the whitened normal equations
        w = noise.inv
        oracle = np.linalg.solve(J5.T @ w @ J5, J5.T @ w @ vec(psi))
        assert np.linalg.norm(eta - oracle) < 1e-3 * np.linalg.norm(oracle)

    def test_matches_dense_bayes_formula(self, stack8, basis8):
        # oracle: posterior-mean identity using the covariance form
        J5 = stack8.jacobian()[:, [0, 3, 7, 21, 30]]
        noise = build_noise_cov(1e-3, 1e-2, stack8.lam, basis8)
        prior_cov = np.diag([0.5, 0.2, 0.1, 0.4, 0.3])
        prior = PriorModel(
            cov=prior_cov,
            chol=np.linalg.cholesky(prior_cov),
            inv=np.linalg.inv(prior_cov),
            gammas=PriorGammas(1, 1, 1),
            kind="test",
        )
        rng = np.random.default_rng(32)
        psi = rng.standard_normal((7, 7))
        eta = solve_tikhonov(J5, prior, noise, psi)
        gain = prior_cov @ J5.T @ np.linalg.pinv(J5 @ prior_cov @ J5.T + noise.cov)
        oracle = gain @ vec(psi)
        assert np.allclose(eta, oracle, atol=1e-8 * max(1.0, np.abs(oracle).max()))

    def test_first_order_optimality(self, stack8, smooth8, basis8):
        prior = build_prior(smooth8, PriorGammas(0.1, 1.0, 0.1, 0.02))
        noise = build_noise_cov(1e-4, 1e-3, stack8.lam, basis8)
        inverse = TikhonovInverse(stack8, prior, noise)
        rng = np.random.default_rng(33)
        psi = rng.standard_normal((7, 7))
        eta = inverse(psi).to_flat()
        J = stack8.jacobian()
        grad = 2.0 * J.T @ noise.inv @ (J @ eta - vec(psi)) + 2.0 * prior.inv @ eta
        scale = np.linalg.norm(2.0 * J.T @ noise.inv @ vec(psi))
        assert np.linalg.norm(grad) < 1e-8 * scale


def coordinate_directions(param, indices):
    dirs = []
    for idx in indices:
        e = np.zeros(param.dim)
        e[idx] = 1.0
        dirs.append(param.from_flat(e))
    return dirs


def subspace_directions(stack, dim):
    """Deterministic well-conditioned subspace: boundary clusters + contacts."""
    param = stack.param
    part = param.partition
    M = param.n_electrodes
    by_radius = np.argsort(-np.linalg.norm(part.centers, axis=1))
    n_kappa = dim - min(M // 2, dim // 2)
    idx = [int(i) for i in by_radius[:n_kappa]]
    idx += [param.n_clusters + 2 * m for m in range(dim - n_kappa)]
    return coordinate_directions(param, idx)


class TestSubspacePseudoInverse:
    def test_left_inverse_on_range(self, stack8):
        dirs = subspace_directions(stack8, 6)
        inv = SubspacePseudoInverse(stack8, dirs)
        rng = np.random.default_rng(41)
        coeff = rng.standard_normal(6)
        w = coeff[0] * dirs[0]
        for c, d in zip(coeff[1:], dirs[1:]):
            w = w + c * d
        data = stack8.dlambda1(w)
        back = inv(data)
        assert np.linalg.norm((back - w).to_flat()) < 1e-10 * np.linalg.norm(w.to_flat())

    def test_orthogonal_data_maps_to_zero(self, stack8):
        dirs = subspace_directions(stack8, 5)
        inv = SubspacePseudoInverse(stack8, dirs)
        F = np.column_stack([vec(stack8.dlambda1_identity(d)) for d in dirs])
        rng = np.random.default_rng(42)
        raw = rng.standard_normal(49)
        q, _ = np.linalg.qr(F)
        ortho = raw - q @ (q.T @ raw)
        out = inv(ortho.reshape(7, 7, order="F"))
        assert np.linalg.norm(out.to_flat()) < 1e-10 * np.linalg.norm(ortho)

    def test_duplicated_direction_raises(self, stack8):
        dirs = subspace_directions(stack8, 5)
        with pytest.raises(AssumptionViolatedError):
            SubspacePseudoInverse(stack8, dirs + [dirs[0]])


class TestRevert:
    def test_zero_residual_collapses(self, stack8, smooth8, basis8):
        prior = build_prior(smooth8, PriorGammas(0.1, 1.0, 0.1, 0.02))
        noise = build_noise_cov(1e-4, 1e-3, stack8.lam, basis8)
        inverse = TikhonovInverse(stack8, prior, noise)
        result = revert(stack8, inverse, stack8.lam.copy(), order=3)
        for eta in result.etas:
            assert np.all(eta.to_flat() == 0.0)

    def test_partial_sums_exact(self, stack8, smooth8, basis8):
        prior = build_prior(smooth8, PriorGammas(0.1, 1.0, 0.1, 0.02))
        noise = build_noise_cov(1e-4, 1e-3, stack8.lam, basis8)
        inverse = TikhonovInverse(stack8, prior, noise)
        rng = np.random.default_rng(44)
        data = stack8.lam + 1e-3 * rng.standard_normal((7, 7))
        result = revert(stack8, inverse, data, order=3)
        ps2 = result.partial_sum(2)
        ps3 = result.partial_sum(3)
        assert np.array_equal(ps3.to_flat(), (ps2 + result.etas[2]).to_flat())

    def test_trivial_parametrization_second_order(self, stack8, linear_parametrization):
        # with tau'' = 0 the second increment is -M T P(eta1)^2 N
        system = stack8.system
        tau0 = system.tau
        rng = np.random.default_rng(45)
        modes = [
            ConductivityPair(
                0.02 * rng.standard_normal(system.mesh.n_cells) * tau0.sigma,
                0.02 * rng.standard_normal() * tau0.zeta,
            )
            for _ in range(4)
        ]
        linear = linear_parametrization(tau0, modes)
        stack = DerivativeStack(system, linear, linear.zero(), stack8.basis)
        dirs = [np.eye(4)[i] for i in range(4)]
        inv = SubspacePseudoInverse(stack, dirs)
        target = np.array([0.3, -0.2, 0.15, 0.05])
        data = fem.forward_map(
            fem.assemble(system.mesh, system.layout, linear.tau(target), stack8.basis),
            stack8.basis,
        )
        result = revert(stack, inv, data, order=2)
        eta1 = result.etas[0]
        pair1 = linear.dtau(linear.zero(), [eta1])
        once = fem.apply_P(system, pair1, stack.base)
        twice = fem.apply_P(system, pair1, once)
        expect = -1.0 * inv(twice.coefficients(stack8.basis))
        assert np.allclose(result.etas[1], expect, atol=1e-11)

    @pytest.mark.parametrize("dim", [5, 10, 20])
    @pytest.mark.parametrize("electrodes", [8, 16])
    def test_convergence_orders(self, dim, electrodes, stack8, stack16):
        stack = stack8 if electrodes == 8 else stack16
        system = stack.system
        dirs = subspace_directions(stack, dim)
        inv = SubspacePseudoInverse(stack, dirs)
        assert inv.condition_number < 1e4
        rng = np.random.default_rng(46)
        coeff = rng.standard_normal(dim)
        w = coeff[0] * dirs[0]
        for c, d in zip(coeff[1:], dirs[1:]):
            w = w + c * d
        w = (1.0 / np.linalg.norm(w.to_flat())) * w
        tvals = [2.0 ** (-k) for k in range(1, 6)]
        errs = {1: [], 2: [], 3: []}
        for t in tvals:
            target = t * w
            data = fem.forward_map(
                fem.assemble(
                    system.mesh, system.layout, stack.param.tau(target), stack.basis
                ),
                stack.basis,
            )
            result = revert(stack, inv, data, order=3)
            for K in (1, 2, 3):
                errs[K].append(
                    np.linalg.norm((target - result.partial_sum(K)).to_flat())
                )
        for K in (1, 2, 3):
            slope = np.polyfit(np.log(tvals), np.log(errs[K]), 1)[0]
            assert slope == pytest.approx(K + 1, abs=0.25)


class TestSequential:
    def _tikhonov_setup(self, stack, smooth8, basis8):
        prior = build_prior(smooth8, PriorGammas(0.1, 1.0, 0.1, 0.02))
        noise = build_noise_cov(1e-4, 1e-3, stack.lam, basis8)
        return prior, noise

    def test_step_one_equals_first_order_reversion(self, stack8, smooth8, basis8):
        prior, noise = self._tikhonov_setup(stack8, smooth8, basis8)
        inverse = TikhonovInverse(stack8, prior, noise)
        rng = np.random.default_rng(51)
        data = stack8.lam + 1e-3 * rng.standard_normal((7, 7))
        rev = revert(stack8, inverse, data, order=1)
        seq = sequential_linearize(
            lambda iota: (_ for _ in ()).throw(AssertionError("no rebuild for 1 step")),
            lambda st: inverse,
            data,
            steps=1,
            initial_stack=stack8,
            initial_inverse=inverse,
        )
        assert np.array_equal(
            seq.iterates[0].to_flat(), rev.partial_sum(1).to_flat()
        )

    def test_zero_data_residual_stays_zero(self, disk2, layout8, smooth8, basis8):
        iota = smooth8.zero()
        system = fem.assemble(disk2, layout8, smooth8.tau(iota), basis8)
        stack = DerivativeStack(system, smooth8, iota, basis8)
        prior, noise = self._tikhonov_setup(stack, smooth8, basis8)

        def make_stack(up):
            sys_j = fem.assemble(disk2, layout8, smooth8.tau(up), basis8)
            return DerivativeStack(sys_j, smooth8, up, basis8)

        def make_inverse(st):
            return TikhonovInverse(st, prior, noise)

        seq = sequential_linearize(
            make_stack,
            make_inverse,
            stack.lam.copy(),
            steps=3,
            initial_stack=stack,
            initial_inverse=TikhonovInverse(stack, prior, noise),
        )
        for it in seq.iterates:
            assert np.all(it.to_flat() == 0.0)

    def test_weighted_residual_non_increasing(self, disk2, layout8, smooth8, basis8):
        iota0 = smooth8.zero()
        rng = np.random.default_rng(52)
        target = ParamVector(
            0.05 * rng.standard_normal(20),
            0.05 * rng.standard_normal(8),
            0.01 * rng.standard_normal((8, 2)),
        )
        data = fem.forward_map(
            fem.assemble(disk2, layout8, smooth8.tau(target), basis8), basis8
        )
        system = fem.assemble(disk2, layout8, smooth8.tau(iota0), basis8)
        stack = DerivativeStack(system, smooth8, iota0, basis8)
        prior, noise = self._tikhonov_setup(stack, smooth8, basis8)

        def make_stack(up):
            sys_j = fem.assemble(disk2, layout8, smooth8.tau(up), basis8)
            return DerivativeStack(sys_j, smooth8, up, basis8)

        def make_inverse(st):
            return TikhonovInverse(st, prior, noise)

        seq = sequential_linearize(
            make_stack, make_inverse, data, steps=3,
            initial_stack=stack, initial_inverse=TikhonovInverse(stack, prior, noise),
        )
        residuals = [float(vec(data - stack.lam) @ noise.inv @ vec(data - stack.lam))]
        for it in seq.iterates:
            lam_it = fem.forward_map(
                fem.assemble(disk2, layout8, smooth8.tau(it), basis8), basis8
            )
            r = vec(data - lam_it)
            residuals.append(float(r @ noise.inv @ r))
        for a, b in zip(residuals[:-1], residuals[1:]):
            assert b <= a * (1.0 + 1e-12)


class TestProjections:
    def test_full_sets_identity(self, basis8):
        rng = np.random.default_rng(61)
        matrix = rng.standard_normal((7, 7))
        out = project_in_out(matrix, range(8), range(8), basis8)
        assert np.allclose(out, matrix, atol=1e-12)

    def test_idempotent(self, basis8):
        rng = np.random.default_rng(62)
        matrix = rng.standard_normal((7, 7))
        once = project_in_out(matrix, [0, 2, 5], [1, 3, 4, 6], basis8)
        twice = project_in_out(once, [0, 2, 5], [1, 3, 4, 6], basis8)
        assert np.allclose(once, twice, atol=1e-12)

    def test_matches_gram_schmidt_oracle(self, basis8):
        subset = [1, 4, 6]
        got = inout_projector(basis8, subset)
        # oracle: orthonormalize the mean-free span of the subset directions
        cols = []
        for k in subset[1:]:
            v = np.zeros(8)
            v[subset[0]] = 1.0
            v[k] = -1.0
            cols.append(v)
        q, _ = np.linalg.qr(np.column_stack(cols))
        oracle = basis8.B.T @ (q @ q.T) @ basis8.B
        assert np.allclose(got, oracle, atol=1e-12)

    def test_empty_subset_rejected(self, basis8):
        with pytest.raises(ValueError):
            inout_projector(basis8, [])
