import numpy as np
import pytest

from gmixdyn.errors import InsufficientReplications, NotPositiveDefinite
from gmixdyn.dmf import dmf_metric_curve, solve_dmf
from gmixdyn.mixture import realize_means, sample_dataset, two_class_spec
from gmixdyn.perceptron import momentum_coeffs, make_maps, training_metric
from gmixdyn.refine import (build_matched_kernels, dmf_surrogate_realization,
                            extrapolated_normalized_variance,
                            iterate_refinement, kernel_set_from_realization,
                            matched_metric_curves, matched_surrogate_run,
                            normalized_variance, repair_psd, run_with_kernels,
                            sample_draw, z_extrapolate)
from gmixdyn.surrogate import GaussianAtoms


@pytest.fixture(scope="module")
def refine_setup(soft_model):
    act, loss = soft_model
    L = 4
    coeffs = momentum_coeffs(0.2, 0.0, L)
    spec = two_class_spec(coupling=-0.5, ambient_dim=10, theta0_norm=0.1)
    sol = solve_dmf(spec, 1.0, coeffs, act, loss, mc_paths=100_000, seed=5)
    return spec, sol, coeffs, act, loss


class TestExtrapolation:
    def test_equal_inputs(self):
        h = np.array([1.0, 2.0])
        assert np.array_equal(z_extrapolate(h, h), h)

    def test_linear_value(self):
        assert abs(z_extrapolate(1.0, 0.8) - 1.2) < 1e-15

    def test_quadratic_remainder_is_known(self):
        # H(u) = a + b u + c u^2 with u = z^2; extrapolating to u = -1
        # from u in {0, 1} leaves exactly -c (1 + z1^2) = -2c
        a, b, c = 0.3, -0.7, 0.11
        H = lambda u: a + b * u + c * u * u
        got = z_extrapolate(H(0.0), H(1.0))
        assert abs(got - H(-1.0) - (-2 * c)) < 1e-14

    def test_general_pair_reduces_to_default(self):
        h0, h1 = 1.3, 0.9
        assert abs(z_extrapolate(h0, h1, z1=1.0) - (2 * h0 - h1)) < 1e-15


class TestNormalizedVariance:
    def test_identical_replications(self):
        curves = np.tile(np.array([0.5, 0.4]), (10, 1))
        nv, se = normalized_variance(curves, np.zeros(2), 100)
        assert np.abs(nv).max() < 1e-25 and np.abs(se).max() < 1e-25

    def test_synthetic_gaussian(self):
        rng = np.random.default_rng(0)
        m, c, R = 500, 0.7, 40_000
        curves = rng.normal(0.0, np.sqrt(c / m), size=(R, 3))
        nv, se = normalized_variance(curves, np.zeros(3), m)
        assert np.abs(nv - c).max() < 4 * se.max()

    def test_insufficient_replications(self):
        with pytest.raises(InsufficientReplications):
            normalized_variance(np.ones((1, 3)), np.zeros(3), 10)


class TestMatchedKernels:
    def test_zero_draw_is_baseline(self, refine_setup):
        spec, sol, coeffs, act, loss = refine_setup
        mk = build_matched_kernels(sol, 777, None)
        assert np.abs(mk.V_theta_pp - sol.V_theta).max() < 1e-12
        for k in range(2):
            assert np.abs(mk.V_omega_pp[k] - sol.V_omega_by_label[k]).max() < 1e-14
            assert np.abs(mk.beta_pp[k] - sol.beta[k]).max() < 1e-14
            assert np.abs(mk.alpha_pp[k] - sol.alpha[k]).max() < 1e-14

    def test_centering(self, refine_setup):
        spec, sol, coeffs, act, loss = refine_setup
        mk0 = build_matched_kernels(sol, 1000, None)
        ND = 4000
        acc = {}
        for r in range(ND):
            d = sample_draw(sol, act, loss, 123, rep=r)
            mk = build_matched_kernels(sol, 1000, d)
            for nm, v in [("V_th", mk.V_theta_pp), ("V_om0", mk.V_omega_pp[0]),
                          ("C_om0", mk.C_omega_pp[0]), ("C_th0", mk.C_theta_pp[0]),
                          ("beta0", mk.beta_pp[0]), ("alpha0", mk.alpha_pp[0])]:
                s = acc.setdefault(nm, [np.zeros_like(v), np.zeros_like(v)])
                s[0] += v
                s[1] += v * v
        base = {"V_th": sol.V_theta, "V_om0": sol.V_omega_by_label[0],
                "C_om0": sol.C_omega_by_label[0], "C_th0": mk0.C_theta_pp[0],
                "beta0": sol.beta[0], "alpha0": sol.alpha[0]}
        for nm, (s1, s2) in acc.items():
            mean = s1 / ND
            se = np.sqrt(np.maximum(s2 / ND - mean**2, 0) / ND)
            scale = max(np.abs(base[nm]).max(), 1.0)
            z = np.abs(mean - base[nm]) / np.maximum(se, 1e-9 * scale)
            assert z.max() < 5.0, nm

    def test_beta_reflection_is_linear(self, refine_setup):
        spec, sol, coeffs, act, loss = refine_setup
        d = sample_draw(sol, act, loss, 55, rep=0)
        mk = build_matched_kernels(sol, 900, d)
        flipped = sample_draw(sol, act, loss, 55, rep=0)
        for k in range(2):
            flipped.g_o[k] *= -1.0
        from gmixdyn.refine import _derived_images
        flipped.g_t_o, flipped.g_t_e = _derived_images(sol, flipped.g_o,
                                                       flipped.g_e)
        mk2 = build_matched_kernels(sol, 900, flipped)
        for k in range(2):
            dev = mk.beta_pp[k] - sol.beta[k]
            dev2 = mk2.beta_pp[k] - sol.beta[k]
            assert np.abs(dev + dev2).max() < 1e-12

    def test_second_moments_match_direct_recompute(self, refine_setup):
        """The matched kernels and the directly recomputed kernels of the
        mean-field surrogate realizations share first and second moments."""
        spec3 = two_class_spec(coupling=-0.5, ambient_dim=800, theta0_norm=0.1)
        act, loss = refine_setup[3], refine_setup[4]
        L = 3
        coeffs = momentum_coeffs(0.2, 0.0, L)
        sol = solve_dmf(spec3, 1.0, coeffs, act, loss, mc_paths=100_000, seed=5)
        means = realize_means(spec3, 11)
        ds = sample_dataset(spec3, 800, 11, means=means, assignment="fixed")
        ND = 1500
        direct = np.empty((ND, L, L))
        matched = np.empty((ND, L, L))
        bd = np.empty((ND, L))
        bm = np.empty((ND, L))
        for r in range(ND):
            atoms = GaussianAtoms.sample(ds, L, 222, rep=r)
            traj = dmf_surrogate_realization(sol, ds, atoms, coeffs, act, loss)
            Th = traj.theta_matrix()
            direct[r] = Th.T @ Th
            bd[r] = means[:, 0] @ Th
            d = sample_draw(sol, act, loss, 333, rep=r)
            mk = build_matched_kernels(sol, 800, d)
            matched[r] = mk.V_theta_pp
            bm[r] = mk.beta_pp[0]

        def compare(A, B):
            A = A.reshape(ND, -1)
            B = B.reshape(ND, -1)
            seA = A.std(0, ddof=1) / np.sqrt(ND)
            seB = B.std(0, ddof=1) / np.sqrt(ND)
            z_mean = np.abs(A.mean(0) - B.mean(0)) / np.maximum(
                np.sqrt(seA**2 + seB**2), 1e-12)
            va, vb = A.var(0, ddof=1), B.var(0, ddof=1)
            ca, cb = A - A.mean(0), B - B.mean(0)
            sva = np.sqrt(np.maximum((ca**4).mean(0) - va**2, 0) / ND)
            svb = np.sqrt(np.maximum((cb**4).mean(0) - vb**2, 0) / ND)
            z_var = np.abs(va - vb) / np.maximum(np.sqrt(sva**2 + svb**2), 1e-15)
            return z_mean.max(), z_var.max()

        zm, zv = compare(direct, matched)
        assert zm < 5.0 and zv < 5.0
        zm, zv = compare(bd, bm)
        assert zm < 5.0 and zv < 5.0

    def test_repair_psd(self):
        V = np.diag([1.0, -1e-9])
        W = repair_psd(V)
        assert np.linalg.eigvalsh(W).min() >= 1e-12 * 0.99
        with pytest.raises(NotPositiveDefinite):
            repair_psd(np.diag([1.0, -0.01]))


class TestMatchedRun:
    def test_baseline_curve_close_to_dmf(self, refine_setup):
        spec, sol, coeffs, act, loss = refine_setup
        m = 4000
        dmf_curve = dmf_metric_curve(sol, act, loss, n_paths=400_000)
        _, curves = matched_surrogate_run(sol, m, None, 0.0, act, loss,
                                          coeffs, seed=3)
        # one m-sample average of the characteristic population
        assert np.abs(curves["loss"] - dmf_curve).max() < 5 * np.sqrt(0.3 / m)

    def test_with_trajectory(self, refine_setup):
        spec, sol, coeffs, act, loss = refine_setup
        m = n = 400
        spec_n = two_class_spec(coupling=-0.5, ambient_dim=n, theta0_norm=0.1)
        means = realize_means(spec_n, 4)
        d = sample_draw(sol, act, loss, 77, rep=1)
        traj, curves = matched_surrogate_run(sol, m, d, 1.0, act, loss, coeffs,
                                             seed=4, means=means,
                                             with_q_side=True)
        assert traj.q.shape == (sol.L, n, 1)
        assert np.all(np.isfinite(traj.q)) and np.all(np.isfinite(traj.p))
        assert traj.meta["tag"] == "dmf-surrogate"

    def test_z_parity_exact(self, refine_setup):
        spec, sol, coeffs, act, loss = refine_setup
        a = matched_metric_curves(sol, act, loss, 600, [0.7], 200, 99)
        b = matched_metric_curves(sol, act, loss, 600, [-0.7], 200, 99)
        assert np.abs(np.sort(a[0.7], axis=0) - np.sort(b[-0.7], axis=0)).max() < 1e-12

    def test_mean_deviation_scaling(self, refine_setup):
        """Mean metric deviation from the mean-field curve is O(1/m):
        quadrupling m shrinks it by 4 within the 50 percent gate."""
        spec, sol, coeffs, act, loss = refine_setup
        dmf_curve = dmf_metric_curve(sol, act, loss, n_paths=2_000_000)
        ND = 8000
        dev, se = {}, {}
        for m in (500, 2000):
            per_z = matched_metric_curves(sol, act, loss, m, [0.0], ND, 7)
            dev[m] = per_z[0.0].mean(axis=0) - dmf_curve
            se[m] = per_z[0.0].std(axis=0, ddof=1) / np.sqrt(ND)
        w = 1.0 / (se[500]**2 + 16 * se[2000]**2)
        ratio = float((w * dev[500] * dev[2000]).sum()
                      / (w * dev[2000] * dev[2000]).sum())
        assert 2.0 < ratio < 6.0  # 4 within 50 percent


class TestIterativeScheme:
    def test_zero_rounds_identity(self, refine_setup):
        spec, sol, coeffs, act, loss = refine_setup
        n = m = 300
        spec_n = two_class_spec(coupling=-0.5, ambient_dim=n, theta0_norm=0.1)
        means = realize_means(spec_n, 8)
        ds = sample_dataset(spec_n, m, 8, means=means, assignment="fixed")
        atoms = GaussianAtoms.sample(ds, sol.L, 5, rep=0)
        traj = dmf_surrogate_realization(sol, ds, atoms, coeffs, act, loss)
        maps = make_maps(act, loss, coeffs, means[:, -1])
        out = iterate_refinement(traj, ds, 0.5, 0.0, atoms, maps, rounds=0)
        assert out is traj

    def test_round_from_mean_field_kernels_reproduces_skeleton(self, refine_setup):
        """With the mean-field kernels given and all atoms zeroed, one
        round returns the noiseless mean-field skeleton."""
        spec, sol, coeffs, act, loss = refine_setup
        n = m = 300
        spec_n = two_class_spec(coupling=-0.5, ambient_dim=n, theta0_norm=0.1)
        means = realize_means(spec_n, 8)
        ds = sample_dataset(spec_n, m, 8, means=means, assignment="fixed")
        zero_atoms = GaussianAtoms.zeros(ds, sol.L)
        skeleton = dmf_surrogate_realization(sol, ds, zero_atoms, coeffs, act, loss)
        maps = make_maps(act, loss, coeffs, means[:, -1])
        from gmixdyn.kernels import KernelSet, block_cholesky
        from gmixdyn.refine import _A_omega_bars, repair_psd as rp
        L = sol.L
        A_th = block_cholesky(rp(sol.V_theta))
        kset = KernelSet(
            V_theta=[sol.V_theta] * 2,
            V_omega=list(sol.V_omega_by_label),
            A_theta=[A_th] * 2,
            A_omega=_A_omega_bars(sol),
            B_theta=[0.5 * sol.B_theta, 0.5 * sol.B_theta],
            B_omega=[sol.B_omega, sol.B_omega],
            e=np.stack([sum(np.outer(means[:, k], [sol.alpha[k][l]])
                            for k in range(2)) for l in range(L)]),
            beta=[sol.beta[k][:, None] for k in range(2)],
            sigma=0.0, z=0.0, J=1, L=L,
            gtilde=np.zeros((n, L)),
            htilde=[np.zeros((len(ds.rows_of(k)), L)) for k in range(2)],
        )
        out = iterate_refinement(skeleton, ds, 0.0, 0.0, zero_atoms, maps,
                                 rounds=1, initial_kernels=kset)
        assert np.abs(out.p - skeleton.p).max() < 1e-8
        assert np.abs(out.q - skeleton.q).max() < 1e-8

    def test_one_round_deviation_scale(self, refine_setup):
        """Per-realization metric deviation from the mean-field curve is
        centered O(1/sqrt m): m * Var is O(1)."""
        spec, sol, coeffs, act, loss = refine_setup
        n = m = 500
        spec_n = two_class_spec(coupling=-0.5, ambient_dim=n, theta0_norm=0.1)
        means = realize_means(spec_n, 8)
        ds = sample_dataset(spec_n, m, 8, means=means, assignment="fixed")
        maps = make_maps(act, loss, coeffs, means[:, -1])
        dmf_curve = dmf_metric_curve(sol, act, loss, n_paths=400_000)
        R = 60
        curves = np.empty((R, sol.L))
        for r in range(R):
            atoms = GaussianAtoms.sample(ds, sol.L, 40, rep=r)
            traj = dmf_surrogate_realization(sol, ds, atoms, coeffs, act, loss)
            refined = iterate_refinement(traj, ds, 1e-3, 0.0, atoms, maps,
                                         rounds=1)
            curves[r] = training_metric(refined, ds, act, loss, "loss")
        dev = curves - dmf_curve
        assert np.abs(dev.mean(axis=0)).max() < 10 / np.sqrt(m)
        nv = m * dev.var(axis=0, ddof=1)
        assert np.all(nv < 5.0)  # O(1) normalized variance

    def test_multi_round_stability(self, refine_setup):
        """More than one refinement round stays finite and keeps the
        metric curve in a sane range (stability only; accuracy claims
        stop at one round)."""
        spec, sol, coeffs, act, loss = refine_setup
        n = m = 300
        spec_n = two_class_spec(coupling=-0.5, ambient_dim=n, theta0_norm=0.1)
        means = realize_means(spec_n, 8)
        ds = sample_dataset(spec_n, m, 8, means=means, assignment="fixed")
        atoms = GaussianAtoms.sample(ds, sol.L, 12, rep=0)
        traj = dmf_surrogate_realization(sol, ds, atoms, coeffs, act, loss)
        maps = make_maps(act, loss, coeffs, means[:, -1])
        out = iterate_refinement(traj, ds, 0.05, 0.0, atoms, maps, rounds=3)
        assert np.all(np.isfinite(out.p)) and np.all(np.isfinite(out.q))
        curve = training_metric(out, ds, act, loss, "loss")
        assert curve.max() < 10.0

    def test_kernel_dump(self, refine_setup, tmp_path):
        spec, sol, coeffs, act, loss = refine_setup
        n = m = 200
        spec_n = two_class_spec(coupling=-0.5, ambient_dim=n, theta0_norm=0.1)
        means = realize_means(spec_n, 8)
        ds = sample_dataset(spec_n, m, 8, means=means, assignment="fixed")
        atoms = GaussianAtoms.sample(ds, sol.L, 5, rep=0)
        traj = dmf_surrogate_realization(sol, ds, atoms, coeffs, act, loss)
        kset = kernel_set_from_realization(traj, ds, 0.5, 0.3, atoms)
        from gmixdyn.kernels import dump_kernels
        path = tmp_path / "kernels.csv"
        dump_kernels(kset, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "component,kernel,i,j,value"
        assert len(lines) == 1 + 6 * 2 * sol.L * sol.L

    def test_kernel_set_structure(self, refine_setup):
        spec, sol, coeffs, act, loss = refine_setup
        n = m = 300
        spec_n = two_class_spec(coupling=-0.5, ambient_dim=n, theta0_norm=0.1)
        means = realize_means(spec_n, 8)
        ds = sample_dataset(spec_n, m, 8, means=means, assignment="fixed")
        atoms = GaussianAtoms.sample(ds, sol.L, 5, rep=0)
        traj = dmf_surrogate_realization(sol, ds, atoms, coeffs, act, loss)
        kset = kernel_set_from_realization(traj, ds, 0.5, 0.3, atoms)
        for k in range(2):
            A = kset.A_theta[k]
            assert np.abs(A.T @ A - kset.V_theta[k]).max() < 1e-10
            assert np.abs(np.tril(kset.B_omega[k])).max() == 0.0
            assert np.abs(np.tril(kset.B_theta[k], -1)).max() == 0.0


def test_extrapolated_variance_helper():
    rng = np.random.default_rng(3)
    R, L, m = 20_000, 3, 100
    base = rng.normal(0, np.sqrt(0.5 / m), size=(R, L))
    extra = rng.normal(0, np.sqrt(0.25 / m), size=(R, L))
    c0 = base
    c1 = base + extra  # Var1 = 0.75/m -> 2 V0 - V1 = 0.25/m
    nv, se = extrapolated_normalized_variance(c0, c1, np.zeros(L), m)
    assert np.abs(nv - 0.25).max() < 4 * se.max()
