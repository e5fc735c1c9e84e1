"""Finite-size corrections on top of the mean-field solution.

Two routes to the same object:

* `iterate_refinement` is the literal fixed-point scheme: starting from a
  realization (Theta, Omega) of the mean-field surrogate, each round
  recomputes the kernel set (V, A, B, e, beta and the atom images
  g~, h~) from the current realization and re-solves the corrected
  sequential dynamics with those kernels frozen.  Atoms are sampled once
  and held fixed across rounds.

* `matched kernels` replace the recomputed (random) kernels by closures
  with identical first and second order joint statistics, driven by a
  small set of fluctuation parameters per draw:

      g_e(y), h_e(y)       standard normal L-vectors
      g_o(y, a)            L-vectors, cov nu(a, b) across a in Y*
      omega_e(l, y)        dual of one characteristic path driven by h_e

  with derived images g~_o(a) = Lam~^T sum_y A_om(y)^T g_o(y,a) and
  g~_e = Lam~^T sum_y A_om(y)^T g_e(y).  The double-primed kernels are

      V''_th    = V_th + (1/sqrt m)[ sum_a (al~(a) g~_o(a)^T + g~_o(a) al~(a)^T)
                                     + sqrt(gamma) (g~_e g~_e^T - Lam~^T V_om Lam~) ]
      V''_om(y) = V_om(y) + sqrt(rho/m) (om_e om_e^T - V_om(y)/rho)
      C''_om(y) = C_om(y) + sqrt(rho/m) (h_e om_e^T - C_om(y)/rho)
      C''_th(y) = C_th(y) - (1/sqrt m)[ sum_a g_o(y,a) al~(a)^T
                                        + sqrt(gamma) (g_e(y) g~_e^T - A_om(y) Lam~) ]
      beta''(y) = beta(y) - g~_o(y)/sqrt(m)
      al''(y)   = al(y) + sqrt(rho/m) (om_e(y) - al(y)/rho)

  every correction is centered, so the zero draw reproduces the
  mean-field baselines exactly.

The z coupling enters through fresh Gamma atoms exactly as in the
alternative dynamics (z Gamma A / sqrt m inside the B solves).  Gamma is
applied antithetically (each draw unit evaluates +Gamma and -Gamma), so
permutation-invariant statistics are exactly even in z under common
random numbers.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import rng as rngmod
from .errors import InsufficientReplications, NotPositiveDefinite
from .kernels import KernelSet, block_cholesky, block_triu, compute_B, compute_bias
from .mixture import cov_apply, fixed_counts, realize_means
from .perceptron import omega_map
from .surrogate import GaussianAtoms
from .trajectory import Trajectory
from .dmf import DmfSolution, characteristic_paths

PSD_CLIP = 1e-12
PSD_RAISE_REL = -1e-3  # relative to the top eigenvalue; see repair_psd


# ----------------------------------------------------------------------
# Fluctuation draws and matched kernels
# ----------------------------------------------------------------------

@dataclass
class FluctuationDraw:
    g_e: list      # per component, (L,)
    g_o: list      # per component, (L, K+1) columns over Y*
    h_e: list      # per component, (L,)
    omega_e: list  # per component, (L,)
    g_t_o: np.ndarray  # (L, K+1): g~_o(a) columns
    g_t_e: np.ndarray  # (L,)
    Gamma: list    # per component, (L, L)


def _nu_factor(nu):
    w, E = np.linalg.eigh(nu)
    w = np.clip(w, 0.0, None)
    return (np.sqrt(w)[:, None]) * E.T  # F with F^T F = nu, shape (K+1, K+1)


def _omega_e_path(sol: DmfSolution, activation, loss, h_e_rows):
    """Characteristic duals driven by h~_e = h_e A_theta; h_e_rows is
    (B, L) for B draws, returns per-component (B, L)."""
    out = []
    for k in range(sol.K):
        yk = sol.label_values[k]
        fn = lambda p, yv=yk: omega_map(p, yv, activation, loss)
        _, _, w = characteristic_paths(
            sol.A_theta, sol.beta[k], sol.B_omega, fn,
            h_e_rows[k].shape[0], rng=None, whiten=False, h=h_e_rows[k],
        )
        out.append(w)
    return out


def sample_draw(sol: DmfSolution, activation, loss, seed, rep=0) -> FluctuationDraw:
    """One fluctuation draw (all underlying vectors standard normal)."""
    K, L = sol.K, sol.L
    F = _nu_factor(sol.nu)
    g_e, g_o, h_e, Gm = [], [], [], []
    for k in range(K):
        gen = lambda atom: rngmod.stream(seed, rngmod.STREAM_REFINE, rep, atom, k)
        g_e.append(gen("g_e").standard_normal(L))
        Z = gen("g_o").standard_normal((L, K + 1))
        g_o.append(Z @ F)
        h_e.append(gen("h_e").standard_normal(L))
        Gm.append(gen("Gamma").standard_normal((L, L)))
    omega_e = [w[0] for w in _omega_e_path(sol, activation, loss,
                                           [h[None, :] for h in h_e])]
    g_t_o, g_t_e = _derived_images(sol, g_o, g_e)
    return FluctuationDraw(g_e=g_e, g_o=g_o, h_e=h_e, omega_e=omega_e,
                           g_t_o=g_t_o, g_t_e=g_t_e, Gamma=Gm)


def _A_omega_bars(sol: DmfSolution):
    return [block_cholesky(repair_psd(sol.V_omega_by_label[k]))
            for k in range(sol.K)]


def _derived_images(sol: DmfSolution, g_o, g_e):
    """g~_o(a) = Lam~^T sum_y A_om(y)^T g_o(y,a); g~_e likewise from g_e."""
    A_om = _A_omega_bars(sol)
    K, L = sol.K, sol.L
    g_t_o = np.zeros((L, K + 1))
    acc_e = np.zeros(L)
    for k in range(K):
        g_t_o += A_om[k].T @ g_o[k]
        acc_e += A_om[k].T @ g_e[k]
    return sol.Lambda_tilde.T @ g_t_o, sol.Lambda_tilde.T @ acc_e


def repair_psd(V):
    """Eigenvalue clipping at the jitter floor; raise on real violations.

    Near-null directions of a converged kernel leak to about -1/m under
    the centered perturbations (second-order eigenvalue perturbation), so
    the raise floor sits at bug-detection scale: anything above
    -1e-3 * lambda_max is graceful degeneracy and is clipped."""
    V = 0.5 * (V + V.T)
    w, E = np.linalg.eigh(V)
    mn = w.min()
    if mn <= PSD_RAISE_REL * max(1.0, w.max() if w.size else 1.0):
        raise NotPositiveDefinite(
            f"perturbed kernel min eigenvalue {mn:.3e} below repair window",
            min_eig=mn,
        )
    if mn <= PSD_CLIP:
        w = np.clip(w, PSD_CLIP, None)
        return E @ (w[:, None] * E.T)
    return V


@dataclass
class MatchedKernels:
    V_theta_pp: np.ndarray
    V_omega_pp: list
    C_omega_pp: list
    C_theta_pp: list
    beta_pp: list
    alpha_pp: list
    A_theta_pp: np.ndarray
    A_omega_pp: list
    m: int
    sol: DmfSolution


def _z_shift_operator(sol: DmfSolution, Gamma):
    """T = (sum_y (Gamma_y A_omega(y))_u) Lam~: the first-order response of
    the iterates to the z coupling, delta Theta_z = -(z/sqrt m) theta~ S Lam~."""
    A_om_bar = _A_omega_bars(sol)
    S = sum(np.triu(Gamma[k] @ A_om_bar[k]) for k in range(sol.K))
    return S @ sol.Lambda_tilde


def build_matched_kernels(sol: DmfSolution, m, draw: FluctuationDraw = None,
                          z=0.0) -> MatchedKernels:
    """Double-primed kernels for one draw; draw=None keeps the baselines.

    At z != 0 the field kernel and the biases carry the first-order
    response to the z coupling of the theta side:

        V''_theta -= (z/sqrt m)(A_theta^T T + T^T A_theta)
        beta''(y) -= (z/sqrt m) T^T A_theta^{-T} beta(y),   T = S Lam~.
    """
    K, L = sol.K, sol.L
    gamma = sol.gamma
    sm = np.sqrt(m)
    LamT_Vom_Lam = sol.Lambda_tilde.T @ sol.V_omega @ sol.Lambda_tilde
    if draw is None:
        V_th = sol.V_theta.copy()
        V_om = [sol.V_omega_by_label[k].copy() for k in range(K)]
        C_om = [sol.C_omega_by_label[k].copy() for k in range(K)]
        C_th = [-gamma * _A_omega_bars(sol)[k] @ sol.Lambda_tilde for k in range(K)]
        beta = [sol.beta[k].copy() for k in range(K)]
        alpha = [sol.alpha[k].copy() for k in range(K)]
    else:
        first = np.zeros((L, L))
        for a in range(K + 1):
            first += np.outer(sol.alpha_tilde[a], draw.g_t_o[:, a])
        first += first.T.copy()
        V_th = sol.V_theta + (first + np.sqrt(gamma) * (
            np.outer(draw.g_t_e, draw.g_t_e) - LamT_Vom_Lam)) / sm
        A_om_bar = _A_omega_bars(sol)
        V_om, C_om, C_th, beta, alpha = [], [], [], [], []
        for k in range(K):
            rho = sol.rho[k]
            c = np.sqrt(rho / m)
            we = draw.omega_e[k]
            V_om.append(sol.V_omega_by_label[k]
                        + c * (np.outer(we, we) - sol.V_omega_by_label[k] / rho))
            C_om.append(sol.C_omega_by_label[k]
                        + c * (np.outer(draw.h_e[k], we) - sol.C_omega_by_label[k] / rho))
            Cth_bar = -gamma * A_om_bar[k] @ sol.Lambda_tilde
            first_k = np.zeros((L, L))
            for a in range(K + 1):
                first_k += np.outer(draw.g_o[k][:, a], sol.alpha_tilde[a])
            C_th.append(Cth_bar - (first_k + np.sqrt(gamma) * (
                np.outer(draw.g_e[k], draw.g_t_e) - A_om_bar[k] @ sol.Lambda_tilde)) / sm)
            beta.append(sol.beta[k] - draw.g_t_o[:, k] / sm)
            alpha.append(sol.alpha[k] + c * (we - sol.alpha[k] / rho))
        if z != 0.0:
            # completed square keeps the shifted kernel PSD:
            # V - (z/sqrt m)(A^T T + T^T A) + (z^2/m) T^T T = (A - zT/sqrt m)^T (A - zT/sqrt m)
            T = _z_shift_operator(sol, draw.Gamma)
            V_th = V_th - (z / sm) * (sol.A_theta.T @ T + T.T @ sol.A_theta) \
                + (z * z / m) * (T.T @ T)
            for k in range(K):
                bt = sla.solve_triangular(sol.A_theta.T, sol.beta[k], lower=True)
                beta[k] = beta[k] - (z / sm) * (T.T @ bt)
    V_th = repair_psd(V_th)
    V_om = [repair_psd(V) for V in V_om]
    return MatchedKernels(
        V_theta_pp=V_th, V_omega_pp=V_om, C_omega_pp=C_om, C_theta_pp=C_th,
        beta_pp=beta, alpha_pp=alpha,
        A_theta_pp=block_cholesky(V_th),
        A_omega_pp=[block_cholesky(V) for V in V_om],
        m=m, sol=sol,
    )


def _stable_p_side(mk: MatchedKernels, activation, loss, z, H_pool, Gamma,
                   jitter=1e-12):
    """p side of the corrected dynamics in the stable parametrization.

    The memory term is evaluated as (Omega A_omega^{-1}) N with A_omega
    the running factor of the simulated duals' own Gram: that product is
    bounded by construction (quasi-orthogonalized duals times O(1/sqrt m)
    couplings), whereas freezing B'' = A''^{-1}(...) amplifies draw noise
    through the near-null directions of a converged kernel.  N carries
    the draw's matched coupling C''_theta(y) plus the z Gamma^T A''_theta
    term.  Returns (p, w, labels) stacked over components."""
    sol = mk.sol
    K, L, m = sol.K, sol.L, mk.m
    sm = np.sqrt(m)
    p_parts, w_parts, lab_parts = [], [], []
    for k in range(K):
        yk = sol.label_values[k]
        Gm = Gamma[k] if Gamma is not None else np.zeros((L, L))
        N = np.triu(mk.C_theta_pp[k] + z * (Gm.T @ mk.A_theta_pp) / sm, 1)
        H = H_pool[k]
        mk_count = H.shape[0]
        htil = H @ mk.A_theta_pp
        P = np.empty((mk_count, L))
        W = np.empty((mk_count, L))
        Otil = np.empty((mk_count, L))
        amat = np.zeros((L, L))
        for l in range(L):
            pl = mk.beta_pp[k][l] + htil[:, l]
            if l:
                pl = pl + Otil[:, :l] @ N[:l, l]
            P[:, l] = pl
            wl = omega_map(pl, yk, activation, loss)
            W[:, l] = wl
            # extend the running dual factor and quasi-orthogonal columns
            vcol = (W[:, : l + 1].T @ wl) / m
            a = np.empty(l + 1)
            for mu in range(l):
                a[mu] = (vcol[mu] - amat[:mu, mu] @ a[:mu]) / amat[mu, mu]
            s = vcol[l] - a[:l] @ a[:l]
            a[l] = np.sqrt(max(s, jitter))
            amat[: l + 1, l] = a
            resid = wl - Otil[:, :l] @ a[:l]
            Otil[:, l] = resid / a[l]
        p_parts.append(P)
        w_parts.append(W)
        lab_parts.append(np.full(mk_count, yk))
    return (np.concatenate(p_parts), np.concatenate(w_parts),
            np.concatenate(lab_parts))


def matched_surrogate_run(sol: DmfSolution, m, draw, z, activation, loss,
                          coeffs, seed, rep=0, means=None, kinds=("loss",),
                          with_q_side=False, mk: MatchedKernels = None):
    """Run the corrected dynamics with the double-primed kernels in place
    of the mean-field ones.  Returns (trajectory or None, curves).

    The p side simulates all m samples with fixed per-component counts;
    the per-sample field atoms are conditioned so their empirical mean
    row equals h_e(y)/sqrt(m_y), preserving the joint law of kernel
    fluctuations and sample noise.  The q/theta side (optional) runs the
    algorithm against the matched couplings with its own running-iterate
    orthogonalization and the conditional g~ field."""
    if mk is None:
        mk = build_matched_kernels(sol, m, draw, z=z)
    K, L = sol.K, sol.L
    sm = np.sqrt(m)
    counts = fixed_counts(sol.rho, m)
    gen = lambda atom, k: rngmod.stream(seed, rngmod.STREAM_REFINE, rep, atom, k)

    H_pool = []
    for k in range(K):
        H = gen("H_pool", k).standard_normal((counts[k], L))
        H -= H.mean(axis=0, keepdims=True)
        if draw is not None:
            H += draw.h_e[k][None, :] / np.sqrt(counts[k])
        H_pool.append(H)
    Gamma = draw.Gamma if draw is not None else None
    p_all, w_all, labels = _stable_p_side(mk, activation, loss, z, H_pool, Gamma)

    from .perceptron import metric_from_p
    curves = {kind: metric_from_p([p_all[:, l] for l in range(L)], labels,
                                  activation, loss, kind=kind)
              for kind in kinds}

    traj = None
    if with_q_side:
        if means is None:
            raise ValueError("q side needs realized means")
        n = means.shape[0]
        V_om_tot = repair_psd(sum(mk.V_omega_pp))
        A_tot = block_cholesky(V_om_tot)
        Z = gen("G_pool", 0).standard_normal((n, L))
        Gt = Z @ A_tot  # rows iid N(0, V''_omega)
        nu_pinv = np.linalg.pinv(sol.nu)
        Tmat = np.zeros((L, K + 1))
        if draw is not None:
            for k in range(K):
                Tmat += mk.A_omega_pp[k].T @ draw.g_o[k]
        Gt = Gt - means @ nu_pinv @ (means.T @ Gt) + means @ nu_pinv @ Tmat.T
        e_pp = np.zeros((n, L))
        for k in range(K):
            e_pp += np.outer(means[:, k], mk.alpha_pp[k])
        # summed matched coupling for the theta side
        M_sum = np.zeros((L, L))
        for k in range(K):
            Gm = draw.Gamma[k] if draw is not None else np.zeros((L, L))
            M_sum += np.triu(mk.C_omega_pp[k] + z * (Gm @ mk.A_omega_pp[k]) / sm)
        theta0 = means[:, -1]
        q = np.zeros((L, n, 1))
        th = np.zeros((L, n, 1))
        Ttil = np.empty((n, L))
        amat = np.zeros((L, L))
        for l in range(L):
            tl = coeffs.lam[l] * theta0
            for mu in range(l):
                c = coeffs.Lambda[mu, l]
                if c:
                    tl = tl - c * q[mu, :, 0]
            th[l, :, 0] = tl
            vcol = th[: l + 1, :, 0] @ tl
            a = np.empty(l + 1)
            for mu in range(l):
                a[mu] = (vcol[mu] - amat[:mu, mu] @ a[:mu]) / amat[mu, mu]
            s = vcol[l] - a[:l] @ a[:l]
            a[l] = np.sqrt(max(s, 1e-12))
            amat[: l + 1, l] = a
            Ttil[:, l] = (tl - Ttil[:, :l] @ a[:l]) / a[l]
            ql = e_pp[:, l] + Gt[:, l] / sm + Ttil[:, : l + 1] @ M_sum[: l + 1, l]
            q[l, :, 0] = ql
        traj = Trajectory(
            q=q, p=p_all.T[:, :, None], theta=th, omega=w_all.T[:, :, None],
            meta={"m": m, "n": n, "J": 1, "L": L, "seed": seed,
                  "tag": "dmf-surrogate", "z": z},
        )
    return traj, curves


def matched_metric_curves(sol: DmfSolution, activation, loss, m, z_values,
                          n_draws, seed, kind="loss", chunk_pairs=64,
                          dtype=np.float64):
    """Per-draw metric curves of the matched surrogate at each z, with
    common random numbers across z and antithetic Gamma pairs: rows
    (2r, 2r+1) share every atom and differ only in the sign of Gamma.
    Returns {z: (n_draws, L) float64}."""
    K, L = sol.K, sol.L
    gamma = sol.gamma
    sm = np.sqrt(m)
    counts = fixed_counts(sol.rho, m)
    F = _nu_factor(sol.nu)
    A_om_bar = _A_omega_bars(sol)
    AomLam = [A_om_bar[k] @ sol.Lambda_tilde for k in range(K)]
    LamT_Vom_Lam = sol.Lambda_tilde.T @ sol.V_omega @ sol.Lambda_tilde
    n_pairs = (n_draws + 1) // 2
    out = {z: np.empty((n_draws, L)) for z in z_values}

    done = 0
    pair_index = 0
    while done < n_draws:
        c = min(chunk_pairs, n_pairs - pair_index)
        gen = lambda atom, k: rngmod.fast_stream(seed, rngmod.STREAM_REFINE,
                                                 pair_index, atom, k)
        g_e = [gen("g_e", k).standard_normal((c, L)) for k in range(K)]
        g_o = [np.einsum("clr,ra->cla",
                         gen("g_o", k).standard_normal((c, L, K + 1)), F)
               for k in range(K)]
        Gm = [gen("Gamma", k).standard_normal((c, L, L)) for k in range(K)]

        g_t_o = np.zeros((c, L, K + 1))
        g_t_e = np.zeros((c, L))
        for k in range(K):
            g_t_o += np.einsum("lj,cja->cla", sol.Lambda_tilde.T @ A_om_bar[k].T,
                               g_o[k])
            g_t_e += g_e[k] @ (AomLam[k])  # rows: g_e A_om Lam~
        # V''_theta per draw, z-independent part
        first = np.zeros((c, L, L))
        for a in range(K + 1):
            first += np.einsum("l,cj->clj", sol.alpha_tilde[a], g_t_o[:, :, a])
        first += np.swapaxes(first, 1, 2).copy()
        V_th0 = sol.V_theta[None] + (first + np.sqrt(gamma) * (
            np.einsum("cl,cj->clj", g_t_e, g_t_e) - LamT_Vom_Lam[None])) / sm
        # first-order response of the theta side to the z coupling
        S_c = sum(np.triu(np.ones((L, L)))[None] * (Gm[k] @ A_om_bar[k])
                  for k in range(K))
        T_c = S_c @ sol.Lambda_tilde
        AT = np.einsum("ki,ckj->cij", sol.A_theta, T_c)
        TT = np.einsum("cki,ckj->cij", T_c, T_c)
        bt = [sla.solve_triangular(sol.A_theta.T, sol.beta[k], lower=True)
              for k in range(K)]
        Tb = [np.einsum("cki,k->ci", T_c, bt[k]) for k in range(K)]
        C_th, beta0 = [], []
        for k in range(K):
            first_k = np.einsum("cla,aj->clj", g_o[k],
                                np.stack(sol.alpha_tilde, axis=0))
            C_th_k = (-gamma * AomLam[k])[None] - (first_k + np.sqrt(gamma) * (
                np.einsum("cl,cj->clj", g_e[k], g_t_e) - AomLam[k][None])) / sm
            C_th.append(C_th_k)
            beta0.append(sol.beta[k][None] - g_t_o[:, :, k] / sm)
        strict_mask = np.triu(np.ones((L, L)), 1)

        H_pool = [gen("H_pool", k).standard_normal((c, counts[k], L), dtype=dtype)
                  for k in range(K)]

        for z in z_values:
            members = (1.0,) if z == 0.0 else (1.0, -1.0)
            curves_members = []
            for sgn in members:
                zz = z * sgn
                V = V_th0
                if zz != 0.0:
                    V = V - (zz / sm) * (AT + np.swapaxes(AT, 1, 2)) \
                        + (z * z / m) * TT
                A_th = _batched_upper_chol(V)
                curve = np.zeros((c, L))
                for k in range(K):
                    yk = sol.label_values[k]
                    beta_k = beta0[k] if zz == 0.0 else beta0[k] - (zz / sm) * Tb[k]
                    htil = np.einsum("cil,clj->cij", H_pool[k],
                                     A_th.astype(dtype))
                    N = C_th[k] + (zz / sm) * np.einsum("ckl,ckj->clj", Gm[k], A_th)
                    N = (N * strict_mask[None]).astype(dtype)
                    mk_count = counts[k]
                    P = np.empty((c, mk_count, L), dtype=dtype)
                    W = np.empty((c, mk_count, L), dtype=dtype)
                    Otil = np.empty((c, mk_count, L), dtype=dtype)
                    amat = np.zeros((c, L, L))
                    bk = beta_k.astype(dtype)
                    for l in range(L):
                        pl = bk[:, l][:, None] + htil[:, :, l]
                        if l:
                            pl = pl + np.einsum("cim,cm->ci", Otil[:, :, :l],
                                                N[:, :l, l])
                        P[:, :, l] = pl
                        wl = omega_map(pl, yk, activation, loss)
                        W[:, :, l] = wl
                        vcol = np.einsum("cik,ci->ck",
                                         W[:, :, : l + 1].astype(np.float64),
                                         wl.astype(np.float64)) / m
                        a = np.empty((c, l + 1))
                        for mu in range(l):
                            a[:, mu] = (vcol[:, mu] - np.einsum(
                                "ck,ck->c", amat[:, :mu, mu], a[:, :mu])
                            ) / amat[:, mu, mu]
                        s = vcol[:, l] - np.einsum("ck,ck->c", a[:, :l], a[:, :l])
                        a[:, l] = np.sqrt(np.maximum(s, PSD_CLIP))
                        amat[:, : l + 1, l] = a
                        resid = wl - np.einsum("cik,ck->ci", Otil[:, :, :l],
                                               a[:, :l].astype(dtype))
                        Otil[:, :, l] = resid / a[:, l][:, None].astype(dtype)
                    f = activation.value(P.astype(np.float64))
                    if kind == "loss":
                        curve += loss.value(f, yk).sum(axis=1) / m
                    elif kind == "zero_one":
                        from .perceptron import decision_statistic
                        stat = decision_statistic(f, activation)
                        curve += np.sum(stat * yk <= 0, axis=1) / m
                    else:
                        raise ValueError(f"unknown metric kind {kind!r}")
                curves_members.append(curve)
            if len(curves_members) == 1:
                curves_members.append(curves_members[0])
            rows = np.empty((2 * c, L))
            rows[0::2] = curves_members[0]
            rows[1::2] = curves_members[1]
            take = min(2 * c, n_draws - done)
            out[z][done:done + take] = rows[:take]
        done += min(2 * c, n_draws - done)
        pair_index += c
    return out


def _batched_upper_chol(V):
    """Upper factors A with A^T A = V for a (B, L, L) stack, with the
    eigenvalue-clip repair policy on failures."""
    try:
        return np.swapaxes(np.linalg.cholesky(V), -1, -2)
    except np.linalg.LinAlgError:
        out = np.empty_like(V)
        for i in range(V.shape[0]):
            out[i] = block_cholesky(repair_psd(V[i]))
        return out


# ----------------------------------------------------------------------
# Algorithm-style iterative refinement on a realization
# ----------------------------------------------------------------------

def dmf_surrogate_realization(sol: DmfSolution, dataset, atoms: GaussianAtoms,
                              coeffs, activation, loss) -> Trajectory:
    """One realization of the mean-field surrogate in the ambient space:
    per-sample characteristic paths driven by the H atoms and
    Theta = -sum_a x_hat(a) alpha~(a)^T - (1/sqrt m) G~ Lam~ with
    G~ = sum_y G_y A_omega(y)."""
    m, n, L, K = dataset.m, dataset.n, sol.L, sol.K
    sm = np.sqrt(m)
    means = dataset.means_realized
    A_om_bar = _A_omega_bars(sol)
    Gt = np.zeros((n, L))
    for k in range(K):
        Gt += atoms.G[k] @ A_om_bar[k]
    Theta = -sum(np.outer(means[:, a if a < K else -1], sol.alpha_tilde[a])
                 for a in range(K + 1))
    Theta = Theta - (Gt @ sol.Lambda_tilde) / sm
    P = np.zeros((m, L))
    W = np.zeros((m, L))
    for k in range(K):
        rows = dataset.rows_of(k)
        yk = sol.label_values[k]
        htil = atoms.H[k] @ sol.A_theta
        for l in range(L):
            pl = sol.beta[k][l] + htil[:, l]
            if l:
                pl = pl + W[rows, :l] @ sol.B_omega[:l, l]
            P[rows, l] = pl
            W[rows, l] = omega_map(pl, yk, activation, loss)
    E = np.zeros((n, L))
    for k in range(K):
        E += np.outer(means[:, k], sol.alpha[k])
    Q = E + Gt / sm + Theta @ sol.B_theta
    return Trajectory(
        q=Q.T[:, :, None], p=P.T[:, :, None],
        theta=Theta.T[:, :, None], omega=W.T[:, :, None],
        meta={"m": m, "n": n, "J": 1, "L": L, "seed": dataset.seed,
              "tag": "dmf-surrogate"},
    )


def kernel_set_from_realization(traj: Trajectory, dataset, sigma, z,
                                atoms: GaussianAtoms) -> KernelSet:
    """Kernel set of a realization: overlaps, factors, B matrices, bias
    terms, and the atom images g~ (n, L*J) and h~ per component."""
    from .kernels import compute_overlaps
    from .mixture import cov_half_apply

    J = traj.J
    m = traj.m
    V_th, V_om = compute_overlaps(traj.theta, traj.omega, dataset, sigma)
    A_th = [block_cholesky(V, J=J) for V in V_th]
    A_om = [block_cholesky(V, J=J) for V in V_om]
    Theta = np.concatenate([traj.theta[l] for l in range(traj.L)], axis=1)
    B_th, B_om = [], []
    gtilde = np.zeros((traj.n, traj.L * J))
    htilde = []
    for k, comp in enumerate(dataset.spec.components):
        rows = dataset.rows_of(k)
        Om_k = np.concatenate([traj.omega[l][rows] for l in range(traj.L)], axis=1)
        bt, bo = compute_B(A_th[k], A_om[k], atoms.G[k], atoms.H[k],
                           atoms.W[k],
                           atoms.Gamma[k] if atoms.Gamma is not None else
                           np.zeros_like(atoms.W[k]),
                           Om_k, Theta, sigma, z, m, comp=comp, J=J)
        B_th.append(bt)
        B_om.append(bo)
        gtilde += cov_half_apply(comp, atoms.G[k]) @ A_om[k]
        htilde.append(atoms.H[k] @ A_th[k])
    e, beta = compute_bias(traj.theta, traj.omega, dataset)
    return KernelSet(V_theta=V_th, V_omega=V_om, A_theta=A_th, A_omega=A_om,
                     B_theta=B_th, B_omega=B_om, e=e, beta=beta,
                     sigma=sigma, z=z, J=J, L=traj.L,
                     gtilde=gtilde, htilde=htilde)


def run_with_kernels(kset: KernelSet, dataset, maps, L) -> Trajectory:
    """Corrected sequential dynamics with a frozen kernel set: the new
    trajectory solves the surrogate equations whose kernels came from the
    previous round's realization."""
    n, m = dataset.n, dataset.m
    J = kset.J
    sm = np.sqrt(m)
    y = dataset.labels
    q = np.zeros((L, n, J))
    p = np.zeros((L, m, J))
    theta = np.zeros((L, n, J))
    omega = np.zeros((L, m, J))
    for l in range(L):
        theta[l] = maps.theta_map(q[:l], p[:l], y, l)
        pl = np.zeros((m, J))
        for k in range(dataset.spec.n_components):
            rows = dataset.rows_of(k)
            pk = kset.beta[k][l][None, :] + kset.htilde[k][:, l * J:(l + 1) * J]
            for mu in range(l):
                pk = pk + omega[mu][rows] @ kset.B_omega[k][mu * J:(mu + 1) * J,
                                                            l * J:(l + 1) * J]
            pl[rows] = pk
        p[l] = pl
        omega[l] = maps.omega_map(p[: l + 1], q[:l], y, l)
        ql = kset.e[l] + kset.gtilde[:, l * J:(l + 1) * J] / sm
        for k, comp in enumerate(dataset.spec.components):
            for mu in range(l + 1):
                ql = ql + cov_apply(comp, theta[mu]) @ kset.B_theta[k][
                    mu * J:(mu + 1) * J, l * J:(l + 1) * J]
        q[l] = ql
    return Trajectory(q=q, p=p, theta=theta, omega=omega,
                      meta={"m": m, "n": n, "J": J, "L": L,
                            "seed": dataset.seed, "tag": "dmf-surrogate"})


def iterate_refinement(traj: Trajectory, dataset, sigma, z,
                       atoms: GaussianAtoms, maps, rounds, tol=None,
                       metric_fn=None, initial_kernels=None):
    """Fixed-point rounds: kernels from the current realization, then the
    corrected dynamics re-solved with them (atoms held fixed throughout).
    initial_kernels overrides the round-1 kernel set, e.g. to start from
    the mean-field kernels themselves.  Stops after `rounds` or when the
    metric curve moves less than tol."""
    cur = traj
    prev_curve = metric_fn(cur) if (metric_fn is not None and tol is not None) else None
    for r in range(rounds):
        if r == 0 and initial_kernels is not None:
            kset = initial_kernels
        else:
            kset = kernel_set_from_realization(cur, dataset, sigma, z, atoms)
        cur = run_with_kernels(kset, dataset, maps, traj.L)
        if prev_curve is not None:
            curve = metric_fn(cur)
            if np.max(np.abs(curve - prev_curve)) < tol:
                return cur
            prev_curve = curve
    return cur


# ----------------------------------------------------------------------
# Statistics of deviation curves
# ----------------------------------------------------------------------

def z_extrapolate(h0, h1, z1=1.0):
    """Analytic continuation to z^2 = -1 assuming H quadratic in z^2:
    H(0) + (H(0) - H(z1))/z1^2; the default z1 = 1 gives 2 H(0) - H(1)."""
    h0 = np.asarray(h0, dtype=float)
    h1 = np.asarray(h1, dtype=float)
    return h0 + (h0 - h1) / (z1 * z1)


def normalized_variance(curves, dmf_curve, m):
    """m times the unbiased sample variance of metric(l) - dmf(l) across
    replications, plus the standard error of that variance estimate."""
    curves = np.asarray(curves, dtype=float)
    R = curves.shape[0]
    if R < 2:
        raise InsufficientReplications(f"{R} replications, need >= 2")
    dev = curves - np.asarray(dmf_curve, dtype=float)[None, :]
    v = dev.var(axis=0, ddof=1)
    centered = dev - dev.mean(axis=0, keepdims=True)
    m4 = np.mean(centered**4, axis=0)
    var_of_var = (m4 - (R - 3) / (R - 1) * v**2) / R
    return m * v, m * np.sqrt(np.clip(var_of_var, 0.0, None))


def extrapolated_normalized_variance(curves0, curves1, dmf_curve, m, unit=2):
    """2 V(0) - V(1) of the normalized variance, with the standard error
    computed over independent draw units (antithetic pairs by default)."""
    nv0, _ = normalized_variance(curves0, dmf_curve, m)
    nv1, _ = normalized_variance(curves1, dmf_curve, m)
    pred = z_extrapolate(nv0, nv1)

    def unit_influence(curves):
        dev = np.asarray(curves, dtype=float) - np.asarray(dmf_curve)[None, :]
        centered = dev - dev.mean(axis=0, keepdims=True)
        sq = centered**2
        R = (sq.shape[0] // unit) * unit
        return sq[:R].reshape(-1, unit, sq.shape[1]).mean(axis=1)

    u = 2.0 * unit_influence(curves0) - unit_influence(curves1)
    se = m * u.std(axis=0, ddof=1) / np.sqrt(u.shape[0])
    return pred, se
