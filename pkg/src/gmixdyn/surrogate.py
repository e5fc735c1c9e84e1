"""Alternative and perturbed-original processes.

Both processes are solved as zeros of (process + bias) in the same
sequential order theta(l) -> p(l) -> omega(l) -> q(l) as the original
dynamics; every kernel block needed at a substep depends only on parts
already computed, so the Cholesky factors grow incrementally alongside
the trajectory.

The alternative dynamics read

    q(l) = e(l) + g~(l)/sqrt(m) + sum_zeta sum_{mu<=l} R(zeta) theta(mu) b_theta(mu,l;zeta)
    p(l) = [ 1 beta(l,zeta) + h~_zeta(l) + sum_{mu<l} omega_zeta(mu) b_omega(mu,l;zeta) ]

with g~(l) = sum_zeta sum_mu R^(1/2)(zeta) g_zeta(mu) a_omega(mu,l;zeta),
h~_zeta(l) = sum_mu h_zeta(mu) a_theta(mu,l;zeta) and the B blocks of
kernels.compute_B.  The 1/sqrt(m) scaling of g~ is applied everywhere
(consistent with V_omega = (1/m) E[Omega^T Omega]).

The perturbed-original dynamics add to the true data response a sigma-
scaled Gaussian and a sqrt((1+z^2)/m)-scaled coupling through the same
Gamma atoms.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng as rngmod
from .errors import NonFiniteValue
from .kernels import BlockCholesky, block_cholesky, block_triu
from .mixture import cov_apply, cov_half_apply
from .trajectory import DynamicsMaps, Trajectory, _check_finite


@dataclass
class GaussianAtoms:
    """Standard-normal driving matrices, one independent stream per
    (atom name, component).  Gamma and W are shared between the q-side
    and p-side formulas (transposed on the p side).  Gamma=None is a
    test hook that drops the z-coupling entirely."""

    G: list          # per component, (n, L*J)
    H: list          # per component, (m_zeta, L*J)
    W: list          # per component, (L*J, L*J)
    Gamma: Optional[list]  # per component, (L*J, L*J), or None
    U: list          # per component, (n, L*J)
    V: np.ndarray    # (m, L*J)

    @staticmethod
    def sample(dataset, L, master_seed, rep=0, stream_id=rngmod.STREAM_ALTERNATIVE, J=1):
        n, m = dataset.n, dataset.m
        K = dataset.spec.n_components
        LJ = L * J

        def gen(atom, k, shape):
            return rngmod.stream(master_seed, stream_id, rep, atom, k).standard_normal(shape)

        G = [gen("G", k, (n, LJ)) for k in range(K)]
        H = [gen("H", k, (len(dataset.rows_of(k)), LJ)) for k in range(K)]
        W = [gen("W", k, (LJ, LJ)) for k in range(K)]
        Gamma = [gen("Gamma", k, (LJ, LJ)) for k in range(K)]
        U = [gen("U", k, (n, LJ)) for k in range(K)]
        V = gen("V", 0, (m, LJ))
        return GaussianAtoms(G=G, H=H, W=W, Gamma=Gamma, U=U, V=V)

    @staticmethod
    def zeros(dataset, L, J=1):
        n, m = dataset.n, dataset.m
        K = dataset.spec.n_components
        LJ = L * J
        return GaussianAtoms(
            G=[np.zeros((n, LJ)) for _ in range(K)],
            H=[np.zeros((len(dataset.rows_of(k)), LJ)) for k in range(K)],
            W=[np.zeros((LJ, LJ)) for _ in range(K)],
            Gamma=[np.zeros((LJ, LJ)) for _ in range(K)],
            U=[np.zeros((n, LJ)) for _ in range(K)],
            V=np.zeros((m, LJ)),
        )


class _SeqState:
    """Incremental per-component kernel state for the sequential solvers."""

    def __init__(self, dataset, L, J, sigma, diag_signs=None):
        K = dataset.spec.n_components
        self.J = J
        self.sigma2 = sigma * sigma
        self.fac_th = [BlockCholesky(J=J, L_max=L, diag_signs=diag_signs) for _ in range(K)]
        self.fac_om = [BlockCholesky(J=J, L_max=L, diag_signs=diag_signs) for _ in range(K)]
        n = dataset.n
        self.Theta = np.zeros((n, 0))
        self.RTheta = [np.zeros((n, 0)) for _ in range(K)]
        self.Omega_c = [np.zeros((len(dataset.rows_of(k)), 0)) for k in range(K)]

    def push_theta(self, dataset, th):
        """After theta(l): grow Theta, R Theta and the A_theta factors."""
        J, s2 = self.J, self.sigma2
        self.Theta = np.concatenate([self.Theta, th], axis=1)
        l = self.fac_th[0].L
        for k, comp in enumerate(dataset.spec.components):
            Rth = cov_apply(comp, th)
            self.RTheta[k] = np.concatenate([self.RTheta[k], Rth], axis=1)
            col = self.Theta.T @ Rth
            col[l * J:(l + 1) * J] += s2 * np.eye(J)
            self.fac_th[k].extend(col)

    def push_omega(self, dataset, om, m):
        """After omega(l): grow the per-component Omega and A_omega."""
        J, s2 = self.J, self.sigma2
        l = self.fac_om[0].L
        for k in range(dataset.spec.n_components):
            om_k = om[dataset.rows_of(k)]
            self.Omega_c[k] = np.concatenate([self.Omega_c[k], om_k], axis=1)
            col = (self.Omega_c[k].T @ om_k) / m
            col[l * J:(l + 1) * J] += s2 * np.eye(J)
            self.fac_om[k].extend(col)


def run_alternative(dataset, maps: DynamicsMaps, sigma, z, atoms: GaussianAtoms,
                    L, diag_signs=None) -> Trajectory:
    """Solve the alternative process sequentially."""
    n, m = dataset.n, dataset.m
    J = maps.J
    K = dataset.spec.n_components
    y = dataset.labels
    sm = np.sqrt(m)
    st = _SeqState(dataset, L, J, sigma, diag_signs=diag_signs)
    RhalfG = [cov_half_apply(comp, atoms.G[k])
              for k, comp in enumerate(dataset.spec.components)]
    q = np.zeros((L, n, J))
    p = np.zeros((L, m, J))
    theta = np.zeros((L, n, J))
    omega = np.zeros((L, m, J))
    means = dataset.means_realized

    for l in range(L):
        th = maps.theta_map(q[:l], p[:l], y, l)
        theta[l] = th
        _check_finite(th, l, "theta")
        st.push_theta(dataset, th)

        pl = np.zeros((m, J))
        for k, comp in enumerate(dataset.spec.components):
            rows = dataset.rows_of(k)
            acol = st.fac_th[k].matrix[:, l * J:(l + 1) * J]
            beta = means[:, k] @ th  # (J,)
            pk = beta[None, :] + atoms.H[k][:, : (l + 1) * J] @ acol
            if l:
                S = atoms.G[k][:, : l * J].T @ cov_half_apply(comp, th)
                S += sigma * atoms.W[k].T[: l * J, l * J:(l + 1) * J]
                if atoms.Gamma is not None and z != 0.0:
                    S += z * atoms.Gamma[k].T[: l * J, : (l + 1) * J] @ acol
                bcol = st.fac_om[k].solve_leading(S / sm, upto=l)
                pk += st.Omega_c[k] @ bcol
            pl[rows] = pk
        p[l] = pl
        _check_finite(pl, l, "p")

        om = maps.omega_map(p[: l + 1], q[:l], y, l)
        omega[l] = om
        _check_finite(om, l, "omega")
        st.push_omega(dataset, om, m)

        ql = np.zeros((n, J))
        for k, comp in enumerate(dataset.spec.components):
            aocol = st.fac_om[k].matrix[:, l * J:(l + 1) * J]
            ql += (RhalfG[k][:, : (l + 1) * J] @ aocol) / sm
            om_k = omega[l][dataset.rows_of(k)]
            ql += np.outer(means[:, k], om_k.sum(axis=0) / m)
            T = (atoms.H[k][:, : (l + 1) * J].T @ om_k) / m
            T += sigma * atoms.W[k][: (l + 1) * J, l * J:(l + 1) * J] / sm
            if atoms.Gamma is not None and z != 0.0:
                T += z * atoms.Gamma[k][: (l + 1) * J, : (l + 1) * J] @ aocol / sm
            bth = st.fac_th[k].solve_leading(T, upto=l + 1)
            ql += st.RTheta[k] @ bth
        q[l] = ql
        _check_finite(ql, l, "q")

    return Trajectory(q=q, p=p, theta=theta, omega=omega,
                      meta={"m": m, "n": n, "J": J, "L": L,
                            "seed": dataset.seed, "tag": "alternative",
                            "sigma": sigma, "z": z})


def run_perturbed_original(dataset, maps: DynamicsMaps, sigma, z,
                           atoms: GaussianAtoms, L) -> Trajectory:
    """Solve the perturbed original process sequentially: the true data
    response plus the sigma-Gaussian and sqrt((1+z^2)/m) Gamma terms."""
    X = dataset.X
    n, m = dataset.n, dataset.m
    J = maps.J
    y = dataset.labels
    sm = np.sqrt(m)
    cz = np.sqrt((1.0 + z * z) / m)
    st = _SeqState(dataset, L, J, sigma)
    q = np.zeros((L, n, J))
    p = np.zeros((L, m, J))
    theta = np.zeros((L, n, J))
    omega = np.zeros((L, m, J))

    for l in range(L):
        th = maps.theta_map(q[:l], p[:l], y, l)
        theta[l] = th
        _check_finite(th, l, "theta")
        st.push_theta(dataset, th)

        pl = X.T @ th + sigma * atoms.V[:, l * J:(l + 1) * J]
        if atoms.Gamma is not None and l:
            for k in range(dataset.spec.n_components):
                acol = st.fac_th[k].matrix[:, l * J:(l + 1) * J]
                M = atoms.Gamma[k].T[: l * J, : (l + 1) * J] @ acol
                bcol = st.fac_om[k].solve_leading(M, upto=l)
                pl[dataset.rows_of(k)] += cz * (st.Omega_c[k] @ bcol)
        p[l] = pl
        _check_finite(pl, l, "p")

        om = maps.omega_map(p[: l + 1], q[:l], y, l)
        omega[l] = om
        _check_finite(om, l, "omega")
        st.push_omega(dataset, om, m)

        ql = (X @ om) / m
        for k, comp in enumerate(dataset.spec.components):
            ql += (sigma / sm) * cov_half_apply(comp, atoms.U[k][:, l * J:(l + 1) * J])
            if atoms.Gamma is not None:
                aocol = st.fac_om[k].matrix[:, l * J:(l + 1) * J]
                M = atoms.Gamma[k][: (l + 1) * J, : (l + 1) * J] @ aocol
                bth = st.fac_th[k].solve_leading(M, upto=l + 1)
                ql += cz * (st.RTheta[k] @ bth)
        q[l] = ql
        _check_finite(ql, l, "q")

    return Trajectory(q=q, p=p, theta=theta, omega=omega,
                      meta={"m": m, "n": n, "J": J, "L": L,
                            "seed": dataset.seed, "tag": "perturbed",
                            "sigma": sigma, "z": z})


# ----------------------------------------------------------------------
# Fixed-point evaluation: one sample of psi(xi) / phi'(xi) at a frozen xi.
# ----------------------------------------------------------------------

@dataclass
class FixedPointContext:
    """Everything about a frozen xi = (Theta, Omega) the processes need."""
    dataset: object
    Theta: np.ndarray        # (n, L*J)
    RhalfTheta: list         # per component (n, L*J)
    Omega_c: list            # per component (m_zeta, L*J)
    A_theta: list            # per component (L*J, L*J)
    A_omega: list
    T: list                  # R(zeta) Theta A_theta^{-1}(zeta)
    O: list                  # Omega_zeta A_omega^{-1}(zeta)
    V_theta: list
    V_omega: list
    sigma: float
    z: float
    L: int
    J: int

    @property
    def mask_u(self):
        LJ = self.L * self.J
        mu = np.zeros((LJ, LJ), dtype=bool)
        for li in range(self.L):
            mu[li * self.J:(li + 1) * self.J, li * self.J:] = True
        return mu

    @property
    def mask_U(self):
        LJ = self.L * self.J
        mu = np.zeros((LJ, LJ), dtype=bool)
        for li in range(self.L):
            mu[li * self.J:(li + 1) * self.J, (li + 1) * self.J:] = True
        return mu


def fixed_point_context(Theta, Omega, dataset, sigma, z, J=1) -> FixedPointContext:
    """Precompute factors and resolvents of a frozen xi."""
    Theta = np.asarray(Theta, dtype=float)
    Omega = np.asarray(Omega, dtype=float)
    n, LJ = Theta.shape
    L = LJ // J
    m = Omega.shape[0]
    s2 = sigma * sigma
    A_theta, A_omega, T, O, Vth, Vom, Om_c, RhT = [], [], [], [], [], [], [], []
    for k, comp in enumerate(dataset.spec.components):
        RTheta = cov_apply(comp, Theta)
        V_t = Theta.T @ RTheta + s2 * np.eye(LJ)
        Ok = Omega[dataset.rows_of(k)]
        V_o = (Ok.T @ Ok) / m + s2 * np.eye(LJ)
        At = block_cholesky(V_t, J=J)
        Ao = block_cholesky(V_o, J=J)
        fac_t = BlockCholesky(J=J, L_max=L)
        fac_t._A[:LJ, :LJ] = At
        fac_t.L = L
        fac_o = BlockCholesky(J=J, L_max=L)
        fac_o._A[:LJ, :LJ] = Ao
        fac_o.L = L
        T.append(fac_t.solve_transpose_leading(RTheta.T).T)
        O.append(fac_o.solve_transpose_leading(Ok.T).T)
        A_theta.append(At)
        A_omega.append(Ao)
        Vth.append(V_t)
        Vom.append(V_o)
        Om_c.append(Ok)
        RhT.append(cov_half_apply(comp, Theta))
    return FixedPointContext(
        dataset=dataset, Theta=Theta, RhalfTheta=RhT, Omega_c=Om_c,
        A_theta=A_theta, A_omega=A_omega, T=T, O=O,
        V_theta=Vth, V_omega=Vom, sigma=sigma, z=z, L=L, J=J,
    )


def sample_psi(ctx: FixedPointContext, master_seed, rep, n_draws,
               stream_id=rngmod.STREAM_ALTERNATIVE):
    """n_draws independent evaluations of the alternative process at the
    frozen xi.  Returns (q, p) of shapes (B, n, L*J), (B, m, L*J)."""
    ds = ctx.dataset
    n, m = ds.n, ds.m
    LJ = ctx.L * ctx.J
    sm = np.sqrt(m)
    mu, mU = ctx.mask_u, ctx.mask_U
    q = np.zeros((n_draws, n, LJ))
    p = np.zeros((n_draws, m, LJ))
    for k, comp in enumerate(ds.spec.components):
        rows = ds.rows_of(k)
        mk = len(rows)
        gen = lambda atom: rngmod.stream(master_seed, stream_id, rep, atom, k)
        G = gen("G").standard_normal((n_draws, n, LJ))
        H = gen("H").standard_normal((n_draws, mk, LJ))
        W = gen("W").standard_normal((n_draws, LJ, LJ))
        Gm = gen("Gamma").standard_normal((n_draws, LJ, LJ))
        RhalfG = G if comp.is_identity() else np.einsum(
            "nr,brk->bnk", _cov_half_matrix(comp, n), G)
        M = np.einsum("bik,bij->bkj", H, np.broadcast_to(ctx.Omega_c[k], (n_draws, mk, LJ))) / m
        M += (ctx.sigma * W + ctx.z * (Gm @ ctx.A_omega[k])) / sm
        M *= mu
        q += np.einsum("bnk,kj->bnj", RhalfG, ctx.A_omega[k]) / sm
        q += np.einsum("nk,bkj->bnj", ctx.T[k], M)
        N = np.einsum("bnk,nj->bkj", G, ctx.RhalfTheta[k])
        N += ctx.sigma * np.swapaxes(W, 1, 2) + ctx.z * np.einsum(
            "bkl,kj->blj", Gm, ctx.A_theta[k])
        N = (N / sm) * mU
        p[:, rows, :] = H @ ctx.A_theta[k] + np.einsum("ik,bkj->bij", ctx.O[k], N)
    return q, p


def _cov_half_matrix(comp, n):
    if comp.is_identity():
        return np.eye(n)
    R = np.asarray(comp.covariance, float)
    w, E = np.linalg.eigh(R)
    return E @ (np.sqrt(np.clip(w, 0, None))[:, None] * E.T)


def sample_phi_prime(ctx: FixedPointContext, master_seed, rep, n_draws,
                     stream_id=rngmod.STREAM_PERTURBED):
    """n_draws independent evaluations of the perturbed original process
    at the frozen xi (fresh centered data part each draw)."""
    ds = ctx.dataset
    n, m = ds.n, ds.m
    LJ = ctx.L * ctx.J
    sm = np.sqrt(m)
    cz = np.sqrt(1.0 + ctx.z ** 2) / sm
    mu, mU = ctx.mask_u, ctx.mask_U
    q = np.zeros((n_draws, n, LJ))
    p = np.zeros((n_draws, m, LJ))
    genV = rngmod.stream(master_seed, stream_id, rep, "V", 0)
    Vm = genV.standard_normal((n_draws, m, LJ))
    p += ctx.sigma * Vm
    for k, comp in enumerate(ds.spec.components):
        rows = ds.rows_of(k)
        mk = len(rows)
        gen = lambda atom: rngmod.stream(master_seed, stream_id, rep, atom, k)
        Xt = gen("Xtilde").standard_normal((n_draws, n, mk))
        if not comp.is_identity():
            Xt = np.einsum("nr,brk->bnk", _cov_half_matrix(comp, n), Xt)
        U = gen("U").standard_normal((n_draws, n, LJ))
        Gm = gen("Gamma").standard_normal((n_draws, LJ, LJ))
        q += np.einsum("bni,ik->bnk", Xt, ctx.Omega_c[k]) / m
        if comp.is_identity():
            q += (ctx.sigma / sm) * U
        else:
            q += (ctx.sigma / sm) * np.einsum("nr,brk->bnk", _cov_half_matrix(comp, n), U)
        Mq = (Gm @ ctx.A_omega[k]) * mu
        q += cz * np.einsum("nk,bkj->bnj", ctx.T[k], Mq)
        Mp = (np.einsum("bkl,kj->blj", Gm, ctx.A_theta[k])) * mU
        p[:, rows, :] += np.einsum("bin,nk->bik", np.swapaxes(Xt, 1, 2), ctx.Theta)
        p[:, rows, :] += cz * np.einsum("ik,bkj->bij", ctx.O[k], Mp)
    return q, p


def eval_processes_at(Theta, Omega, dataset, sigma, z, master_seed, rep=0, J=1):
    """One sample each of psi(xi) and phi'(xi) at the same frozen xi,
    with independent atom namespaces."""
    ctx = fixed_point_context(Theta, Omega, dataset, sigma, z, J=J)
    q1, p1 = sample_psi(ctx, master_seed, rep, 1)
    q2, p2 = sample_phi_prime(ctx, master_seed, rep, 1)
    return (q1[0], p1[0]), (q2[0], p2[0])


def closed_form_second_moments(Theta, Omega, dataset, sigma, z):
    """Exact second moments of psi(xi) (= those of phi'(xi)) at a frozen
    xi, J = 1: the full covariance of the stacked vector
    [q(0);..;q(L-1); p(0);..;p(L-1)].

    Blocks:
      E[q(l) q(l')^T]      = (1/m) sum_z V_om(l,l';z) [R + (1+z^2) R S_th(min) R]
      E[q(l) p_z(l')^T]    = (1/m) [R theta(l') s_om^T + R t_th om_z(l)^T + z^2 R t_th s_om^T]
      E[p_z(l) p_z'(l')^T] = delta_zz' V_th(l,l';z) [I + ((1+z^2)/m) S_om(min)]
    with S_th(min) = sum_{mu<=min(l,l')} th~(mu) th~(mu)^T,
    S_om(min) = sum_{mu<min(l,l')} om~(mu) om~(mu)^T,
    t_th = sum_{mu<=l} th~(mu) a_th(mu,l'), s_om = sum_{mu<l'} a_om(mu,l) om~(mu).
    """
    ctx = fixed_point_context(Theta, Omega, dataset, sigma, z, J=1)
    ds = dataset
    n, m = ds.n, ds.m
    L = ctx.L
    D = L * (n + m)
    M = np.zeros((D, D))
    z2 = z * z
    opz2 = 1.0 + z2

    def qs(l):
        return slice(l * n, (l + 1) * n)

    def ps(l):
        return slice(L * n + l * m, L * n + (l + 1) * m)

    for k, comp in enumerate(ds.spec.components):
        rows = ds.rows_of(k)
        Rm = np.eye(n) if comp.is_identity() else np.asarray(comp.covariance, float)
        Tk = ctx.T[k]          # (n, L) = R Theta A_th^{-1}
        Ok = ctx.O[k]          # (m_k, L)
        Ath, Aom = ctx.A_theta[k], ctx.A_omega[k]
        Vth, Vom = ctx.V_theta[k], ctx.V_omega[k]
        # th~ = Theta A^{-1} (without the R): recover from Tk when R = I,
        # else solve directly.
        if comp.is_identity():
            tht = Tk
        else:
            fac = BlockCholesky(J=1, L_max=L)
            fac._A[:L, :L] = Ath
            fac.L = L
            tht = fac.solve_transpose_leading(ctx.Theta.T).T
        Rtht = Rm @ tht if not comp.is_identity() else tht
        for l in range(L):
            for lp in range(L):
                mn = min(l, lp)
                # q x q
                Sth = Rtht[:, : mn + 1] @ Rtht[:, : mn + 1].T
                M[qs(l), qs(lp)] += (Vom[l, lp] / m) * (Rm + opz2 * Sth)
                # p x p (same component only)
                Som = Ok[:, :mn] @ Ok[:, :mn].T
                block = Vth[l, lp] * (np.eye(len(rows)) + (opz2 / m) * Som)
                sub = M[ps(l), ps(lp)]
                sub[np.ix_(rows, rows)] += block
                # q x p
                t_th = tht[:, : l + 1] @ Ath[: l + 1, lp]
                s_om = Ok[:, :lp] @ Aom[:lp, l]
                cross = (
                    np.outer(Rm @ ctx.Theta[:, lp], s_om)
                    + np.outer(Rm @ t_th, ctx.Omega_c[k][:, l])
                    + z2 * np.outer(Rm @ t_th, s_om)
                ) / m
                sub = M[qs(l), ps(lp)]
                sub[:, rows] += cross
                sub = M[ps(lp), qs(l)]
                sub[rows, :] += cross.T
    return M


def stack_draws(q, p):
    """(B, n, L) and (B, m, L) draws -> (B, L*(n+m)) stacked vectors in
    the [q(0)..q(L-1), p(0)..p(L-1)] order of closed_form_second_moments."""
    B, n, L = q.shape
    m = p.shape[1]
    out = np.empty((B, L * (n + m)))
    for l in range(L):
        out[:, l * n:(l + 1) * n] = q[:, :, l]
        out[:, L * n + l * m: L * n + (l + 1) * m] = p[:, :, l]
    return out
