"""Overlap matrices, Cholesky-type factors and memory kernels.

The per-component overlaps of a trajectory are

    V_theta(zeta) = Theta^T R(zeta) Theta + sigma^2 I
    V_omega(zeta) = (1/m) Omega_zeta^T Omega_zeta + sigma^2 I

viewed as L x L block matrices of J x J blocks.  A is the block
upper-triangular factor with A^T A = V; fixing symmetric positive
definite diagonal blocks makes it unique, and growth is append-only:
extending by one step appends one block column and leaves the leading
factor untouched, which is what the sequential surrogate dynamics need.

B matrices are always produced by triangular solves against A, never by
explicit inverses.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NotPositiveDefinite, SingularFactor
from .mixture import cov_apply, cov_half_apply

JITTER = 1e-12


@dataclass
class KernelSet:
    """Kernels of one realization, per component: overlaps V, factors A,
    memory kernels B, bias terms e and beta, and (when built from atoms)
    the Gaussian images g~ and h~ of the surrogate dynamics."""
    V_theta: list
    V_omega: list
    A_theta: list
    A_omega: list
    B_theta: list
    B_omega: list
    e: np.ndarray          # (L, n, J)
    beta: list             # per component (L, J)
    sigma: float
    z: float
    J: int
    L: int
    gtilde: Optional[np.ndarray] = None   # (n, L*J)
    htilde: Optional[list] = None         # per component (m_zeta, L*J)


def blocks_to_matrix(blocks):
    """(L, n, J) stacked blocks -> (n, L*J) row-block matrix."""
    L = blocks.shape[0]
    return np.concatenate([blocks[l] for l in range(L)], axis=1)


def block_triu(M, J=1, strict=False):
    """Keep the block upper-triangular part (strict: exclude diagonal blocks)."""
    M = np.asarray(M)
    LJ = M.shape[0]
    L = LJ // J
    out = np.zeros_like(M)
    for li in range(L):
        for lj in range(li, L):
            if strict and li == lj:
                continue
            out[li * J:(li + 1) * J, lj * J:(lj + 1) * J] = \
                M[li * J:(li + 1) * J, lj * J:(lj + 1) * J]
    return out


def _spd_sqrt(S, step=None):
    """Symmetric PSD square root with the jitter policy: eigenvalues in
    (-JITTER, JITTER] are lifted to the jitter floor (exact rank
    deficiency plus rounding); anything at or below -JITTER raises."""
    S = 0.5 * (S + S.T)
    w, E = np.linalg.eigh(S)
    mn = w.min()
    if mn <= -JITTER:
        raise NotPositiveDefinite(
            f"Schur complement min eigenvalue {mn:.3e} below jitter window",
            step=step, min_eig=mn,
        )
    if mn <= JITTER:
        w = np.clip(w, 0.0, None) + JITTER
    return E @ (np.sqrt(w)[:, None] * E.T)


class BlockCholesky:
    """Incremental factor A (block upper-triangular, A^T A = V, SPD
    diagonal blocks).  Grows one block column at a time; `matrix`
    exposes the current factor.

    diag_signs (J = 1 only) replaces the positive-root convention by a
    per-step sign, i.e. the factor Q A for block-diagonal orthogonal Q —
    used to test that downstream results are invariant to the choice.
    """

    def __init__(self, J=1, L_max=None, diag_signs=None):
        self.J = J
        self.L = 0
        cap = (L_max or 8) * J
        self._A = np.zeros((cap, cap))
        self.diag_signs = diag_signs

    def _grow(self, need):
        if need > self._A.shape[0]:
            new = np.zeros((2 * need, 2 * need))
            k = self.L * self.J
            new[:k, :k] = self._A[:k, :k]
            self._A = new

    @property
    def matrix(self):
        k = self.L * self.J
        return self._A[:k, :k]

    def extend(self, col):
        """Append step L given the new block column of V: col has shape
        ((L+1)*J, J) = V[0:(L+1)J, LJ:(L+1)J]."""
        J, l = self.J, self.L
        col = np.asarray(col, dtype=float).reshape((l + 1) * J, J)
        self._grow((l + 1) * J)
        A = self._A
        if J == 1:
            v = col[:, 0]
            a = np.empty(l)
            for i in range(l):
                a[i] = (v[i] - A[:i, i] @ a[:i]) / A[i, i]
            s = v[l] - a @ a
            if s <= -JITTER:
                raise NotPositiveDefinite(
                    f"Schur complement {s:.3e} below jitter window at step {l}",
                    step=l, min_eig=s,
                )
            if s <= JITTER:
                s = max(s, 0.0) + JITTER
            d = np.sqrt(s)
            if self.diag_signs is not None:
                d *= self.diag_signs[l]
            A[:l, l] = a
            A[l, l] = d
        else:
            new = np.empty(((l + 1) * J, J))
            for mu in range(l):
                rhs = col[mu * J:(mu + 1) * J] - sum(
                    (A[k * J:(k + 1) * J, mu * J:(mu + 1) * J].T
                     @ new[k * J:(k + 1) * J] for k in range(mu)),
                    start=np.zeros((J, J)),
                )
                diag = A[mu * J:(mu + 1) * J, mu * J:(mu + 1) * J]
                new[mu * J:(mu + 1) * J] = np.linalg.solve(diag, rhs)
            S = col[l * J:(l + 1) * J].copy()
            for k in range(l):
                S -= new[k * J:(k + 1) * J].T @ new[k * J:(k + 1) * J]
            new[l * J:(l + 1) * J] = _spd_sqrt(S, step=l)
            A[: (l + 1) * J, l * J:(l + 1) * J] = new
        self.L = l + 1
        return self

    def solve_leading(self, b, upto=None):
        """x = A[:k,:k]^{-1} b by block back-substitution (k = upto*J)."""
        J = self.J
        k = (self.L if upto is None else upto) * J
        A = self._A
        b = np.asarray(b, dtype=float)
        x = np.array(b, dtype=float, copy=True)
        if x.ndim == 1:
            x = x[:, None]
        if J == 1:
            for i in reversed(range(k)):
                if A[i, i] == 0.0:
                    raise SingularFactor(f"zero pivot at step {i}")
                x[i] = (x[i] - A[i, i + 1:k] @ x[i + 1:k]) / A[i, i]
        else:
            L = k // J
            for mu in reversed(range(L)):
                sl = slice(mu * J, (mu + 1) * J)
                acc = x[sl].copy()
                for kk in range(mu + 1, L):
                    sk = slice(kk * J, (kk + 1) * J)
                    acc -= A[sl, sk] @ x[sk]
                x[sl] = np.linalg.solve(A[sl, sl], acc)
        return x if b.ndim > 1 else x[:, 0]

    def solve_transpose_leading(self, b, upto=None):
        """x = (A[:k,:k]^T)^{-1} b by block forward substitution."""
        J = self.J
        k = (self.L if upto is None else upto) * J
        A = self._A
        b = np.asarray(b, dtype=float)
        x = np.array(b, dtype=float, copy=True)
        if x.ndim == 1:
            x = x[:, None]
        if J == 1:
            for i in range(k):
                x[i] = (x[i] - A[:i, i] @ x[:i]) / A[i, i]
        else:
            L = k // J
            for mu in range(L):
                sl = slice(mu * J, (mu + 1) * J)
                acc = x[sl].copy()
                for kk in range(mu):
                    sk = slice(kk * J, (kk + 1) * J)
                    acc -= A[sk, sl].T @ x[sk]
                x[sl] = np.linalg.solve(A[sl, sl].T, acc)
        return x if b.ndim > 1 else x[:, 0]


def spectral_floor(V, floor_rel=JITTER):
    """Clip eigenvalues at floor_rel * max(1, eig_max): the graceful route
    for kernels that are exactly rank-deficient by construction (converged
    dynamics make late steps linearly dependent)."""
    V = 0.5 * (V + V.T)
    w, E = np.linalg.eigh(V)
    floor = floor_rel * max(1.0, w.max() if w.size else 1.0)
    if w.min() < -1e-8 * max(1.0, abs(w).max()):
        raise NotPositiveDefinite(
            f"kernel min eigenvalue {w.min():.3e} genuinely negative",
            min_eig=w.min(),
        )
    return E @ (np.clip(w, floor, None)[:, None] * E.T)


def qr_upper_factor(V):
    """Upper-triangular A with positive diagonal and A^T A = V, computed
    through an eigendecomposition and QR instead of elimination: stable
    for severely rank-deficient V after spectral_floor.  Scalar blocks
    only (J = 1)."""
    V = spectral_floor(V)
    w, E = np.linalg.eigh(V)
    W = np.sqrt(np.clip(w, 0.0, None))[:, None] * E.T
    _, R = np.linalg.qr(W)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return signs[:, None] * R


def block_cholesky(V, J=1, diag_signs=None):
    """Batch factorization: A with A^T A = V, SPD diagonal blocks."""
    V = np.asarray(V, dtype=float)
    LJ = V.shape[0]
    if LJ % J:
        raise ValueError("matrix size not a multiple of J")
    L = LJ // J
    fac = BlockCholesky(J=J, L_max=L, diag_signs=diag_signs)
    for l in range(L):
        fac.extend(V[: (l + 1) * J, l * J:(l + 1) * J])
    return fac.matrix.copy()


def extend_cholesky(fac: BlockCholesky, new_col):
    """Append one step to an existing factor; identical to refactoring the
    full matrix (leading blocks unchanged)."""
    return fac.extend(new_col)


def block_triu_solve(A, M, J=1):
    """A^{-1} M for a block upper-triangular A with SPD diagonal blocks."""
    A = np.asarray(A, dtype=float)
    L = A.shape[0] // J
    fac = BlockCholesky(J=J, L_max=L)
    fac._A[: A.shape[0], : A.shape[1]] = A
    fac.L = L
    return fac.solve_leading(np.asarray(M, dtype=float))


def compute_overlaps(theta_blocks, omega_blocks, dataset, sigma):
    """Per-component V_theta and V_omega of a trajectory.

    theta_blocks: (L, n, J); omega_blocks: (L, m, J).  Returns two lists
    indexed by component: (L*J, L*J) arrays.
    """
    Theta = blocks_to_matrix(np.asarray(theta_blocks))
    Omega = blocks_to_matrix(np.asarray(omega_blocks))
    m = Omega.shape[0]
    LJ = Theta.shape[1]
    s2 = sigma * sigma
    V_theta, V_omega = [], []
    for k, comp in enumerate(dataset.spec.components):
        RTheta = cov_apply(comp, Theta)
        V_theta.append(Theta.T @ RTheta + s2 * np.eye(LJ))
        Ok = Omega[dataset.rows_of(k)]
        V_omega.append((Ok.T @ Ok) / m + s2 * np.eye(LJ))
    return V_theta, V_omega


def compute_B(A_theta, A_omega, G, H, W, Gamma, Omega_comp, Theta, sigma, z, m,
              comp=None, J=1):
    """Memory kernels of the alternative dynamics for one component:

        B_theta = A_theta^{-1} ( H^T Omega / m + (sigma W + z Gamma A_omega)/sqrt(m) )_u
        B_omega = A_omega^{-1} ( (G^T R^{1/2} Theta + sigma W^T + z Gamma^T A_theta)/sqrt(m) )_U

    Gamma and W are shared between the two formulas (transposed on the
    omega side).
    """
    sm = np.sqrt(m)
    RhalfTheta = Theta if comp is None else cov_half_apply(comp, Theta)
    M_th = (H.T @ Omega_comp) / m + (sigma * W + z * (Gamma @ A_omega)) / sm
    M_om = (G.T @ RhalfTheta + sigma * W.T + z * (Gamma.T @ A_theta)) / sm
    B_theta = block_triu_solve(A_theta, block_triu(M_th, J=J, strict=False), J=J)
    B_omega = block_triu_solve(A_omega, block_triu(M_om, J=J, strict=True), J=J)
    return B_theta, B_omega


def dump_kernels(kset: KernelSet, path):
    """Debug dump of V/A/B in the columnar text format: one row per
    (component, kernel, i, j), 17-significant-digit decimal values."""
    groups = [("V_theta", kset.V_theta), ("V_omega", kset.V_omega),
              ("A_theta", kset.A_theta), ("A_omega", kset.A_omega),
              ("B_theta", kset.B_theta), ("B_omega", kset.B_omega)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("component,kernel,i,j,value\n")
        for name, mats in groups:
            for k, M in enumerate(mats):
                M = np.atleast_2d(M)
                for i in range(M.shape[0]):
                    for j in range(M.shape[1]):
                        fh.write(f"{k},{name},{i},{j},{M[i, j]:.17g}\n")


def compute_bias(theta_blocks, omega_blocks, dataset):
    """Bias terms of the alternative dynamics:

        e(l) = sum_zeta x_hat(zeta) 1^T omega_zeta(l) / m
        beta(l, zeta) = x_hat(zeta)^T theta(l)

    Returns (e of shape (L, n, J), beta as list of (L, J) per component).
    """
    theta_blocks = np.asarray(theta_blocks)
    omega_blocks = np.asarray(omega_blocks)
    L, n, J = theta_blocks.shape
    m = omega_blocks.shape[1]
    K = dataset.spec.n_components
    e = np.zeros((L, n, J))
    beta = [np.zeros((L, J)) for _ in range(K)]
    for k in range(K):
        xh = dataset.means_realized[:, k]
        rows = dataset.rows_of(k)
        for l in range(L):
            col_sum = omega_blocks[l][rows].sum(axis=0) / m  # (J,)
            e[l] += np.outer(xh, col_sum)
            beta[k][l] = xh @ theta_blocks[l]
    return e, beta
