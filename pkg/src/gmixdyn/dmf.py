"""Mean-field kernels by damped fixed-point iteration.

In the infinite-size limit the kernels concentrate; the training field of
a single sample reduces to the scalar characteristic recursion

    p_y(l) = beta(l,y) + h~(l) + sum_{mu<l} omega(p_y(mu), y) b_omega(mu,l)

with h~ Gaussian of kernel V_theta.  One sweep of the self-consistent
chain evaluates, by Monte Carlo over that recursion,

    alpha(l,y)   = rho(y) E[omega(p_y(l), y)]
    V_omega(y)   = rho(y) E[omega(p_y(l)) omega(p_y(l'))]
    B_theta      = A_theta^{-1} (sum_y rho(y) E[h(mu) omega(p_y(l))])_u

then pushes them through the propagators

    lam~^T = lam^T (I + B_theta Lam)^{-1}
    Lam~   = (I + Lam B_theta)^{-1} Lam
    alpha~(y) = Lam~^T alpha(y),   alpha~(*) = -lam~

to close the loop:

    V_theta = sum_{a,b in Y*} nu(a,b) alpha~(a) alpha~(b)^T + gamma Lam~^T V_omega Lam~
    beta(y) = -sum_{b in Y*} nu(y,b) alpha~(b)
    B_omega = -gamma Lam~

The iterate is the state (V_theta, beta, B_omega); everything else is a
function of it.  Each sweep reuses one seed sequence for the path noise
(common random numbers), so the sweep is a deterministic map and the
residual can actually reach tolerances far below the Monte-Carlo noise
floor.  Path normals are whitened (exact zero mean / identity sample
covariance), which makes the sweep exact for linear duals.
"""

from dataclasses import dataclass, field
import hashlib

import numpy as np
import scipy.linalg as sla

from . import rng as rngmod
from .errors import EstimatorDegenerate, NotConverged
from .kernels import qr_upper_factor
from .perceptron import omega_map, omega_prime

SIGMA_INSIDE = 0.0  # the mean-field chain is taken at zero ridge


@dataclass
class DmfSolution:
    L: int
    gamma: float
    nu: np.ndarray                 # (K+1, K+1) overlaps incl. init row
    rho: np.ndarray                # (K,)
    label_values: np.ndarray       # (K,)
    V_theta: np.ndarray            # (L, L)
    A_theta: np.ndarray            # (L, L) upper
    V_omega: np.ndarray            # (L, L) summed over components
    V_omega_by_label: list         # per component (L, L)
    B_theta: np.ndarray            # (L, L) upper incl. diagonal
    B_theta_by_label: list
    C_omega_by_label: list         # rho(y) E[h(mu) omega(l)], upper part
    B_omega: np.ndarray            # (L, L) strictly upper = -gamma Lam~
    alpha: list                    # per component (L,)
    beta: list                     # per component (L,)
    lam_tilde: np.ndarray          # (L,)
    alpha_tilde: list              # per Y* entry (components then star), (L,)
    Lambda_tilde: np.ndarray       # (L, L)
    residual: float
    iterations: int
    mc_paths: int
    converged: bool
    meta: dict = field(default_factory=dict)

    @property
    def K(self):
        return len(self.rho)


def whitened_normals(rng, n_paths, L):
    """Standard normals with exact zero column means and identity sample
    covariance (n_paths >= L + 1)."""
    h = rng.standard_normal((n_paths, L))
    h -= h.mean(axis=0)
    C = (h.T @ h) / n_paths
    Lc = np.linalg.cholesky(C)
    return sla.solve_triangular(Lc, h.T, lower=True).T


def characteristic_paths(A_theta, beta_y, B_omega, omega_fn, n_paths, rng,
                         whiten=True, h=None):
    """Scalar field trajectories of one component.

    Returns (h, p, w): the driving standard normals (n_paths, L), the
    fields p_y(l) and the duals w = omega(p_y(l), y).  h is retained so
    the caller can form the correlation estimator E[h(mu) w(l)].
    """
    L = A_theta.shape[0]
    if h is None:
        h = whitened_normals(rng, n_paths, L) if whiten else rng.standard_normal((n_paths, L))
    htil = h @ A_theta
    p = np.empty_like(htil)
    w = np.empty_like(htil)
    for l in range(L):
        pl = beta_y[l] + htil[:, l]
        if l:
            pl = pl + w[:, :l] @ B_omega[:l, l]
        p[:, l] = pl
        w[:, l] = omega_fn(pl)
    return h, p, w


def pathwise_response_matrix(wprime, B_omega):
    """E over paths of the dual's response to the driving field:
    J(mu, l) = d omega(l) / d h~(mu), accumulated through

        J(:, l) = omega'(p(l)) * (e_l + J(:, :l) B_omega(:l, l)).

    This is the derivative form of the memory-kernel equation; unlike the
    correlation form it needs no solve against A_theta, so it stays
    stable when the field kernel is rank-deficient (converged dynamics)."""
    P, L = wprime.shape
    acc = np.zeros((L, L))
    chunk = max(256, int(2e7) // max(L * L, 1))
    for s in range(0, P, chunk):
        wp = wprime[s:s + chunk]
        c = wp.shape[0]
        J = np.zeros((c, L, L))
        for l in range(L):
            col = np.zeros((c, L))
            col[:, l] = 1.0
            if l:
                col += J[:, :, :l] @ B_omega[:l, l]
            J[:, :, l] = wp[:, l][:, None] * col
        acc += J.sum(axis=0)
    return acc / P


def _propagators(B_theta, Lambda, lam):
    L = B_theta.shape[0]
    M1 = np.eye(L) + B_theta @ Lambda
    M2 = np.eye(L) + Lambda @ B_theta
    lam_tilde = np.linalg.solve(M1.T, lam)
    Lambda_tilde = np.linalg.solve(M2, Lambda)
    return lam_tilde, Lambda_tilde


@dataclass
class _State:
    V_theta: np.ndarray
    beta: list
    B_omega: np.ndarray


def _initial_state(nu, rho, lam, L, K):
    star = K
    V_theta = nu[star, star] * np.outer(lam, lam)
    beta = [nu[k, star] * lam.copy() for k in range(K)]
    return _State(V_theta=V_theta, beta=beta, B_omega=np.zeros((L, L)))


def dmf_update(state: _State, nu, rho, labels, gamma, coeffs, activation, loss,
               n_paths, seed, whiten=True, se_cap=0.1):
    """One full sweep of the chain.  Returns (new_state, solution record)."""
    L = coeffs.L
    K = len(rho)
    star = K
    A_theta = qr_upper_factor(state.V_theta)
    alpha, V_om_k, C_om_k, B_theta_k = [], [], [], []
    for k in range(K):
        gen = rngmod.stream(seed, rngmod.STREAM_DMF, 0, "paths", k)
        omega_fn = lambda p, yk=labels[k]: omega_map(p, yk, activation, loss)
        h, p, w = characteristic_paths(A_theta, state.beta[k], state.B_omega,
                                       omega_fn, n_paths, gen, whiten=whiten)
        a_k = rho[k] * w.mean(axis=0)
        se = rho[k] * w.std(axis=0) / np.sqrt(n_paths)
        if np.any(se > se_cap * (1.0 + np.abs(a_k))):
            raise EstimatorDegenerate(
                f"alpha standard error {se.max():.3e} above cap for component {k}"
            )
        alpha.append(a_k)
        V_om_k.append(rho[k] * (w.T @ w) / n_paths)
        C_om_k.append(np.triu(rho[k] * (h.T @ w) / n_paths))
        wp = omega_prime(p, labels[k], activation, loss)
        B_theta_k.append(rho[k] * pathwise_response_matrix(wp, state.B_omega))
    V_omega = sum(V_om_k)
    B_theta = sum(B_theta_k)
    lam_tilde, Lambda_tilde = _propagators(B_theta, coeffs.Lambda, coeffs.lam)
    alpha_tilde = [Lambda_tilde.T @ alpha[k] for k in range(K)]
    alpha_tilde.append(-lam_tilde)
    V_theta_new = gamma * (Lambda_tilde.T @ V_omega @ Lambda_tilde)
    for a in range(K + 1):
        for b in range(K + 1):
            V_theta_new += nu[a, b] * np.outer(alpha_tilde[a], alpha_tilde[b])
    beta_new = [
        -sum(nu[k, b] * alpha_tilde[b] for b in range(K + 1)) for k in range(K)
    ]
    B_omega_new = -gamma * Lambda_tilde
    new_state = _State(V_theta=V_theta_new, beta=beta_new, B_omega=B_omega_new)
    record = dict(
        A_theta=A_theta, V_omega=V_omega, V_omega_by_label=V_om_k,
        B_theta=B_theta, B_theta_by_label=B_theta_k, C_omega_by_label=C_om_k,
        alpha=alpha, lam_tilde=lam_tilde, Lambda_tilde=Lambda_tilde,
        alpha_tilde=alpha_tilde,
    )
    return new_state, record


def _state_residual(old: _State, new: _State):
    def rel(a, b):
        scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
        return np.max(np.abs(np.asarray(a) - np.asarray(b))) / scale
    r = max(rel(old.V_theta, new.V_theta), rel(old.B_omega, new.B_omega))
    for bo, bn in zip(old.beta, new.beta):
        r = max(r, rel(bo, bn))
    return r


def solve_dmf(spec, gamma, coeffs, activation, loss, L=None, tol=1e-6,
              max_iter=200, mc_paths=100_000, seed=0, damping=0.5,
              whiten=True, se_cap=0.1, raise_on_fail=True) -> DmfSolution:
    """Iterate the chain to a fixed point of the state (V_theta, beta,
    B_omega).  Deterministic given the seed; the same path noise drives
    every sweep."""
    if tol <= 0:
        raise ValueError("tol must be > 0")
    L = coeffs.L if L is None else L
    nu = spec.overlap_gram
    rho = spec.frequencies
    labels = spec.labels
    K = len(rho)
    state = _initial_state(nu, rho, coeffs.lam, L, K)
    record = None
    residual = np.inf
    it = 0
    coarse = min(mc_paths, max(5000, mc_paths // 10))
    coarse_tol = max(100 * tol, 1e-4)
    phase_paths = coarse if coarse < mc_paths else mc_paths
    for it in range(1, max_iter + 1):
        swept, record = dmf_update(state, nu, rho, labels, gamma, coeffs,
                                   activation, loss, phase_paths, seed,
                                   whiten=whiten, se_cap=se_cap)
        new = _State(
            V_theta=(1 - damping) * state.V_theta + damping * swept.V_theta,
            beta=[(1 - damping) * b0 + damping * b1
                  for b0, b1 in zip(state.beta, swept.beta)],
            B_omega=(1 - damping) * state.B_omega + damping * swept.B_omega,
        )
        residual = _state_residual(state, new)
        state = new
        if phase_paths < mc_paths:
            if residual < coarse_tol:
                phase_paths = mc_paths  # refine the fixed point at full paths
            continue
        if residual < tol:
            break
    converged = residual < tol
    sol = DmfSolution(
        L=L, gamma=gamma, nu=np.asarray(nu), rho=np.asarray(rho),
        label_values=np.asarray(labels, dtype=float),
        V_theta=state.V_theta, A_theta=record["A_theta"],
        V_omega=record["V_omega"], V_omega_by_label=record["V_omega_by_label"],
        B_theta=record["B_theta"], B_theta_by_label=record["B_theta_by_label"],
        C_omega_by_label=record["C_omega_by_label"],
        B_omega=state.B_omega, alpha=record["alpha"], beta=state.beta,
        lam_tilde=record["lam_tilde"], alpha_tilde=record["alpha_tilde"],
        Lambda_tilde=record["Lambda_tilde"],
        residual=float(residual), iterations=it, mc_paths=mc_paths,
        converged=bool(converged),
        meta={"activation": activation.tag, "loss": loss.tag,
              "seed": seed, "damping": damping},
    )
    if not converged and raise_on_fail:
        raise NotConverged(
            f"mean-field chain residual {residual:.3e} > tol {tol:.1e} "
            f"after {max_iter} sweeps", residual=float(residual), last=sol,
        )
    return sol


def dmf_metric_curve(sol: DmfSolution, activation, loss, kind="loss",
                     n_paths=100_000, seed=1, whiten=True):
    """Metric curve of the mean-field limit: the population average of the
    per-sample metric over fresh characteristic paths."""
    from .perceptron import decision_statistic

    out = np.zeros(sol.L)
    for k in range(sol.K):
        gen = rngmod.stream(seed, rngmod.STREAM_DMF, 1, "paths", k)
        yk = sol.label_values[k]
        omega_fn = lambda p, yv=yk: omega_map(p, yv, activation, loss)
        _, p, _ = characteristic_paths(sol.A_theta, sol.beta[k], sol.B_omega,
                                       omega_fn, n_paths, gen, whiten=whiten)
        f = activation.value(p)
        if kind == "loss":
            out += sol.rho[k] * loss.value(f, yk).mean(axis=0)
        elif kind == "zero_one":
            stat = decision_statistic(f, activation)
            out += sol.rho[k] * np.mean(stat * yk <= 0, axis=0)
        else:
            raise ValueError(f"unknown metric kind {kind!r}")
    return out


# ----------------------------------------------------------------------
# Text artifact
# ----------------------------------------------------------------------

def _fmt_mat(M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return "\n".join(" ".join(f"{v:.17g}" for v in row) for row in M)


def serialize_solution(sol: DmfSolution, path, config_hash=""):
    parts = [
        "# mean-field solution",
        f"L = {sol.L}",
        f"gamma = {sol.gamma:.17g}",
        f"K = {sol.K}",
        "labels = " + " ".join(f"{v:.17g}" for v in sol.label_values),
        "rho = " + " ".join(f"{v:.17g}" for v in sol.rho),
        f"residual = {sol.residual:.17g}",
        f"iterations = {sol.iterations}",
        f"mc_paths = {sol.mc_paths}",
        f"converged = {int(sol.converged)}",
        f"config_hash = {config_hash}",
    ]
    mats = {
        "nu": sol.nu, "V_theta": sol.V_theta, "A_theta": sol.A_theta,
        "V_omega": sol.V_omega, "B_theta": sol.B_theta, "B_omega": sol.B_omega,
        "lam_tilde": sol.lam_tilde[None, :], "Lambda_tilde": sol.Lambda_tilde,
    }
    for k in range(sol.K):
        mats[f"V_omega_{k}"] = sol.V_omega_by_label[k]
        mats[f"B_theta_{k}"] = sol.B_theta_by_label[k]
        mats[f"C_omega_{k}"] = sol.C_omega_by_label[k]
        mats[f"alpha_{k}"] = sol.alpha[k][None, :]
        mats[f"beta_{k}"] = sol.beta[k][None, :]
    for a in range(sol.K + 1):
        mats[f"alpha_tilde_{a}"] = sol.alpha_tilde[a][None, :]
    for name, M in mats.items():
        parts.append(f"[{name}]")
        parts.append(_fmt_mat(M))
    text = "\n".join(parts) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def load_solution(path) -> DmfSolution:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    scalars = {}
    mats = {}
    name = None
    for ln in lines:
        if not ln or ln.startswith("#"):
            continue
        if ln.startswith("["):
            name = ln.strip("[]")
            mats[name] = []
        elif name is not None:
            mats[name].append([float(v) for v in ln.split()])
        elif "=" in ln:
            k, v = ln.split("=", 1)
            scalars[k.strip()] = v.strip()
    mats = {k: np.array(v) for k, v in mats.items()}
    K = int(scalars["K"])
    L = int(scalars["L"])
    return DmfSolution(
        L=L, gamma=float(scalars["gamma"]), nu=mats["nu"],
        rho=np.array([float(v) for v in scalars["rho"].split()]),
        label_values=np.array([float(v) for v in scalars["labels"].split()]),
        V_theta=mats["V_theta"], A_theta=mats["A_theta"],
        V_omega=mats["V_omega"],
        V_omega_by_label=[mats[f"V_omega_{k}"] for k in range(K)],
        B_theta=mats["B_theta"],
        B_theta_by_label=[mats[f"B_theta_{k}"] for k in range(K)],
        C_omega_by_label=[mats[f"C_omega_{k}"] for k in range(K)],
        B_omega=mats["B_omega"],
        alpha=[mats[f"alpha_{k}"][0] for k in range(K)],
        beta=[mats[f"beta_{k}"][0] for k in range(K)],
        lam_tilde=mats["lam_tilde"][0],
        alpha_tilde=[mats[f"alpha_tilde_{a}"][0] for a in range(K + 1)],
        Lambda_tilde=mats["Lambda_tilde"],
        residual=float(scalars["residual"]),
        iterations=int(scalars["iterations"]),
        mc_paths=int(scalars["mc_paths"]),
        converged=bool(int(scalars["converged"])),
        meta={"config_hash": scalars.get("config_hash", "")},
    )


def config_fingerprint(*parts):
    """Short stable hash used to tie artifacts to the settings that made
    them."""
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode())
    return h.hexdigest()[:16]
