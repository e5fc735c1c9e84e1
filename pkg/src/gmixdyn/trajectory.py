"""Block trajectories and the original-dynamics engine.

One training step is a query pair (theta(l), omega(l)) answered by the
data matrix with a response pair

    q(l) = (1/m) X omega(l),        p(l) = X^T theta(l),

in the sequential order theta(l) -> p(l) -> omega(l) -> q(l) -> theta(l+1).
theta(l) may read responses 0..l-1; omega(l) may read p(0..l) and q(0..l-1).
Blocks are stored densely: downstream kernel computations need the full
histories and L stays small at desk scale.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NonFiniteValue


@dataclass
class DynamicsMaps:
    theta_map: Callable  # (q_hist, p_hist, labels, l) -> (n, J)
    omega_map: Callable  # (p_hist, q_hist, labels, l) -> (m, J)
    J: int = 1
    tag: str = "custom"
    lipschitz: Optional[float] = None


@dataclass
class Trajectory:
    q: np.ndarray      # (L, n, J)
    p: np.ndarray      # (L, m, J)
    theta: np.ndarray  # (L, n, J)
    omega: np.ndarray  # (L, m, J)
    meta: dict = field(default_factory=dict)

    @property
    def L(self):
        return self.q.shape[0]

    @property
    def n(self):
        return self.q.shape[1]

    @property
    def m(self):
        return self.p.shape[1]

    @property
    def J(self):
        return self.q.shape[2]

    def theta_matrix(self):
        """(n, L*J) row-block matrix of iterates."""
        return np.concatenate([self.theta[l] for l in range(self.L)], axis=1)

    def omega_matrix(self):
        """(m, L*J) row-block matrix of duals."""
        return np.concatenate([self.omega[l] for l in range(self.L)], axis=1)


def _check_finite(block, l, name):
    if not np.all(np.isfinite(block)):
        raise NonFiniteValue(
            f"non-finite entries in {name}({l}); step size likely divergent",
            step=l,
            block=name,
        )


def run_original(dataset, maps: DynamicsMaps, L: int, check_every_block=True) -> Trajectory:
    """Execute the exact sequential recursion against the stored data."""
    if L < 1:
        raise ValueError("L must be >= 1")
    X = dataset.X
    n, m = X.shape
    J = maps.J
    y = dataset.labels
    q = np.zeros((L, n, J))
    p = np.zeros((L, m, J))
    theta = np.zeros((L, n, J))
    omega = np.zeros((L, m, J))
    for l in range(L):
        theta[l] = maps.theta_map(q[:l], p[:l], y, l)
        if check_every_block:
            _check_finite(theta[l], l, "theta")
        p[l] = X.T @ theta[l]
        if check_every_block:
            _check_finite(p[l], l, "p")
        omega[l] = maps.omega_map(p[: l + 1], q[:l], y, l)
        if check_every_block:
            _check_finite(omega[l], l, "omega")
        q[l] = (X @ omega[l]) / m
        _check_finite(q[l], l, "q")
    return Trajectory(
        q=q, p=p, theta=theta, omega=omega,
        meta={"m": m, "n": n, "J": J, "L": L, "seed": dataset.seed, "tag": "original"},
    )


def residual_norm(traj: Trajectory, dataset) -> float:
    """Zero-form residual under the block norm max{||q(l)||_2, ||p(l)||_2/sqrt(m)}:
    how far the stored responses are from (1/m) X omega and X^T theta."""
    X = dataset.X
    m = X.shape[1]
    worst = 0.0
    for l in range(traj.L):
        rq = traj.q[l] - (X @ traj.omega[l]) / m
        rp = traj.p[l] - X.T @ traj.theta[l]
        worst = max(worst, float(np.linalg.norm(rq)), float(np.linalg.norm(rp)) / np.sqrt(m))
    return worst


def export_columnar(traj: Trajectory, path):
    """Debug dump: one row per (l, block, flat index), 17-significant-digit
    decimal values."""
    blocks = [("q", traj.q), ("p", traj.p), ("theta", traj.theta), ("omega", traj.omega)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("l,block,index,value\n")
        for l in range(traj.L):
            for name, arr in blocks:
                flat = arr[l].reshape(-1)
                for i, v in enumerate(flat):
                    fh.write(f"{l},{name},{i},{v:.17g}\n")
