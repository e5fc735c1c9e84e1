"""Single-layer model: activations, losses, the dual map and linear
first-order algorithm coefficients.

The trained model is a weight vector theta; features are f = sigma(X^T theta)
and the cost is L(theta) = (1/m) sum_i loss(f_i, y_i).  Any linear first-order
full-batch algorithm is encoded by coefficients (lambda(l), Lambda(mu,l)):

    theta(l) = theta_0 * lambda(l) - sum_{mu<l} q(mu) * Lambda(mu,l),
    q(mu) = grad L(theta(mu)).

The gradient has the elementwise dual form omega(p, y) = loss'(sigma(p), y) * sigma'(p),
so the whole procedure fits the query/response recursion of the trajectory engine.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidRange
from .trajectory import DynamicsMaps


def _sigmoid(p):
    out = np.empty_like(p, dtype=p.dtype if np.issubdtype(p.dtype, np.floating) else float)
    pos = p >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-p[pos]))
    ep = np.exp(p[~pos])
    out[~pos] = ep / (1.0 + ep)
    return out


def _sigmoid_prime(p):
    s = _sigmoid(np.asarray(p))
    return s * (1.0 - s)


def _softplus(p):
    return np.logaddexp(0.0, p)


def _sigmoid_of(p):
    return _sigmoid(np.asarray(p))


def _relu(p):
    return np.maximum(p, 0.0)


def _relu_prime(p):
    # derivative at 0 fixed to 0 for determinism
    return (np.asarray(p) > 0).astype(float)


def _identity(p):
    return np.asarray(p)


def _ones_like(p):
    return np.ones_like(np.asarray(p, dtype=float))


def _zeros_like(p):
    return np.zeros_like(np.asarray(p, dtype=float))


@dataclass(frozen=True)
class Activation:
    value: Callable
    derivative: Callable
    tag: str
    second_derivative: Callable = None  # optional; enables exact dual slopes

    @staticmethod
    def from_tag(tag):
        if tag == "soft_relu":
            # log(1 + e^p), derivative sigmoid(p)
            return Activation(value=_softplus, derivative=_sigmoid_of,
                              second_derivative=_sigmoid_prime, tag="soft_relu")
        if tag == "relu":
            # curvature 0 almost everywhere
            return Activation(value=_relu, derivative=_relu_prime,
                              second_derivative=_zeros_like, tag="relu")
        if tag == "linear":
            return Activation(value=_identity, derivative=_ones_like,
                              second_derivative=_zeros_like, tag="linear")
        raise ValueError(f"unknown activation tag {tag!r}")


def _sq_value(f, y):
    return 0.5 * (f - y) ** 2


def _sq_d(f, y):
    return f - y


def _sq_d2(f, y):
    return np.ones_like(np.asarray(f, dtype=float))


def _logistic_value(f, y):
    return np.logaddexp(0.0, -y * f)


def _logistic_d(f, y):
    return -y * _sigmoid(-y * np.asarray(f))


def _logistic_d2(f, y):
    return y * y * _sigmoid_prime(-y * np.asarray(f))


@dataclass(frozen=True)
class Loss:
    value: Callable   # (f, y) -> loss
    d_df: Callable    # derivative in the first argument
    tag: str
    d2_df: Callable = None  # optional second derivative in f

    @staticmethod
    def from_tag(tag):
        if tag == "squared":
            return Loss(value=_sq_value, d_df=_sq_d, d2_df=_sq_d2, tag="squared")
        if tag == "logistic":
            return Loss(value=_logistic_value, d_df=_logistic_d,
                        d2_df=_logistic_d2, tag="logistic")
        raise ValueError(f"unknown loss tag {tag!r}")


@dataclass(frozen=True)
class AlgoCoeffs:
    lam: np.ndarray      # (L,) lambda(l)
    Lambda: np.ndarray   # (L, L) strictly upper, Lambda[mu, l]

    def __post_init__(self):
        L = len(self.lam)
        if self.Lambda.shape != (L, L):
            raise ValueError("Lambda must be (L, L)")
        if np.any(np.tril(self.Lambda) != 0.0):
            raise ValueError("Lambda must be strictly upper triangular")

    @property
    def L(self):
        return len(self.lam)


def momentum_coeffs(t, s, L) -> AlgoCoeffs:
    """Momentum gradient descent with step size t and forgetting factor s:
    lambda(l) = 1, Lambda(mu,l) = t*(1 - s^(l-mu)) for mu < l.  s = 0 is
    plain gradient descent."""
    if not (0.0 <= s < 1.0):
        raise InvalidRange(f"momentum constant s={s} outside [0, 1)")
    if t < 0.0:
        raise InvalidRange(f"step size t={t} negative")
    lam = np.ones(L)
    Lam = np.zeros((L, L))
    for l in range(L):
        for mu in range(l):
            Lam[mu, l] = t * (1.0 - s ** (l - mu))
    return AlgoCoeffs(lam=lam, Lambda=Lam)


def omega_map(p, y, activation: Activation, loss: Loss):
    """Elementwise dual: omega_i = loss'(sigma(p_i), y_i) * sigma'(p_i)."""
    p = np.asarray(p)
    return loss.d_df(activation.value(p), y) * activation.derivative(p)


def omega_prime(p, y, activation: Activation, loss: Loss, fd_step=1e-6):
    """Elementwise slope of the dual in the field p.  Exact when second
    derivatives are declared, centered finite differences otherwise."""
    p = np.asarray(p)
    if activation.second_derivative is not None and loss.d2_df is not None:
        f = activation.value(p)
        sp = activation.derivative(p)
        return loss.d2_df(f, y) * sp * sp + loss.d_df(f, y) * activation.second_derivative(p)
    hi = omega_map(p + fd_step, y, activation, loss)
    lo = omega_map(p - fd_step, y, activation, loss)
    return (hi - lo) / (2.0 * fd_step)


def theta_map(q_history, coeffs: AlgoCoeffs, theta0, l):
    """theta(l) = theta_0 lambda(l) - sum_{mu<l} q(mu) Lambda(mu,l)."""
    th = coeffs.lam[l] * theta0
    if l:
        th = th.astype(float, copy=True) if th is theta0 else th
        for mu in range(l):
            c = coeffs.Lambda[mu, l]
            if c != 0.0:
                th = th - c * q_history[mu]
    return th


def theta_matrix_form(q_blocks, coeffs: AlgoCoeffs, theta0):
    """All iterates at once: Theta = theta_0 lambda^T - Q Lambda, with
    Q the (n, L) matrix of gradients.  Oracle for the recursive map."""
    Q = np.stack([q.reshape(-1) for q in q_blocks], axis=1)
    return np.outer(theta0.reshape(-1), coeffs.lam) - Q @ coeffs.Lambda


def make_maps(activation: Activation, loss: Loss, coeffs: AlgoCoeffs, theta0):
    """Package the model as DynamicsMaps for the trajectory engines."""
    th0 = np.asarray(theta0, dtype=float)
    if th0.ndim == 1:
        th0 = th0[:, None]

    def _theta(q_hist, p_hist, y, l):
        return theta_map(q_hist, coeffs, th0, l)

    def _omega(p_hist, q_hist, y, l):
        return omega_map(p_hist[l], y[:, None], activation, loss)

    return DynamicsMaps(theta_map=_theta, omega_map=_omega, J=1, tag="perceptron")


def decision_statistic(f, activation: Activation):
    """Signed classification statistic: f - sigma(0), so monotone
    activations classify by the sign of the pre-activation."""
    f0 = float(activation.value(np.array(0.0)))
    return f - f0


def metric_from_p(p_blocks, labels, activation, loss, kind="loss"):
    """Per-step metric curve computed from the dual fields p(l) alone."""
    y = labels
    out = np.empty(len(p_blocks))
    for l, p in enumerate(p_blocks):
        pl = p.reshape(-1)
        f = activation.value(pl)
        if kind == "loss":
            out[l] = float(np.mean(loss.value(f, y)))
        elif kind == "zero_one":
            stat = decision_statistic(f, activation)
            out[l] = float(np.mean(stat * y <= 0))
        else:
            raise ValueError(f"unknown metric kind {kind!r}")
    return out


def training_metric(traj, dataset, activation, loss, kind="loss"):
    """Metric curve of a trajectory: kind="loss" gives L(theta(l)); kind=
    "zero_one" the misclassification rate of the decision statistic."""
    return metric_from_p([traj.p[l] for l in range(traj.L)], dataset.labels,
                         activation, loss, kind=kind)
