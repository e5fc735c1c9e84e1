"""Experiment orchestration: configuration, seeded replications,
aggregation, persistence and the statistical verification suites.

Configs are flat INI files (section.key = value); every key can be
overridden on the command line.  Results are bitwise-reproducible given
(config, master seed) regardless of the worker count: each replication
gets its own counter-based seed and results are reduced in index order.

CSV contract (exact header, decimal text, 17 significant digits):

    method,metric,l,mean,variance,stderr,replications,m,n,gamma,t,s,coupling,sigma,z,config_hash

The refined method's rows carry z = -1, marking the 2H(0) - H(1)
continuation to z^2 = -1.
"""

import configparser
import hashlib
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .dmf import dmf_metric_curve, serialize_solution, solve_dmf
from .mixture import fixed_counts, realize_means, sample_dataset, two_class_spec, Dataset
from .perceptron import (Activation, AlgoCoeffs, Loss, decision_statistic,
                         make_maps, momentum_coeffs, training_metric)
from .refine import (extrapolated_normalized_variance, matched_metric_curves,
                     normalized_variance, z_extrapolate)
from .surrogate import (GaussianAtoms, closed_form_second_moments,
                        fixed_point_context, run_alternative,
                        run_perturbed_original, sample_phi_prime, sample_psi,
                        stack_draws)
from .trajectory import run_original

CSV_HEADER = ("method,metric,l,mean,variance,stderr,replications,"
              "m,n,gamma,t,s,coupling,sigma,z,config_hash")

DEFAULT_CONFIG = {
    "mixture": {
        "coupling": "-0.5",
        "self_overlap": "1.0",
        "theta0_norm": "0.1",
        "theta0_overlap": "0.0 0.0",
        "frequencies": "0.5 0.5",
        "labels": "-1 1",
        "assignment": "multinomial",
    },
    "model": {"activation": "soft_relu", "loss": "squared"},
    "algorithm": {"t": "0.2", "s": "0.0", "L": "20"},
    "data": {"m": "1000", "gamma": "1.0"},
    "run": {
        "methods": "empirical dmf",
        "replications": "200",
        "master_seed": "1234",
        "metrics": "loss zero_one",
        "out_dir": "runs",
    },
    "surrogate": {"sigma": "0.001", "z": "0.0", "z_pair": "0.0 1.0"},
    "dmf": {"tol": "1e-6", "max_iter": "200", "mc_paths": "100000",
            "damping": "0.5", "curve_paths": "200000"},
    "refine": {"draws": "10000", "rounds": "1"},
}


@dataclass
class ExperimentConfig:
    raw: configparser.ConfigParser

    # -- constructors -------------------------------------------------
    @staticmethod
    def default():
        cp = configparser.ConfigParser()
        cp.read_dict(DEFAULT_CONFIG)
        return ExperimentConfig(raw=cp)

    @staticmethod
    def from_file(path):
        cfg = ExperimentConfig.default()
        read = cfg.raw.read(path)
        if not read:
            raise FileNotFoundError(path)
        cfg.validate()
        return cfg

    def override(self, assignments):
        """Apply --set section.key=value pairs."""
        for item in assignments:
            key, _, value = item.partition("=")
            section, _, name = key.strip().partition(".")
            if not self.raw.has_section(section):
                self.raw.add_section(section)
            self.raw.set(section, name.strip(), value.strip())
        return self

    # -- typed accessors ----------------------------------------------
    def _get(self, sec, key):
        return self.raw.get(sec, key)

    def floats(self, sec, key):
        return [float(v) for v in self._get(sec, key).split()]

    @property
    def m(self):
        return self.raw.getint("data", "m")

    @property
    def gamma(self):
        return self.raw.getfloat("data", "gamma")

    @property
    def n(self):
        return max(1, round(self.gamma * self.m))

    @property
    def t(self):
        return self.raw.getfloat("algorithm", "t")

    @property
    def s(self):
        return self.raw.getfloat("algorithm", "s")

    @property
    def L(self):
        return self.raw.getint("algorithm", "L")

    @property
    def coupling(self):
        return self.raw.getfloat("mixture", "coupling")

    @property
    def master_seed(self):
        return self.raw.getint("run", "master_seed")

    @property
    def replications(self):
        return self.raw.getint("run", "replications")

    @property
    def methods(self):
        return self._get("run", "methods").split()

    @property
    def metrics(self):
        return self._get("run", "metrics").split()

    @property
    def sigma(self):
        return self.raw.getfloat("surrogate", "sigma")

    @property
    def z(self):
        return self.raw.getfloat("surrogate", "z")

    @property
    def out_dir(self):
        return self._get("run", "out_dir")

    def spec(self, ambient_dim=None):
        mix = self.raw["mixture"]
        return two_class_spec(
            coupling=float(mix["coupling"]),
            ambient_dim=self.n if ambient_dim is None else ambient_dim,
            theta0_norm=float(mix["theta0_norm"]),
            theta0_overlap=tuple(self.floats("mixture", "theta0_overlap")),
            self_overlap=float(mix["self_overlap"]),
            frequencies=tuple(self.floats("mixture", "frequencies")),
            labels=tuple(self.floats("mixture", "labels")),
        )

    def activation(self):
        return Activation.from_tag(self._get("model", "activation"))

    def loss(self):
        return Loss.from_tag(self._get("model", "loss"))

    def coeffs(self) -> AlgoCoeffs:
        return momentum_coeffs(self.t, self.s, self.L)

    def validate(self):
        self.spec(ambient_dim=max(self.n, 4))
        self.activation()
        self.loss()
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.n < 1:
            raise ValueError("n = round(gamma m) must be >= 1")
        for kind in self.metrics:
            if kind not in ("loss", "zero_one"):
                raise ValueError(f"unknown metric {kind!r}")
        return self

    # -- identity -----------------------------------------------------
    def canonical_bytes(self):
        buf = io.StringIO()
        for sec in sorted(self.raw.sections()):
            buf.write(f"[{sec}]\n")
            for key in sorted(self.raw[sec]):
                buf.write(f"{key} = {self.raw[sec][key]}\n")
        return buf.getvalue().encode()

    def hash(self):
        return hashlib.sha256(self.canonical_bytes()).hexdigest()[:16]

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.canonical_bytes().decode())

    def echo(self):
        return {sec: dict(self.raw[sec]) for sec in self.raw.sections()}


# ----------------------------------------------------------------------
# Aggregation and persistence
# ----------------------------------------------------------------------

def aggregate_curves(curves):
    """(R, L) per-replication curves -> (mean, variance, stderr)."""
    curves = np.asarray(curves, dtype=float)
    R = curves.shape[0]
    mean = curves.mean(axis=0)
    var = curves.var(axis=0, ddof=1) if R > 1 else np.zeros_like(mean)
    return mean, var, np.sqrt(var / R)


def single_pass_reference(values):
    """Welford accumulator; test oracle for aggregate_curves."""
    count = 0
    mean = 0.0
    m2 = 0.0
    for v in values:
        count += 1
        d = v - mean
        mean += d / count
        m2 += d * (v - mean)
    var = m2 / (count - 1) if count > 1 else 0.0
    return mean, var, np.sqrt(var / count) if count else 0.0


@dataclass
class ExperimentResult:
    rows: list = field(default_factory=list)   # dict per CSV row
    diagnostics: dict = field(default_factory=dict)
    config_hash: str = ""
    wall_clock: float = 0.0

    def add_curves(self, method, metric, mean, var, se, reps, ctx):
        for l in range(len(mean)):
            self.rows.append(dict(
                method=method, metric=metric, l=l, mean=mean[l],
                variance=var[l], stderr=se[l], replications=reps, **ctx,
            ))

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(CSV_HEADER + "\n")
            for r in self.rows:
                fh.write(
                    f"{r['method']},{r['metric']},{r['l']},{r['mean']:.17g},"
                    f"{r['variance']:.17g},{r['stderr']:.17g},{r['replications']},"
                    f"{r['m']},{r['n']},{r['gamma']:.17g},{r['t']:.17g},"
                    f"{r['s']:.17g},{r['coupling']:.17g},{r['sigma']:.17g},"
                    f"{r['z']:.17g},{r['config_hash']}\n"
                )

    def to_json(self, path, config_echo):
        payload = dict(config=config_echo, config_hash=self.config_hash,
                       wall_clock=self.wall_clock, diagnostics=self.diagnostics)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, default=float)
            fh.write("\n")


# ----------------------------------------------------------------------
# Fast empirical replication path (float32, no stored trajectories)
# ----------------------------------------------------------------------

def empirical_curve_rep(spec, means, m, coeffs, activation, loss, metrics,
                        master_seed, rep, assignment="multinomial",
                        dtype=np.float32):
    """One seeded replication of full-batch training; returns
    {metric: (L,) curve}.  float32 by default: statistics of interest sit
    orders of magnitude above the rounding noise, and the large
    acceptance sweeps are generation- and matvec-bound."""
    K = spec.n_components
    n = spec.ambient_dim
    gen_lat = rngmod.stream(master_seed, rngmod.STREAM_DATA, rep, "latents")
    if assignment == "multinomial":
        latents = gen_lat.choice(K, size=m, p=spec.frequencies)
    else:
        latents = np.repeat(np.arange(K), fixed_counts(spec.frequencies, m))
    labels = spec.labels[latents].astype(dtype)
    gen = rngmod.fast_stream(master_seed, rngmod.STREAM_DATA, rep, "noise")
    X = gen.standard_normal((n, m), dtype=dtype)
    if not all(c.is_identity() for c in spec.components):
        from .mixture import cov_half_apply
        for k, comp in enumerate(spec.components):
            ix = np.flatnonzero(latents == k)
            X[:, ix] = cov_half_apply(comp, X[:, ix]).astype(dtype)
    X += means[:, latents].astype(dtype)

    L = coeffs.L
    theta0 = means[:, -1].astype(dtype)
    lam = coeffs.lam.astype(dtype)
    Lam = coeffs.Lambda.astype(dtype)
    q_hist = np.zeros((L, n), dtype=dtype)
    curves = {kind: np.empty(L) for kind in metrics}
    f0 = float(activation.value(np.array(0.0)))
    for l in range(L):
        th = lam[l] * theta0
        for mu in range(l):
            cmu = Lam[mu, l]
            if cmu:
                th = th - cmu * q_hist[mu]
        p = X.T @ th
        f = activation.value(p)
        for kind in metrics:
            if kind == "loss":
                curves[kind][l] = float(np.mean(loss.value(f, labels)))
            else:
                curves[kind][l] = float(np.mean((f - f0) * labels <= 0))
        om = loss.d_df(f, labels) * activation.derivative(p)
        q_hist[l] = (X @ om) / m
    return curves


def _emp_worker(args):
    (spec, means, m, coeffs, act, loss, metrics, seed, reps, assignment) = args
    return [empirical_curve_rep(spec, means, m, coeffs, act, loss, metrics,
                                seed, r, assignment) for r in reps]


def empirical_curves(spec, means, m, coeffs, activation, loss, metrics,
                     master_seed, replications, assignment="multinomial",
                     threads=1):
    """All replications, reduced in index order regardless of worker
    count: {metric: (R, L)}."""
    out = {kind: np.empty((replications, coeffs.L)) for kind in metrics}
    rep_ids = list(range(replications))
    if threads <= 1:
        results = _emp_worker((spec, means, m, coeffs, activation, loss,
                               metrics, master_seed, rep_ids, assignment))
        for r, cur in zip(rep_ids, results):
            for kind in metrics:
                out[kind][r] = cur[kind]
        return out
    chunks = [rep_ids[i::threads] for i in range(threads)]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        futures = [ex.submit(_emp_worker, (spec, means, m, coeffs, activation,
                                           loss, metrics, master_seed, ch,
                                           assignment))
                   for ch in chunks if ch]
        for ch, fut in zip([c for c in chunks if c], futures):
            for r, cur in zip(ch, fut.result()):
                for kind in metrics:
                    out[kind][r] = cur[kind]
    return out


def surrogate_prediction_curves(spec, means, m, coeffs, activation, loss,
                                sigma, z_values, n_draws, seed, kind="loss",
                                stream_id=rngmod.STREAM_ALTERNATIVE):
    """Per-draw metric curves of the exact alternative process at each z,
    with common random numbers across z and antithetic Gamma pairs (rows
    2r and 2r+1 share every atom, Gamma negated), so permutation-
    invariant statistics are exactly even in z.  This is the engine
    behind the z^2 = -1 continuation of finite-size statistics."""
    from .perceptron import make_maps, training_metric

    L = coeffs.L
    template = sample_dataset(spec, m, seed, means=means, assignment="fixed")
    maps = make_maps(activation, loss, coeffs, means[:, -1])
    out = {z: np.empty((n_draws, L)) for z in z_values}
    n_pairs = (n_draws + 1) // 2
    for r in range(n_pairs):
        atoms = GaussianAtoms.sample(template, L, seed, rep=r,
                                     stream_id=stream_id)
        flipped = None
        for z in z_values:
            for j, sgn in enumerate((1.0, -1.0)):
                row = 2 * r + j
                if row >= n_draws:
                    continue
                if z == 0.0 and j == 1:
                    out[z][row] = out[z][row - 1]
                    continue
                if sgn < 0 and flipped is None:
                    flipped = GaussianAtoms(
                        G=atoms.G, H=atoms.H, W=atoms.W,
                        Gamma=[-g for g in atoms.Gamma], U=atoms.U, V=atoms.V)
                a = atoms if sgn > 0 else flipped
                traj = run_alternative(template, maps, sigma, z, a, L)
                out[z][row] = training_metric(traj, template, activation,
                                              loss, kind)
    return out


# ----------------------------------------------------------------------
# Experiment driver
# ----------------------------------------------------------------------

def run_experiment(config: ExperimentConfig, threads=1, out_dir=None) -> ExperimentResult:
    t0 = time.time()
    config.validate()
    m, n = config.m, config.n
    spec = config.spec()
    act, loss, coeffs = config.activation(), config.loss(), config.coeffs()
    metrics = config.metrics
    seed = config.master_seed
    chash = config.hash()
    means = realize_means(spec, seed)
    result = ExperimentResult(config_hash=chash)
    ctx = dict(m=m, n=n, gamma=config.gamma, t=config.t, s=config.s,
               coupling=config.coupling, sigma=config.sigma, z=config.z,
               config_hash=chash)
    assignment = config._get("mixture", "assignment")
    sol = None

    def dmf_solution():
        nonlocal sol
        if sol is None:
            sol = solve_dmf(
                spec, config.gamma, coeffs, act, loss,
                tol=config.raw.getfloat("dmf", "tol"),
                max_iter=config.raw.getint("dmf", "max_iter"),
                mc_paths=config.raw.getint("dmf", "mc_paths"),
                damping=config.raw.getfloat("dmf", "damping"),
                seed=seed,
            )
            result.diagnostics["dmf"] = dict(
                residual=sol.residual, iterations=sol.iterations,
                mc_paths=sol.mc_paths)
        return sol

    for method in config.methods:
        if method == "empirical":
            curves = empirical_curves(spec, means, m, coeffs, act, loss,
                                      metrics, seed, config.replications,
                                      assignment=assignment, threads=threads)
            for kind in metrics:
                result.add_curves(method, kind, *aggregate_curves(curves[kind]),
                                  config.replications, ctx)
        elif method == "dmf":
            s = dmf_solution()
            for kind in metrics:
                curve = dmf_metric_curve(
                    s, act, loss, kind=kind,
                    n_paths=config.raw.getint("dmf", "curve_paths"), seed=seed + 1)
                result.add_curves(method, kind, curve, np.zeros_like(curve),
                                  np.zeros_like(curve), 1, ctx)
        elif method in ("alternative", "perturbed"):
            runner = run_alternative if method == "alternative" else run_perturbed_original
            stream = (rngmod.STREAM_ALTERNATIVE if method == "alternative"
                      else rngmod.STREAM_PERTURBED)
            template = _dataset_with_fixed_structure(spec, means, m, seed,
                                                     assignment)
            curves = {kind: np.empty((config.replications, coeffs.L))
                      for kind in metrics}
            for r in range(config.replications):
                ds = (template if method == "alternative" else
                      _resample_noise(template, seed, r))
                maps = make_maps(act, loss, coeffs, means[:, -1])
                atoms = GaussianAtoms.sample(ds, coeffs.L, seed, rep=r,
                                             stream_id=stream)
                traj = runner(ds, maps, config.sigma, config.z, atoms, coeffs.L)
                for kind in metrics:
                    curves[kind][r] = training_metric(traj, ds, act, loss, kind)
            for kind in metrics:
                result.add_curves(method, kind, *aggregate_curves(curves[kind]),
                                  config.replications, ctx)
        elif method == "refined":
            s = dmf_solution()
            z0, z1 = config.floats("surrogate", "z_pair")
            draws = config.raw.getint("refine", "draws")
            for kind in metrics:
                per_z = matched_metric_curves(s, act, loss, m, [z0, z1],
                                              draws, seed, kind=kind)
                mean = z_extrapolate(per_z[z0].mean(axis=0), per_z[z1].mean(axis=0))
                u0 = per_z[z0]
                u1 = per_z[z1]
                per_draw = 2.0 * u0 - u1
                var = per_draw.var(axis=0, ddof=1)
                se = np.sqrt(var / draws)
                rctx = dict(ctx)
                rctx["z"] = -1.0
                result.add_curves(method, kind, mean, var, se, draws, rctx)
            result.diagnostics.setdefault("refined", {})["draws"] = draws
        else:
            raise ValueError(f"unknown method {method!r}")

    result.wall_clock = time.time() - t0
    if out_dir is None:
        out_dir = config.out_dir
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        result.to_csv(os.path.join(out_dir, "curves.csv"))
        result.to_json(os.path.join(out_dir, "summary.json"), config.echo())
        if sol is not None:
            serialize_solution(sol, os.path.join(out_dir, "dmf_solution.txt"),
                               config_hash=chash)
    return result


def _dataset_with_fixed_structure(spec, means, m, seed, assignment):
    return sample_dataset(spec, m, seed, means=means,
                          assignment="fixed" if assignment == "fixed"
                          else "multinomial")


def _resample_noise(template: Dataset, seed, rep):
    """Fresh centered Gaussian data on the fixed structure (latents,
    means) of a template dataset."""
    spec = template.spec
    n, m = template.n, template.m
    gen = rngmod.fast_stream(seed, rngmod.STREAM_DATA, rep, "Xtilde")
    X = gen.standard_normal((n, m))
    if not all(c.is_identity() for c in spec.components):
        from .mixture import cov_half_apply
        for k, comp in enumerate(spec.components):
            ix = template.rows_of(k)
            X[:, ix] = cov_half_apply(comp, X[:, ix])
    X += template.means_realized[:, template.latents]
    return Dataset(X=X, latents=template.latents.copy(),
                   labels=template.labels.copy(),
                   means_realized=template.means_realized,
                   spec=spec, seed=seed,
                   rows_by_component=template.rows_by_component)


# ----------------------------------------------------------------------
# Verification suites
# ----------------------------------------------------------------------

def _panel(traj, act, loss):
    """Fixed statistic panel of a trajectory: per-l block means, ||q||^2,
    cross products <q(l),q(l')>, ||p||^2/m, and the loss curve."""
    L = traj.L
    m = traj.m
    stats = {}
    for l in range(L):
        ql = traj.q[l].reshape(-1)
        pl = traj.p[l].reshape(-1)
        stats[f"mean_q[{l}]"] = ql.mean()
        stats[f"mean_p[{l}]"] = pl.mean()
        stats[f"normsq_q[{l}]"] = ql @ ql
        stats[f"normsq_p[{l}]/m"] = (pl @ pl) / m
        for lp in range(l + 1, L):
            stats[f"<q[{l}],q[{lp}]>"] = ql @ traj.q[lp].reshape(-1)
    return stats


def verify_theorem1(config: ExperimentConfig, n_reps=None, threads=1):
    """Two-sample comparison of the alternative-process zero and the
    perturbed-original zero over seeded replications: per-statistic
    standardized differences with a 4-combined-SE gate."""
    config.validate()
    m, n, L = config.m, config.n, config.L
    if not (m <= 64 and n <= 32 and L <= 4):
        raise ValueError("theorem-1 verification is a small-dimension suite")
    if config.sigma <= 0:
        raise ValueError("sigma must be positive here")
    spec = config.spec()
    act, loss, coeffs = config.activation(), config.loss(), config.coeffs()
    seed = config.master_seed
    R = config.replications if n_reps is None else n_reps
    means = realize_means(spec, seed)
    template = sample_dataset(spec, m, seed, means=means, assignment="fixed")
    maps = make_maps(act, loss, coeffs, means[:, -1])

    names = None
    sums = {}
    for pipe, runner, stream in (
        ("psi", run_alternative, rngmod.STREAM_ALTERNATIVE),
        ("phi", run_perturbed_original, rngmod.STREAM_PERTURBED),
    ):
        acc1 = acc2 = None
        for r in range(R):
            ds = template if pipe == "psi" else _resample_noise(template, seed, r)
            atoms = GaussianAtoms.sample(ds, L, seed, rep=r, stream_id=stream)
            traj = runner(ds, maps, config.sigma, config.z, atoms, L)
            stats = _panel(traj, act, loss)
            curve = training_metric(traj, ds, act, loss, "loss")
            for l in range(L):
                stats[f"loss[{l}]"] = curve[l]
            if names is None:
                names = list(stats)
            v = np.array([stats[k] for k in names])
            if acc1 is None:
                acc1 = np.zeros_like(v)
                acc2 = np.zeros_like(v)
            acc1 += v
            acc2 += v * v
        mean = acc1 / R
        var = np.maximum(acc2 / R - mean**2, 0.0) * R / (R - 1)
        sums[pipe] = (mean, np.sqrt(var / R))

    (m1, se1), (m2, se2) = sums["psi"], sums["phi"]
    zscores = (m1 - m2) / np.sqrt(se1**2 + se2**2)
    report = {
        "statistics": names,
        "psi_mean": m1.tolist(), "phi_mean": m2.tolist(),
        "psi_se": se1.tolist(), "phi_se": se2.tolist(),
        "z_scores": zscores.tolist(),
        "max_abs_z": float(np.max(np.abs(zscores))),
        "threshold": 4.0,
        "n_statistics": len(names),
        "replications": R,
        "passed": bool(np.all(np.abs(zscores) <= 4.0)),
        "note": ("per-statistic 4-SE gate; with "
                 f"{len(names)} statistics the family-wise chance rate is "
                 "about 6e-5 per statistic (Bonferroni: compare 4.0 against "
                 "the per-family quantile before reading a single exceedance "
                 "as a failure)"),
    }
    return report


def verify_moments(config: ExperimentConfig, n_draws=100_000, chunk=2000):
    """At one frozen xi: MC second moments of the two processes against
    each other and against the closed forms."""
    config.validate()
    m, n, L = config.m, config.n, config.L
    spec = config.spec()
    act, loss, coeffs = config.activation(), config.loss(), config.coeffs()
    seed = config.master_seed
    means = realize_means(spec, seed)
    ds = sample_dataset(spec, m, seed, means=means, assignment="fixed")
    maps = make_maps(act, loss, coeffs, means[:, -1])
    traj = run_original(ds, maps, L)
    Theta = traj.theta_matrix()
    Omega = traj.omega_matrix()

    ctx = fixed_point_context(Theta, Omega, ds, config.sigma, config.z)
    D = L * (n + m)
    closed = closed_form_second_moments(Theta, Omega, ds, config.sigma, config.z)

    mom = {}
    for pipe, sampler in (("psi", sample_psi), ("phi", sample_phi_prime)):
        S1 = np.zeros((D, D))
        S2 = np.zeros((D, D))
        done = 0
        rep = 0
        while done < n_draws:
            b = min(chunk, n_draws - done)
            q, p = sampler(ctx, seed, rep, b)
            V = stack_draws(q, p)
            S1 += V.T @ V
            V2 = V * V
            S2 += V2.T @ V2
            done += b
            rep += 1
        M = S1 / n_draws
        var = np.maximum(S2 / n_draws - M**2, 0.0)
        mom[pipe] = (M, np.sqrt(var / n_draws))

    (M1, E1), (M2, E2) = mom["psi"], mom["phi"]
    se12 = np.sqrt(E1**2 + E2**2)
    se12[se12 == 0] = np.inf
    z12 = np.abs(M1 - M2) / se12
    E1s = np.where(E1 == 0, np.inf, E1)
    E2s = np.where(E2 == 0, np.inf, E2)
    z1c = np.abs(M1 - closed) / E1s
    z2c = np.abs(M2 - closed) / E2s
    report = {
        "entries": int(D * D),
        "n_draws": n_draws,
        "max_abs_z_psi_vs_phi": float(z12.max()),
        "max_abs_z_psi_vs_closed": float(z1c.max()),
        "max_abs_z_phi_vs_closed": float(z2c.max()),
        "threshold": 4.0,
        "passed": bool(z12.max() <= 4.0 and z1c.max() <= 4.0 and z2c.max() <= 4.0),
        "note": ("entrywise 4-combined-SE gate over all second-moment "
                 "entries; entries are strongly correlated, a Bonferroni "
                 "reading of isolated exceedances is conservative"),
    }
    return report
