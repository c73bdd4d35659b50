"""Drift-reducing network: feature-motion statistics, an 11-30-3 MLP and its
Levenberg-Marquardt trainer with Bayesian regularization.

The network maps the VO rotation vector of a frame together with per-axis
statistics of the feature displacements to a refined rotation vector:

    x = [xi (3), mu_u, mu_v, var_u, var_v, skew_u, skew_v, rms_u, rms_v]
    h = logistic(W1 xs + b1)          xs: standardized x
    y = W2 h + b2                     then de-standardized

Training minimizes F = beta * E_D + alpha * E_W, E_D the sum of squared
(standardized) residuals and E_W the sum of squared weights. With Bayesian
regularization alpha and beta are re-estimated every epoch from the
effective number of parameters gamma (Foresee and Hagan, 1997).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import (
    AlignmentMismatch,
    EmptyInput,
    EmptyMatches,
    ModelFormatError,
    NonFiniteLoss,
    SingularNormalMatrix,
)
from .geometry import MotionIncrement, UnitQuaternion, quat_exp, quat_log
from .matches import MatchedFeatureSet

N_IN, N_HIDDEN, N_OUT = 11, 30, 3
N_PARAMS = N_HIDDEN * N_IN + N_HIDDEN + N_OUT * N_HIDDEN + N_OUT  # 453
FORMAT_VERSION = 1
_ZERO_VAR = 1e-12

_W1 = slice(0, N_HIDDEN * N_IN)
_B1 = slice(_W1.stop, _W1.stop + N_HIDDEN)
_W2 = slice(_B1.stop, _B1.stop + N_OUT * N_HIDDEN)
_B2 = slice(_W2.stop, N_PARAMS)


# --------------------------------------------------------------------------
# inputs


@dataclass(frozen=True)
class FeatureMotionStats:
    """Per-axis mean, population variance, skewness and RMS of the feature
    displacements (pixels, pixels^2, -, pixels)."""

    mu_u: float
    mu_v: float
    var_u: float
    var_v: float
    skew_u: float
    skew_v: float
    rms_u: float
    rms_v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.mu_u, self.mu_v, self.var_u, self.var_v,
                         self.skew_u, self.skew_v, self.rms_u, self.rms_v])


@dataclass(frozen=True)
class TrainingSample:
    input: np.ndarray
    target: np.ndarray


def feature_motion(matches: MatchedFeatureSet) -> np.ndarray:
    if len(matches) == 0:
        raise EmptyMatches("no matched features")
    return matches.deltas


def _axis_moments(a):
    mu = a.mean()
    dev = a - mu
    var = float(np.mean(dev * dev))
    skew = float(np.mean(dev ** 3) / var ** 1.5) if var >= _ZERO_VAR else 0.0
    rms = math.sqrt(float(np.mean(a * a)))
    return float(mu), var, skew, rms


def compute_stats(deltas) -> FeatureMotionStats:
    d = np.asarray(deltas, dtype=float).reshape(-1, 2)
    if len(d) == 0:
        raise EmptyInput("no displacement vectors")
    mu_u, var_u, sk_u, rms_u = _axis_moments(d[:, 0])
    mu_v, var_v, sk_v, rms_v = _axis_moments(d[:, 1])
    return FeatureMotionStats(mu_u, mu_v, var_u, var_v, sk_u, sk_v, rms_u, rms_v)


def build_input(raw_dq: UnitQuaternion, stats: FeatureMotionStats) -> np.ndarray:
    return np.concatenate([quat_log(raw_dq), stats.as_array()])


def frame_input(raw_dq: UnitQuaternion, matches: MatchedFeatureSet) -> np.ndarray:
    return build_input(raw_dq, compute_stats(feature_motion(matches)))


# --------------------------------------------------------------------------
# model


def _standardizer(a):
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    std[std < 1e-12] = 1.0
    return mean, std


@dataclass
class MlpModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    input_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_IN))
    input_std: np.ndarray = field(default_factory=lambda: np.ones(N_IN))
    target_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_OUT))
    target_std: np.ndarray = field(default_factory=lambda: np.ones(N_OUT))
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {"W1": (N_HIDDEN, N_IN), "b1": (N_HIDDEN,), "W2": (N_OUT, N_HIDDEN),
                  "b2": (N_OUT,), "input_mean": (N_IN,), "input_std": (N_IN,),
                  "target_mean": (N_OUT,), "target_std": (N_OUT,)}
        for name, shape in shapes.items():
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ModelFormatError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ModelFormatError(f"{name} has non-finite entries")
            setattr(self, name, arr)
        if np.any(self.input_std <= 0) or np.any(self.target_std <= 0):
            raise ModelFormatError("standardization std entries must be positive")

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def with_params(self, w) -> MlpModel:
        w = np.asarray(w, dtype=float)
        return MlpModel(w[_W1].reshape(N_HIDDEN, N_IN), w[_B1].copy(),
                        w[_W2].reshape(N_OUT, N_HIDDEN), w[_B2].copy(),
                        self.input_mean, self.input_std, self.target_mean,
                        self.target_std, dict(self.metadata))

    @classmethod
    def zeros(cls, **kw) -> MlpModel:
        return cls(np.zeros((N_HIDDEN, N_IN)), np.zeros(N_HIDDEN),
                   np.zeros((N_OUT, N_HIDDEN)), np.zeros(N_OUT), **kw)

    def standardize(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.input_mean) / self.input_std


def _unpack(w):
    return (w[_W1].reshape(N_HIDDEN, N_IN), w[_B1],
            w[_W2].reshape(N_OUT, N_HIDDEN), w[_B2])


def _net(w, Xs):
    """Network output in standardized target units, plus hidden activations."""
    W1, b1, W2, b2 = _unpack(w)
    H = expit(Xs @ W1.T + b1)
    return H @ W2.T + b2, H


def forward(model: MlpModel, x) -> np.ndarray:
    """Refined rotation vector(s) for one 11-vector or an (N, 11) batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    Y, _ = _net(model.params, model.standardize(np.atleast_2d(x)))
    Y = Y * model.target_std + model.target_mean
    return Y[0] if single else Y


def _jacobian(w, Xs):
    """d(target - output)/dw for standardized inputs, rows sample-major."""
    _, _, W2, _ = _unpack(w)
    n = len(Xs)
    _, H = _net(w, Xs)
    D = H * (1.0 - H)                                  # (n, hidden)
    G = W2[None, :, :] * D[:, None, :]                 # d y_j / d pre_h, (n, out, hidden)
    J = np.empty((n, N_OUT, N_PARAMS))
    J[:, :, _W1] = (G[:, :, :, None] * Xs[:, None, None, :]).reshape(n, N_OUT, -1)
    J[:, :, _B1] = G
    J[:, :, _W2] = 0.0
    for j in range(N_OUT):
        J[:, j, _W2.start + j * N_HIDDEN:_W2.start + (j + 1) * N_HIDDEN] = H
    J[:, :, _B2] = np.eye(N_OUT)[None]
    return -J.reshape(n * N_OUT, N_PARAMS)


def jacobian(model: MlpModel, inputs) -> np.ndarray:
    """Analytic Jacobian of the residuals (target - output) with respect to
    the flattened weights [W1, b1, W2, b2], in standardized units.

    Shape (3 * batch, 453); row 3 * i + j is output j of sample i.
    """
    Xs = model.standardize(np.atleast_2d(np.asarray(inputs, dtype=float)))
    return _jacobian(model.params, Xs)


def refine_increment(model: MlpModel, raw_dq: UnitQuaternion,
                     matches: MatchedFeatureSet) -> UnitQuaternion:
    return quat_exp(forward(model, frame_input(raw_dq, matches)))


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1500
    mu0: float = 1e-3
    mu_increase: float = 10.0
    mu_decrease: float = 10.0
    mu_max: float = 1e10
    grad_tol: float = 1e-10
    bayesian: bool = True
    seed: int = 0
    # uniform in [-init_scale, init_scale] / sqrt(fan_in)
    init_scale: float = 0.5
    alpha0: float = 0.01
    beta0: float = 1.0

    def __post_init__(self):
        if min(self.mu0, self.mu_increase, self.mu_decrease, self.mu_max) <= 0:
            raise ValueError("damping parameters must be positive")
        if self.mu_increase <= 1 or self.mu_decrease <= 1:
            raise ValueError("damping factors must exceed 1")


@dataclass
class TrainReport:
    data_error: list = field(default_factory=list)
    weight_error: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    beta: list = field(default_factory=list)
    gamma: list = field(default_factory=list)
    mu: list = field(default_factory=list)
    objective_before: list = field(default_factory=list)
    objective_after: list = field(default_factory=list)
    stop_reason: str = ""

    @property
    def epochs(self) -> int:
        return len(self.data_error)

    def rows(self):
        for k in range(self.epochs):
            yield (k + 1, self.data_error[k], self.weight_error[k], self.alpha[k],
                   self.beta[k], self.gamma[k], self.mu[k],
                   self.objective_before[k], self.objective_after[k])

    def to_csv(self) -> str:
        lines = ["epoch,data_error,weight_error,alpha,beta,gamma,mu,objective_before,objective_after"]
        lines += [",".join([str(r[0])] + [repr(float(v)) for v in r[1:]]) for r in self.rows()]
        lines.append(f"# stop_reason={self.stop_reason}")
        return "\n".join(lines) + "\n"


def init_params(seed: int, scale: float = 0.5) -> np.ndarray:
    rng = np.random.default_rng(seed)
    w = np.empty(N_PARAMS)
    w[_W1] = rng.uniform(-scale, scale, N_HIDDEN * N_IN) / math.sqrt(N_IN)
    w[_B1] = rng.uniform(-scale, scale, N_HIDDEN) / math.sqrt(N_IN)
    w[_W2] = rng.uniform(-scale, scale, N_OUT * N_HIDDEN) / math.sqrt(N_HIDDEN)
    w[_B2] = rng.uniform(-scale, scale, N_OUT) / math.sqrt(N_HIDDEN)
    return w


def levenberg_marquardt(residual, jac, w0, cfg: TrainConfig, report: TrainReport | None = None):
    """Damped Gauss-Newton minimization of beta * |r|^2 + alpha * |w|^2.

    ``residual(w)`` returns r and ``jac(w)`` returns dr/dw. Each epoch solves

        (beta J^T J + (alpha + mu) I) delta = -(beta J^T r + alpha w)

    and accepts the step only if the objective decreases; otherwise mu grows
    by ``mu_increase``. With ``cfg.bayesian`` the weights alpha and beta are
    re-estimated after each accepted step from gamma = n - alpha *
    tr((beta J^T J + alpha I)^-1).

    Returns (w, report).
    """
    report = report if report is not None else TrainReport()
    w = np.array(w0, dtype=float)
    n = len(w)
    alpha, beta = (cfg.alpha0, cfg.beta0) if cfg.bayesian else (0.0, 1.0)
    mu = cfg.mu0
    r = residual(w)
    n_res = len(r)
    e_d, e_w = float(r @ r), float(w @ w)
    if not math.isfinite(e_d):
        raise NonFiniteLoss("initial data error is not finite")

    for _ in range(cfg.epochs):
        J = jac(w)
        g = beta * (J.T @ r) + alpha * w
        if 2.0 * np.linalg.norm(g) < cfg.grad_tol:
            report.stop_reason = "gradient"
            break
        try:
            lam, V = np.linalg.eigh(J.T @ J)
        except np.linalg.LinAlgError as e:
            raise SingularNormalMatrix(str(e)) from e
        lam = np.maximum(lam, 0.0)
        gv = V.T @ g
        f0 = beta * e_d + alpha * e_w
        while True:
            w_new = w - V @ (gv / (beta * lam + alpha + mu))
            r_new = residual(w_new)
            e_d_new, e_w_new = float(r_new @ r_new), float(w_new @ w_new)
            f1 = beta * e_d_new + alpha * e_w_new
            if math.isfinite(f1) and f1 < f0:
                mu = mu / cfg.mu_decrease
                break
            mu = mu * cfg.mu_increase
            if mu > cfg.mu_max:
                break
        if mu > cfg.mu_max:
            report.stop_reason = "mu_max"
            break

        w, r, e_d, e_w = w_new, r_new, e_d_new, e_w_new
        gamma = float("nan")
        if cfg.bayesian:
            gamma = n - alpha * float(np.sum(1.0 / (beta * lam + alpha)))
            alpha = gamma / (2.0 * max(e_w, 1e-300))
            beta = max(n_res - gamma, 1e-12) / (2.0 * max(e_d, 1e-300))
        report.data_error.append(e_d)
        report.weight_error.append(e_w)
        report.alpha.append(alpha)
        report.beta.append(beta)
        report.gamma.append(gamma)
        report.mu.append(mu)
        report.objective_before.append(f0)
        report.objective_after.append(f1)
    else:
        report.stop_reason = "epochs"
    return w, report


def _as_arrays(samples):
    X = np.array([s.input for s in samples], dtype=float).reshape(-1, N_IN)
    T = np.array([s.target for s in samples], dtype=float).reshape(-1, N_OUT)
    return X, T


def train_lm_br(samples, cfg: TrainConfig = TrainConfig(), metadata: dict | None = None):
    """Fit the 11-30-3 network to ``samples``; returns (MlpModel, TrainReport).

    Input and target standardization are computed from ``samples`` and
    frozen into the model.
    """
    X, T = _as_arrays(samples)
    if len(X) < 10:
        raise ValueError(f"need at least 10 training samples, got {len(X)}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(T))):
        raise NonFiniteLoss("training data contains non-finite values")
    in_mean, in_std = _standardizer(X)
    t_mean, t_std = _standardizer(T)
    Xs = (X - in_mean) / in_std
    Ts = ((T - t_mean) / t_std).reshape(-1)

    w, report = levenberg_marquardt(
        lambda w: Ts - _net(w, Xs)[0].reshape(-1),
        lambda w: _jacobian(w, Xs),
        init_params(cfg.seed, cfg.init_scale), cfg)

    meta = dict(metadata or {})
    meta.update({
        "seed": cfg.seed,
        "epochs": report.epochs,
        "bayesian_regularization": cfg.bayesian,
        "alpha": report.alpha[-1] if report.epochs else None,
        "beta": report.beta[-1] if report.epochs else None,
        "gamma": report.gamma[-1] if report.epochs and cfg.bayesian else None,
        "stop_reason": report.stop_reason,
        "n_samples": len(X),
    })
    model = MlpModel.zeros(input_mean=in_mean, input_std=in_std, target_mean=t_mean,
                           target_std=t_std, metadata=meta).with_params(w)
    return model, report


def build_training_set(raw_increments, matches, gt_increments):
    """One sample per frame pair: VO input and the ground-truth rotation vector.

    ``raw_increments[i]`` / ``matches[i]`` may be None for frames where the
    VO failed; those frames are skipped. Returns (samples, n_skipped).
    """
    if not (len(raw_increments) == len(matches) == len(gt_increments)):
        raise AlignmentMismatch(
            f"lengths differ: {len(raw_increments)} increments, {len(matches)} match sets, "
            f"{len(gt_increments)} ground-truth increments")
    samples, skipped = [], 0
    for inc, m, gt in zip(raw_increments, matches, gt_increments):
        if inc is None or m is None or len(m) == 0:
            skipped += 1
            continue
        dq = inc.dq if isinstance(inc, MotionIncrement) else inc
        gq = gt.dq if isinstance(gt, MotionIncrement) else gt
        samples.append(TrainingSample(frame_input(dq, m), quat_log(gq)))
    return samples, skipped


# --------------------------------------------------------------------------
# model file


def model_to_dict(model: MlpModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "layer_sizes": [N_IN, N_HIDDEN, N_OUT],
        "activations": ["logistic", "linear"],
        "hidden_weights": model.W1.tolist(),
        "hidden_bias": model.b1.tolist(),
        "output_weights": model.W2.tolist(),
        "output_bias": model.b2.tolist(),
        "input_mean": model.input_mean.tolist(),
        "input_std": model.input_std.tolist(),
        "target_mean": model.target_mean.tolist(),
        "target_std": model.target_std.tolist(),
        "metadata": model.metadata,
    }


def model_from_dict(d: dict) -> MlpModel:
    if not isinstance(d, dict):
        raise ModelFormatError("model document must be an object")
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format_version {version!r}")
    if d.get("layer_sizes") != [N_IN, N_HIDDEN, N_OUT]:
        raise ModelFormatError(f"unsupported layer_sizes {d.get('layer_sizes')!r}")
    if d.get("activations") != ["logistic", "linear"]:
        raise ModelFormatError(f"unsupported activations {d.get('activations')!r}")
    try:
        return MlpModel(d["hidden_weights"], d["hidden_bias"], d["output_weights"],
                        d["output_bias"], d["input_mean"], d["input_std"],
                        d["target_mean"], d["target_std"], dict(d.get("metadata", {})))
    except KeyError as e:
        raise ModelFormatError(f"model file lacks {e}") from e
    except (TypeError, ValueError) as e:
        raise ModelFormatError(str(e)) from e


def dumps_model(model: MlpModel) -> str:
    return json.dumps(model_to_dict(model), indent=1, sort_keys=True) + "\n"


def save_model(model: MlpModel, path):
    Path(path).write_text(dumps_model(model))


def load_model(path) -> MlpModel:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise ModelFormatError(f"cannot read model {path}: {e}") from e
    return model_from_dict(d)
