"""MLP-with-batchnorm numerics on plain float64 numpy arrays.

Forward/backward for a fixed linear -> batchnorm -> relu layer stack, the
loss kernels used by the training loops (cross entropy, categorical KL,
Gaussian KL, multi-kernel MMD), and SGD/Adam updates. Backward passes are
hand-derived and return gradients for both parameters and inputs, so every
composite loss in this package can be checked against finite differences.

A "matrix" throughout is a 2D C-order float64 array, one row per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BnState",
    "LinearLayer",
    "MlpModel",
    "ForwardTrace",
    "OptimizerState",
    "NonFiniteLossError",
    "make_mlp",
    "forward",
    "backward",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "cross_entropy_grad",
    "categorical_kl",
    "categorical_kl_grad",
    "gaussian_kl",
    "gaussian_kl_grad",
    "mmd",
    "mmd_grad",
    "median_heuristic_bandwidths",
    "optimizer_step",
    "predict_classes",
    "model_state_vector",
]


class NonFiniteLossError(RuntimeError):
    """Raised when a training loss stops being finite."""


def as_matrix(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2D matrix, got shape {x.shape}")
    return x


def _as_vector(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1D vector, got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# model containers
# ---------------------------------------------------------------------------


@dataclass
class BnState:
    """Batchnorm scale/shift plus running statistics for one layer."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    def copy(self) -> "BnState":
        return BnState(
            self.gamma.copy(),
            self.beta.copy(),
            self.running_mean.copy(),
            self.running_var.copy(),
            self.momentum,
            self.epsilon,
        )


@dataclass
class LinearLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    has_bn: bool = False
    bn: BnState | None = None
    activation: str = "none"  # "relu" or "none"

    def copy(self) -> "LinearLayer":
        return LinearLayer(
            self.weight.copy(),
            self.bias.copy(),
            self.has_bn,
            self.bn.copy() if self.bn is not None else None,
            self.activation,
        )


@dataclass
class MlpModel:
    """Plain MLP; the post-activation output of ``feature_tap_index`` is the
    feature representation, the last layer output is the logits."""

    layers: list[LinearLayer]
    feature_tap_index: int

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        if not 0 <= self.feature_tap_index < len(self.layers):
            raise ValueError("feature_tap_index out of range")
        last = self.layers[-1]
        if last.activation != "none" or last.has_bn:
            raise ValueError("final layer must be linear without batchnorm")
        for a, b in zip(self.layers, self.layers[1:]):
            if b.weight.shape[1] != a.weight.shape[0]:
                raise ValueError("consecutive layer widths do not chain")

    @property
    def input_width(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_width(self) -> int:
        return self.layers[-1].weight.shape[0]

    def parameters(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order: per layer weight, bias, then
        gamma/beta when batchnorm is present."""
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
            if layer.has_bn:
                out.append(layer.bn.gamma)
                out.append(layer.bn.beta)
        return out

    def copy(self) -> "MlpModel":
        return MlpModel([l.copy() for l in self.layers], self.feature_tap_index)


def make_mlp(
    widths,
    bn: bool = False,
    feature_tap_index: int | None = None,
    rng: np.random.Generator | None = None,
    hidden_activation: str = "relu",
) -> MlpModel:
    """He-initialized MLP with the given layer widths.

    Batchnorm (when ``bn``) sits between every hidden linear layer and its
    activation; the output layer is always plain linear. The feature tap
    defaults to the last hidden activation.
    """
    if len(widths) < 2:
        raise ValueError("need input and output widths")
    if rng is None:
        rng = np.random.default_rng(0)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        last = i == len(widths) - 2
        w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        b = np.zeros(fan_out)
        bn_state = None
        if bn and not last:
            bn_state = BnState(
                gamma=np.ones(fan_out),
                beta=np.zeros(fan_out),
                running_mean=np.zeros(fan_out),
                running_var=np.ones(fan_out),
            )
        layers.append(
            LinearLayer(
                weight=w,
                bias=b,
                has_bn=bn_state is not None,
                bn=bn_state,
                activation="none" if last else hidden_activation,
            )
        )
    if feature_tap_index is None:
        feature_tap_index = max(len(layers) - 2, 0)
    return MlpModel(layers, feature_tap_index)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Per-layer caches from one forward pass, as needed by ``backward``.

    ``batch_stats`` holds the observed (population) mean/var of the pre-BN
    activations of every batchnorm layer, in both modes; ``norm_stats`` holds
    the statistics actually used for normalization (batch stats in train
    mode, running stats in eval mode).
    """

    mode: str
    x: np.ndarray
    pre_act: list[np.ndarray]
    bn_normed: list[np.ndarray | None]
    post_act: list[np.ndarray]
    batch_stats: dict[int, tuple[np.ndarray, np.ndarray]]
    norm_stats: list[tuple[np.ndarray, np.ndarray] | None]


def forward(model: MlpModel, X, mode: str = "eval"):
    """Run the model; returns (logits, features, trace).

    Train mode normalizes by batch statistics and updates running stats with
    the momentum rule; eval mode normalizes by running stats. Batch variance
    is the population variance.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    X = as_matrix(X)
    if X.shape[1] != model.input_width:
        raise ValueError(
            f"input width {X.shape[1]} != model input width {model.input_width}"
        )
    has_any_bn = any(l.has_bn for l in model.layers)
    if mode == "train" and has_any_bn and X.shape[0] < 2:
        raise ValueError("train-mode batchnorm needs batch size >= 2")

    n = X.shape[0]
    a = X
    pre_act, bn_normed, post_act, norm_stats = [], [], [], []
    batch_stats: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for i, layer in enumerate(model.layers):
        z = a @ layer.weight.T + layer.bias
        pre_act.append(z)
        if layer.has_bn:
            bn = layer.bn
            mu_b = z.mean(axis=0)
            var_b = z.var(axis=0)
            batch_stats[i] = (mu_b, var_b)
            if mode == "train":
                mean, var = mu_b, var_b
                m = bn.momentum
                bn.running_mean = (1.0 - m) * bn.running_mean + m * mu_b
                bn.running_var = (1.0 - m) * bn.running_var + m * var_b
            else:
                mean, var = bn.running_mean.copy(), bn.running_var.copy()
            xhat = (z - mean) / np.sqrt(var + bn.epsilon)
            y = bn.gamma * xhat + bn.beta
            bn_normed.append(xhat)
            norm_stats.append((mean, var))
        else:
            y = z
            bn_normed.append(None)
            norm_stats.append(None)
        a = np.maximum(y, 0.0) if layer.activation == "relu" else y
        post_act.append(a)

    trace = ForwardTrace(
        mode=mode,
        x=X,
        pre_act=pre_act,
        bn_normed=bn_normed,
        post_act=post_act,
        batch_stats=batch_stats,
        norm_stats=norm_stats,
    )
    return post_act[-1], post_act[model.feature_tap_index], trace


def backward(
    model: MlpModel,
    trace: ForwardTrace,
    d_logits,
    d_features=None,
    d_pre_bn: dict[int, np.ndarray] | None = None,
):
    """Backpropagate cotangents through a recorded forward pass.

    ``d_logits`` attaches at the model output, ``d_features`` (optional) at
    the feature tap, and ``d_pre_bn`` (optional, keyed by layer index) at the
    pre-BN activations of batchnorm layers; the last one carries the
    statistics-matching losses. Returns (param_grads, dX) with param_grads
    ordered like ``model.parameters()``. Train-mode traces backprop through
    the batch statistics; eval-mode traces treat running stats as constants.
    """
    L = len(model.layers)
    if len(trace.pre_act) != L:
        raise ValueError("trace does not match model layer count")
    d_logits = np.asarray(d_logits, dtype=np.float64)
    if d_logits.shape != trace.post_act[-1].shape:
        raise ValueError("d_logits shape does not match traced logits")
    if d_pre_bn:
        for idx in d_pre_bn:
            if not (0 <= idx < L) or not model.layers[idx].has_bn:
                raise ValueError(f"d_pre_bn key {idx} is not a batchnorm layer")

    n = trace.x.shape[0]
    per_layer: list[list[np.ndarray]] = [None] * L
    da = d_logits
    for i in reversed(range(L)):
        layer = model.layers[i]
        if i == model.feature_tap_index and d_features is not None:
            da = da + np.asarray(d_features, dtype=np.float64)
        # activation
        if layer.activation == "relu":
            dy = da * (trace.post_act[i] > 0.0)
        else:
            dy = da
        # batchnorm
        if layer.has_bn:
            bn = layer.bn
            xhat = trace.bn_normed[i]
            mean, var = trace.norm_stats[i]
            istd = 1.0 / np.sqrt(var + bn.epsilon)
            dgamma = (dy * xhat).sum(axis=0)
            dbeta = dy.sum(axis=0)
            dxhat = dy * bn.gamma
            if trace.mode == "train":
                dz = (istd / n) * (
                    n * dxhat
                    - dxhat.sum(axis=0)
                    - xhat * (dxhat * xhat).sum(axis=0)
                )
            else:
                dz = dxhat * istd
            grads = [None, None, dgamma, dbeta]
        else:
            dz = dy
            grads = [None, None]
        if d_pre_bn and i in d_pre_bn:
            dz = dz + d_pre_bn[i]
        # linear
        a_prev = trace.post_act[i - 1] if i > 0 else trace.x
        grads[0] = dz.T @ a_prev
        grads[1] = dz.sum(axis=0)
        per_layer[i] = grads
        da = dz @ layer.weight

    flat: list[np.ndarray] = []
    for grads in per_layer:
        flat.extend(grads)
    return flat, da


def predict_classes(model: MlpModel, X) -> np.ndarray:
    logits, _, _ = forward(model, X, "eval")
    return np.argmax(logits, axis=1)


def model_state_vector(model: MlpModel) -> np.ndarray:
    """All parameters plus BN running stats flattened; for freeze checks."""
    parts = [p.ravel() for p in model.parameters()]
    for layer in model.layers:
        if layer.has_bn:
            parts.append(layer.bn.running_mean.ravel())
            parts.append(layer.bn.running_var.ravel())
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# loss kernels
# ---------------------------------------------------------------------------


def log_softmax(logits) -> np.ndarray:
    logits = as_matrix(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a 1D vector of class indices")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"label out of range [0, {num_classes}): {labels.min()}..{labels.max()}"
        )
    return labels.astype(np.int64)


def cross_entropy(logits, labels) -> float:
    """Mean negative log-softmax probability of the true class."""
    logp = log_softmax(logits)
    labels = _check_labels(labels, logp.shape[1])
    return float(-logp[np.arange(logp.shape[0]), labels].mean())


def cross_entropy_grad(logits, labels):
    """Cross entropy and its gradient w.r.t. the logits."""
    logits = as_matrix(logits)
    logp = log_softmax(logits)
    labels = _check_labels(labels, logp.shape[1])
    n = logits.shape[0]
    value = float(-logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return value, dlogits / n


def categorical_kl(p_logits, q_logits) -> float:
    """KL(softmax(p) || softmax(q)), averaged over rows."""
    p_logits, q_logits = as_matrix(p_logits), as_matrix(q_logits)
    if p_logits.shape != q_logits.shape:
        raise ValueError("logit shapes differ")
    logp, logq = log_softmax(p_logits), log_softmax(q_logits)
    p = np.exp(logp)
    return float((p * (logp - logq)).sum(axis=1).mean())


def categorical_kl_grad(p_logits, q_logits):
    """Categorical KL and its gradients w.r.t. both logit matrices."""
    p_logits, q_logits = as_matrix(p_logits), as_matrix(q_logits)
    if p_logits.shape != q_logits.shape:
        raise ValueError("logit shapes differ")
    n = p_logits.shape[0]
    logp, logq = log_softmax(p_logits), log_softmax(q_logits)
    p, q = np.exp(logp), np.exp(logq)
    diff = logp - logq
    row_kl = (p * diff).sum(axis=1, keepdims=True)
    value = float(row_kl.mean())
    dp = p * (diff - row_kl) / n
    dq = (q - p) / n
    return value, dp, dq


def gaussian_kl(mu_a, var_a, mu_b, var_b) -> float:
    """KL(N(mu_a, var_a) || N(mu_b, var_b)) summed over channels."""
    mu_a, var_a = _as_vector(mu_a), _as_vector(var_a)
    mu_b, var_b = _as_vector(mu_b), _as_vector(var_b)
    if not (mu_a.shape == var_a.shape == mu_b.shape == var_b.shape):
        raise ValueError("statistic vectors must share one length")
    if (var_a <= 0).any() or (var_b <= 0).any():
        raise ValueError("variances must be positive")
    return float(
        (
            0.5 * np.log(var_b / var_a)
            + (var_a + (mu_a - mu_b) ** 2) / (2.0 * var_b)
            - 0.5
        ).sum()
    )


def gaussian_kl_grad(mu_a, var_a, mu_b, var_b):
    """Gaussian KL and gradients w.r.t. the first (mu, var) pair; the second
    pair is the fixed reference."""
    value = gaussian_kl(mu_a, var_a, mu_b, var_b)
    mu_a, var_a = _as_vector(mu_a), _as_vector(var_a)
    mu_b, var_b = _as_vector(mu_b), _as_vector(var_b)
    dmu_a = (mu_a - mu_b) / var_b
    dvar_a = 0.5 / var_b - 0.5 / var_a
    return value, dmu_a, dvar_a


def _pairwise_sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # (n, m) matrix of squared euclidean distances
    sq = (x**2).sum(axis=1)[:, None] + (y**2).sum(axis=1)[None, :] - 2.0 * x @ y.T
    return np.maximum(sq, 0.0)


def _check_bandwidths(bandwidths) -> list[float]:
    bandwidths = [float(b) for b in bandwidths]
    if not bandwidths:
        raise ValueError("bandwidth list is empty")
    if any(b <= 0 for b in bandwidths):
        raise ValueError("bandwidths must be positive")
    return bandwidths


def mmd(x, y, bandwidths) -> float:
    """Biased multi-kernel MMD: sum over Gaussian kernels exp(-d^2/(2*g^2))
    of mean k(x,x) + mean k(y,y) - 2 mean k(x,y)."""
    x, y = as_matrix(x), as_matrix(y)
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("feature sets must be nonempty")
    if x.shape[1] != y.shape[1]:
        raise ValueError("feature widths differ")
    bandwidths = _check_bandwidths(bandwidths)
    dxx, dyy, dxy = (
        _pairwise_sq_dists(x, x),
        _pairwise_sq_dists(y, y),
        _pairwise_sq_dists(x, y),
    )
    total = 0.0
    for g in bandwidths:
        c = 1.0 / (2.0 * g * g)
        total += (
            np.exp(-c * dxx).mean()
            + np.exp(-c * dyy).mean()
            - 2.0 * np.exp(-c * dxy).mean()
        )
    return float(total)


def mmd_grad(x, y, bandwidths):
    """MMD and its gradients w.r.t. both sample matrices (bandwidths fixed)."""
    x, y = as_matrix(x), as_matrix(y)
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("feature sets must be nonempty")
    if x.shape[1] != y.shape[1]:
        raise ValueError("feature widths differ")
    bandwidths = _check_bandwidths(bandwidths)
    n, m = x.shape[0], y.shape[0]
    dxx, dyy, dxy = (
        _pairwise_sq_dists(x, x),
        _pairwise_sq_dists(y, y),
        _pairwise_sq_dists(x, y),
    )
    value = 0.0
    gx = np.zeros_like(x)
    gy = np.zeros_like(y)
    for g in bandwidths:
        c = 1.0 / (2.0 * g * g)
        kxx, kyy, kxy = np.exp(-c * dxx), np.exp(-c * dyy), np.exp(-c * dxy)
        value += kxx.mean() + kyy.mean() - 2.0 * kxy.mean()
        # d/dx_i of exp(-c*|x_i-x_j|^2) is -2c*k_ij*(x_i-x_j); both orderings
        # of each pair contribute, hence the extra factor 2 on the xx/yy terms
        gx += (-4.0 * c / (n * n)) * (kxx.sum(axis=1)[:, None] * x - kxx @ x)
        gy += (-4.0 * c / (m * m)) * (kyy.sum(axis=1)[:, None] * y - kyy @ y)
        cross_x = kxy.sum(axis=1)[:, None] * x - kxy @ y
        cross_y = kxy.sum(axis=0)[:, None] * y - kxy.T @ x
        gx += (4.0 * c / (n * m)) * cross_x
        gy += (4.0 * c / (n * m)) * cross_y
    return float(value), gx, gy


def median_heuristic_bandwidths(x, y, scales=(0.5, 1.0, 2.0)) -> list[float]:
    """Median pairwise distance of the pooled sample, scaled; zero-median
    degenerate batches fall back to bandwidth 1."""
    pooled = np.vstack([as_matrix(x), as_matrix(y)])
    d = np.sqrt(_pairwise_sq_dists(pooled, pooled))
    iu = np.triu_indices(pooled.shape[0], k=1)
    med = float(np.median(d[iu])) if iu[0].size else 0.0
    if med <= 0.0:
        med = 1.0
    return [med * float(s) for s in scales]


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "adam"  # "adam" or "sgd"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = field(default=None, repr=False)
    v: list[np.ndarray] | None = field(default=None, repr=False)


def optimizer_step(params, grads, state: OptimizerState):
    """One in-place SGD or Adam update; returns (params, state)."""
    if state.kind not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer kind {state.kind!r}")
    if len(params) != len(grads):
        raise ValueError("parameter/gradient count mismatch")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    state.step += 1
    if state.kind == "sgd":
        for p, g in zip(params, grads):
            p -= state.learning_rate * g
        return params, state
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state
