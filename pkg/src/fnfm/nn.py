"""Dense, activation and batch-normalization layers with explicit backward passes,
plus a central-difference gradient checker.

Shapes follow the row-batch convention: inputs are ``[B, in]``, a dense
layer's weight is ``[out, in]``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import BatchError, NumericError, ShapeError, StateError


# -- initialization -----------------------------------------------------------

@dataclass(frozen=True)
class InitPolicy:
    kind: str = "gaussian"  # gaussian | uniform | zeros
    scale: float = 0.01     # stddev for gaussian, bound for uniform

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.kind == "gaussian":
            return rng.normal(0.0, self.scale, size=shape)
        if self.kind == "uniform":
            return rng.uniform(-self.scale, self.scale, size=shape)
        if self.kind == "zeros":
            return np.zeros(shape)
        raise ValueError(f"unknown init kind {self.kind!r}")


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


# -- activations ---------------------------------------------------------------

def sigmoid(x):
    """Logistic function, split by sign so neither branch overflows."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else out[()]


def sigmoid_backward(y, dy):
    """Gradient through sigmoid given its output ``y``."""
    return dy * y * (1.0 - y)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, dy):
    # subgradient at exactly 0 is 0
    return np.where(x > 0, dy, 0.0)


# -- dense layer ---------------------------------------------------------------

class DenseLayer:
    """Affine map ``Y = X W^T + b``."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeError(f"weight {weight.shape} and bias {bias.shape} are inconsistent")
        self.weight = weight
        self.bias = bias
        self._x = None

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, policy: InitPolicy | None = None):
        policy = policy or InitPolicy("uniform", glorot_bound(n_in, n_out))
        return cls(policy.sample(rng, (n_out, n_in)), np.zeros(n_out))

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"dense layer expects [B, {self.n_in}], got {x.shape}")
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, dy: np.ndarray):
        """Return ``(dX, dW, db)`` for the summed loss."""
        if self._x is None:
            raise StateError("dense backward called before forward")
        if dy.shape != (self._x.shape[0], self.n_out):
            raise ShapeError(f"upstream gradient {dy.shape} does not match output "
                             f"{(self._x.shape[0], self.n_out)}")
        return dy @ self.weight, dy.T @ self._x, dy.sum(axis=0)


def dense_forward(layer: DenseLayer, x):
    return layer.forward(x)


def dense_backward(layer: DenseLayer, dy):
    return layer.backward(dy)


# -- batch normalization -------------------------------------------------------

@dataclass
class BatchStats:
    mean: np.ndarray
    var: np.ndarray


class BatchNormLayer:
    """Per-dimension batch normalization with learned scale and shift.

    Training mode normalizes with the biased batch variance and folds the
    unbiased variance into the running estimate; inference mode uses the
    running estimates only.
    """

    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must be in (0, 1), got {momentum}")
        self.gamma = np.ones(width)
        self.beta = np.zeros(width)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.momentum = momentum
        self.eps = eps
        self.training = True
        self._cache = None

    @property
    def width(self) -> int:
        return self.gamma.shape[0]

    def normalize(self, x: np.ndarray, training: bool | None = None) -> np.ndarray:
        """Pre-affine normalized values; never touches running statistics or caches."""
        training = self.training if training is None else training
        if training:
            if x.shape[0] < 2:
                raise BatchError(f"batch normalization in training mode needs B >= 2, got {x.shape[0]}")
            mean, var = x.mean(axis=0), x.var(axis=0)
        else:
            mean, var = self.running_mean, self.running_var
        return (x - mean) / np.sqrt(var + self.eps)

    def forward(self, x: np.ndarray, training: bool | None = None, update_running: bool = True) -> np.ndarray:
        training = self.training if training is None else training
        if x.ndim != 2 or x.shape[1] != self.width:
            raise ShapeError(f"batch norm expects [B, {self.width}], got {x.shape}")
        if not training:
            self._cache = None
            return self.gamma * (x - self.running_mean) / np.sqrt(self.running_var + self.eps) + self.beta
        b = x.shape[0]
        if b < 2:
            raise BatchError(f"batch normalization in training mode needs B >= 2, got {b}")
        mean = x.mean(axis=0)
        centered = x - mean
        var = np.mean(centered * centered, axis=0)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = centered * inv_std
        if update_running:
            # in place: models hold live references to these buffers
            m = self.momentum
            self.running_mean *= 1 - m
            self.running_mean += m * mean
            self.running_var *= 1 - m
            self.running_var += m * var * b / (b - 1)
        self._cache = (xhat, inv_std)
        return self.gamma * xhat + self.beta

    def backward(self, dy: np.ndarray):
        """Return ``(dX, dgamma, dbeta)``, including the dependence of the batch
        mean and variance on every row."""
        if self._cache is None:
            raise StateError("batch norm backward needs a training-mode forward")
        xhat, inv_std = self._cache
        if dy.shape != xhat.shape:
            raise ShapeError(f"upstream gradient {dy.shape} does not match {xhat.shape}")
        dbeta = dy.sum(axis=0)
        dgamma = (dy * xhat).sum(axis=0)
        dxhat = dy * self.gamma
        dx = inv_std * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
        return dx, dgamma, dbeta


def batchnorm_forward(layer: BatchNormLayer, x, training=None):
    return layer.forward(x, training)


def batchnorm_backward(layer: BatchNormLayer, dy):
    return layer.backward(dy)


# -- MLP -----------------------------------------------------------------------

class MLP:
    """ReLU hidden layers followed by a linear scalar head.

    ``hidden=()`` degenerates to the head alone. The head starts at zero so
    that a fresh network outputs exactly 0.
    """

    def __init__(self, n_in: int, hidden, rng: np.random.Generator):
        widths = [n_in, *hidden]
        self.layers = [DenseLayer.init(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.layers.append(DenseLayer(np.zeros((1, widths[-1])), np.zeros(1)))
        self._pre = []

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._pre = []
        h = x
        for layer in self.layers[:-1]:
            z = layer.forward(h)
            self._pre.append(z)
            h = relu(z)
        return self.layers[-1].forward(h)[:, 0]

    def backward(self, dout: np.ndarray):
        """Return ``(dX, [(dW, db), ...])`` in layer order."""
        grads = []
        dh, dw, db = self.layers[-1].backward(dout[:, None])
        grads.append((dw, db))
        for layer, z in zip(reversed(self.layers[:-1]), reversed(self._pre)):
            dh, dw, db = layer.backward(relu_backward(z, dh))
            grads.append((dw, db))
        return dh, grads[::-1]


# -- gradient checking ------------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)     # block -> max relative error
    worst_index: dict = field(default_factory=dict)
    failure: str | None = None

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tolerance: float) -> bool:
        return self.failure is None and self.max_error < tolerance

    def format(self) -> str:
        lines = [f"{name:<24} {err:.3e}" for name, err in self.errors.items()]
        if self.failure:
            lines.append(f"FAILURE: {self.failure}")
        return "\n".join(lines)


def relative_error(a, n):
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(loss_fn, params: dict, analytic: dict, step: float = 1e-5, blocks=None) -> GradCheckReport:
    """Compare ``analytic`` gradients against central differences of ``loss_fn``.

    ``loss_fn()`` evaluates the scalar loss at the current contents of
    ``params``; each coordinate is perturbed in place and restored.
    """
    report = GradCheckReport()
    for name in blocks or analytic:
        p = params[name]
        g = np.asarray(analytic[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        flat = p.reshape(-1)
        if not np.shares_memory(flat, p):
            raise ValueError(f"{name}: parameter must be contiguous to perturb in place")
        numeric = np.empty(flat.size)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = loss_fn()
            flat[k] = orig - step
            down = loss_fn()
            flat[k] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                where = tuple(int(i) for i in np.unravel_index(k, p.shape))
                report.failure = f"non-finite loss perturbing {name}[{where}]"
                return report
            numeric[k] = (up - down) / (2 * step)
        err = relative_error(g.reshape(-1), numeric)
        worst = int(np.argmax(err)) if err.size else 0
        report.errors[name] = float(err.max()) if err.size else 0.0
        report.worst_index[name] = tuple(int(i) for i in np.unravel_index(worst, p.shape)) if err.size else ()
    return report


def check_finite(name: str, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
