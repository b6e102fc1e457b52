"""Adam and AdaGrad with lazy row-sparse updates, and seeded mini-batching."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .sparse import SparseRows, row_view


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "adagrad"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")


class Optimizer:
    def __init__(self, params: dict, lr: float):
        self.params = params
        self.lr = lr
        self.t = 0

    def _validate(self, grads):
        for name, g in grads.items():
            if name not in self.params:
                raise ShapeError(f"gradient for unknown block {name!r}")
            p = self.params[name]
            if isinstance(g, SparseRows):
                view = row_view(p)
                if g.values.shape != (g.rows.size, view.shape[1]) or (g.rows.size and g.rows.max() >= len(view)):
                    raise ShapeError(f"{name}: sparse gradient does not fit block {p.shape}")
                vals = g.values
            else:
                if np.shape(g) != p.shape:
                    raise ShapeError(f"{name}: gradient {np.shape(g)} vs parameter {p.shape}")
                vals = g
            if not np.all(np.isfinite(vals)):
                raise NumericError(f"non-finite gradient in block {name!r}; step aborted")

    def step(self, grads: dict):
        """Apply one update. Nothing is modified if any gradient is invalid."""
        self._validate(grads)
        self.t += 1
        for name, g in grads.items():
            p = self.params[name]
            if isinstance(g, SparseRows):
                self._update(name, row_view(p), g.values, g.rows)
            else:
                self._update(name, p, np.asarray(g), None)


def apply_step(optimizer: Optimizer, grads: dict):
    optimizer.step(grads)


class Adam(Optimizer):
    """Bias-corrected Adam. Sparse blocks update moments of touched rows only
    (untouched rows keep their moments undecayed)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def _update(self, name, p, g, rows):
        b1, b2 = self.beta1, self.beta2
        m, v = self.m[name], self.v[name]
        if rows is not None:
            m, v = row_view(m), row_view(v)
            m_new = b1 * m[rows] + (1 - b1) * g
            v_new = b2 * v[rows] + (1 - b2) * g * g
            m[rows], v[rows] = m_new, v_new
        else:
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_new, v_new = m, v
        m_hat = m_new / (1 - b1 ** self.t)
        v_hat = v_new / (1 - b2 ** self.t)
        delta = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        if rows is not None:
            p[rows] -= delta
        else:
            p -= delta


class AdaGrad(Optimizer):
    """Per-coordinate step ``lr * g / sqrt(G + eps)`` with ``G`` the running sum of ``g^2``."""

    def __init__(self, params, lr=0.1, eps=1e-10):
        super().__init__(params, lr)
        self.eps = eps
        self.accum = {k: np.zeros_like(v) for k, v in params.items()}

    def _update(self, name, p, g, rows):
        acc = self.accum[name]
        if rows is not None:
            acc = row_view(acc)
            acc[rows] += g * g
            p[rows] -= self.lr * g / np.sqrt(acc[rows] + self.eps)
        else:
            acc += g * g
            p -= self.lr * g / np.sqrt(acc + self.eps)


def make_optimizer(config: OptimizerConfig, params: dict) -> Optimizer:
    if config.kind == "adam":
        return Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    return AdaGrad(params, config.lr, config.eps)


def minibatch_iter(n_examples: int, batch_size: int, seed: int, epoch: int):
    """Yield index arrays covering a seeded permutation of ``range(n_examples)``.

    The permutation depends on ``(seed, epoch)`` only; the final partial batch
    is emitted.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if n_examples < 1:
        raise ConfigError("cannot iterate over an empty dataset")
    order = np.random.default_rng([seed, epoch]).permutation(n_examples)
    for start in range(0, n_examples, batch_size):
        yield order[start:start + batch_size]
