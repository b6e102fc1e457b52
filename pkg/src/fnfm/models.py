"""LR, FM, FFM, NFM, DeepFM and FNFM with hand-written backward passes.

Every model produces a scalar logit ``w0 + sum_i w_i x_i + body(x)``, where
the body is model specific, and a probability ``sigmoid(logit)``. Parameters
live in named blocks:

* ``bias`` ``[1]`` and ``linear`` ``[n]``
* ``embedding`` ``[n, D]`` (FM, NFM, DeepFM) or ``field_embedding`` ``[n, f, D]`` (FFM, FNFM)
* ``mlp.<k>.weight`` / ``mlp.<k>.bias``; the last index is the scalar head
* ``bn.gamma`` / ``bn.beta`` plus the buffers ``bn.running_mean`` / ``bn.running_var``

Gradients of ``linear`` and the embedding tables are :class:`SparseRows`.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .data import FieldSchema
from .errors import ConfigError, ShapeError, StateError
from .interactions import FieldAwareInteraction, PlainInteraction, concat_width
from .nn import MLP, BatchNormLayer, InitPolicy, sigmoid
from .sparse import SparseRows, row_view

KINDS = ("LR", "FM", "FFM", "NFM", "DeepFM", "FNFM")
NEURAL_KINDS = ("NFM", "DeepFM", "FNFM")
FIELD_AWARE_KINDS = ("FFM", "FNFM")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    embedding_dim: int = 4
    hidden_layout: tuple = (256, 256, 256)
    use_batchnorm: bool = True
    interaction: str = "concat"       # FNFM only: concat | pool
    embedding_std: float = 0.01
    bn_momentum: float = 0.1
    bn_eps: float | None = None       # None: 1e-5 relative to the initial pair-product variance

    def __post_init__(self):
        object.__setattr__(self, "hidden_layout", tuple(int(h) for h in self.hidden_layout))
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.kind != "LR" and self.embedding_dim < 1:
            raise ConfigError(f"{self.kind}: embedding_dim must be >= 1, got {self.embedding_dim}")
        if any(h < 1 for h in self.hidden_layout):
            raise ConfigError(f"hidden widths must be positive: {self.hidden_layout}")
        if self.interaction not in ("concat", "pool"):
            raise ConfigError(f"interaction must be 'concat' or 'pool', got {self.interaction!r}")

    @property
    def effective_bn_eps(self) -> float:
        """BN epsilon actually used.

        Interaction outputs are products of two embeddings, so their variance
        at initialization is ``embedding_std**4`` (1e-8 by default). A fixed
        epsilon of 1e-5 would swamp that and leave BN a near-constant rescale,
        so the default is 1e-5 of that variance instead.
        """
        if self.bn_eps is not None:
            return self.bn_eps
        return 1e-5 * self.embedding_std ** 4

    @property
    def has_mlp(self) -> bool:
        return self.kind in NEURAL_KINDS

    @property
    def has_batchnorm(self) -> bool:
        return self.has_mlp and self.use_batchnorm

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_layout"] = list(self.hidden_layout)
        return d

    @classmethod
    def from_dict(cls, d) -> "ModelSpec":
        return cls(**{k: (tuple(v) if k == "hidden_layout" else v) for k, v in d.items()})


def mlp_input_width(spec: ModelSpec, schema: FieldSchema) -> int:
    f, d = schema.num_fields, spec.embedding_dim
    if spec.kind == "NFM":
        return d
    if spec.kind == "DeepFM":
        return f * d
    if spec.kind == "FNFM":
        return concat_width(f, d) if spec.interaction == "concat" else d
    raise ValueError(f"{spec.kind} has no MLP")


def param_shapes(spec: ModelSpec, schema: FieldSchema):
    """Ordered ``(trainable, buffers)`` dicts of block name -> shape."""
    n, f, d = schema.num_features, schema.num_fields, spec.embedding_dim
    shapes = {"bias": (1,), "linear": (n,)}
    buffers = {}
    if spec.kind in ("FM", "NFM", "DeepFM"):
        shapes["embedding"] = (n, d)
    elif spec.kind in FIELD_AWARE_KINDS:
        shapes["field_embedding"] = (n, f, d)
    if spec.has_mlp:
        width = mlp_input_width(spec, schema)
        if spec.has_batchnorm:
            shapes["bn.gamma"] = shapes["bn.beta"] = (width,)
            buffers["bn.running_mean"] = buffers["bn.running_var"] = (width,)
        widths = [width, *spec.hidden_layout, 1]
        for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            shapes[f"mlp.{k}.weight"] = (b, a)
            shapes[f"mlp.{k}.bias"] = (b,)
    return shapes, buffers


def param_count(spec: ModelSpec, schema: FieldSchema) -> dict:
    shapes, _ = param_shapes(spec, schema)
    counts = {name: int(np.prod(shape)) for name, shape in shapes.items()}
    counts["total"] = sum(counts.values())
    return counts


def nll_loss(logits, labels):
    """Mean negative log-likelihood evaluated from logits.

    Returns ``(loss, dloss/dlogit)`` with ``dloss/dlogit = (p - y) / N``.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.size == 0:
        raise ConfigError("nll_loss on an empty batch")
    if z.shape != y.shape:
        raise ShapeError(f"logits {z.shape} vs labels {y.shape}")
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    return loss, (sigmoid(z) - y) / z.size


class Model:
    """Shared linear part, optional deep part and the training-step plumbing."""

    def __init__(self, spec: ModelSpec, schema: FieldSchema, seed=0, l2_linear=0.0, l2_embedding=0.0):
        self.spec = spec
        self.schema = schema
        self.l2_linear = l2_linear
        self.l2_embedding = l2_embedding
        self.training = False
        self.frozen = False
        rng = np.random.default_rng(seed)
        n = schema.num_features
        self.bias = np.zeros(1)
        self.linear = np.zeros(n)
        shapes, _ = param_shapes(spec, schema)
        emb_init = InitPolicy("gaussian", spec.embedding_std)
        self.embedding = emb_init.sample(rng, shapes["embedding"]) if "embedding" in shapes else None
        self.field_embedding = (emb_init.sample(rng, shapes["field_embedding"])
                                if "field_embedding" in shapes else None)
        self.bn = None
        self.mlp = None
        if spec.has_mlp:
            width = mlp_input_width(spec, schema)
            if spec.has_batchnorm:
                self.bn = BatchNormLayer(width, spec.bn_momentum, spec.effective_bn_eps)
            self.mlp = MLP(width, spec.hidden_layout, rng)
        self._cache = None
        self.last_mlp_input = None

    # -- parameter access -----------------------------------------------------

    @property
    def params(self) -> dict:
        """Live references to every trainable block, in canonical order."""
        out = {"bias": self.bias, "linear": self.linear}
        if self.embedding is not None:
            out["embedding"] = self.embedding
        if self.field_embedding is not None:
            out["field_embedding"] = self.field_embedding
        if self.bn is not None:
            out["bn.gamma"] = self.bn.gamma
            out["bn.beta"] = self.bn.beta
        if self.mlp is not None:
            for k, layer in enumerate(self.mlp.layers):
                out[f"mlp.{k}.weight"] = layer.weight
                out[f"mlp.{k}.bias"] = layer.bias
        return out

    @property
    def buffers(self) -> dict:
        if self.bn is None:
            return {}
        return {"bn.running_mean": self.bn.running_mean, "bn.running_var": self.bn.running_var}

    def state_dict(self) -> dict:
        return {name: arr.copy() for name, arr in {**self.params, **self.buffers}.items()}

    def load_state_dict(self, state: dict):
        if self.frozen:
            raise StateError("cannot load parameters into a frozen model")
        targets = {**self.params, **self.buffers}
        if set(state) != set(targets):
            raise ShapeError(f"state blocks {sorted(state)} do not match model blocks {sorted(targets)}")
        for name, arr in targets.items():
            if state[name].shape != arr.shape:
                raise ShapeError(f"{name}: stored shape {state[name].shape} != expected {arr.shape}")
            arr[...] = state[name]

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def freeze(self):
        """Switch to inference mode and make every array read-only."""
        self.training = False
        if self.bn is not None:
            self.bn.training = False
        for arr in {**self.params, **self.buffers}.values():
            arr.setflags(write=False)
        self.frozen = True
        return self

    # -- forward / backward ------------------------------------------------------

    def _check_batch(self, indices, values):
        f = self.schema.num_fields
        if indices.ndim != 2 or indices.shape[1] != f or values.shape != indices.shape:
            raise ShapeError(f"expected indices/values of shape [B, {f}], got {indices.shape} / {values.shape}")

    def forward(self, indices, values, training=False) -> np.ndarray:
        """Logits for a batch. ``training=True`` uses batch statistics in BN
        and caches activations for :meth:`backward`."""
        indices = np.asarray(indices, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        self._check_batch(indices, values)
        if training and self.frozen:
            raise StateError("frozen model cannot run a training forward pass")
        logits = self.bias[0] + (self.linear[indices] * values).sum(axis=1)
        logits = logits + self._body_forward(indices, values, training)
        self._cache = (indices, values) if training else None
        return logits

    def predict_proba(self, indices, values) -> np.ndarray:
        return sigmoid(self.forward(indices, values, training=False))

    def backward(self, dlogits) -> dict:
        """Gradients of ``sum(dlogits * logits)`` for every trainable block."""
        if self._cache is None:
            raise StateError("backward needs a preceding training-mode forward (cache empty or stale)")
        indices, values = self._cache
        dlogits = np.asarray(dlogits, dtype=np.float64)
        if dlogits.shape != (indices.shape[0],):
            raise ShapeError(f"dlogits shape {dlogits.shape} != ({indices.shape[0]},)")
        self._cache = None
        grads = {"bias": np.array([dlogits.sum()]),
                 "linear": SparseRows.accumulate(indices, dlogits[:, None] * values)}
        grads.update(self._body_backward(dlogits))
        return {name: grads[name] for name in self.params}

    def regularize(self, grads: dict) -> float:
        """Fold L2 on touched rows of linear weights and embeddings into ``grads``.

        Penalty is ``lambda/2 * ||row||^2`` per touched row; returns its total.
        """
        penalty = 0.0
        for name, lam in (("linear", self.l2_linear), ("embedding", self.l2_embedding),
                          ("field_embedding", self.l2_embedding)):
            g = grads.get(name)
            if lam == 0.0 or g is None:
                continue
            rows = row_view(self.params[name])[g.rows]
            penalty += 0.5 * lam * float(np.sum(rows * rows))
            grads[name] = SparseRows(g.rows, g.values + lam * rows)
        return penalty

    def loss_and_grad(self, indices, values, labels):
        """Training objective on one batch: ``(objective, nll, grads)``."""
        logits = self.forward(indices, values, training=True)
        nll, dlogits = nll_loss(logits, labels)
        grads = self.backward(dlogits)
        penalty = self.regularize(grads)
        return nll + penalty, nll, grads

    # -- deep part ---------------------------------------------------------------

    def _deep_forward(self, x, training):
        self.last_mlp_input = x
        if self.bn is not None:
            x = self.bn.forward(x, training=training)
        return self.mlp.forward(x)

    def _deep_backward(self, dlogits, grads):
        dx, layer_grads = self.mlp.backward(dlogits)
        for k, (dw, db) in enumerate(layer_grads):
            grads[f"mlp.{k}.weight"] = dw
            grads[f"mlp.{k}.bias"] = db
        if self.bn is not None:
            dx, dgamma, dbeta = self.bn.backward(dx)
            grads["bn.gamma"] = dgamma
            grads["bn.beta"] = dbeta
        return dx

    def mlp_inputs(self, indices, values):
        """MLP input on a probe batch before and after BN.

        The post-BN values use the probe's own batch statistics (no running
        update), i.e. what the network sees in training mode. Without BN both
        entries are the same array.
        """
        if self.mlp is None:
            raise ValueError(f"{self.spec.kind} has no MLP")
        self._body_forward(np.asarray(indices), np.asarray(values, dtype=np.float64), training=False)
        pre = self.last_mlp_input
        if self.bn is None:
            return pre, pre
        post = self.bn.gamma * self.bn.normalize(pre, training=True) + self.bn.beta
        return pre, post

    def _body_forward(self, indices, values, training):
        return 0.0

    def _body_backward(self, dlogits):
        return {}


class LR(Model):
    pass


class FM(Model):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._fm = PlainInteraction("fm")

    def _body_forward(self, indices, values, training):
        return self._fm.forward(self.embedding, indices, values)

    def _body_backward(self, dlogits):
        g, _ = self._fm.backward(dlogits)
        return {"embedding": g}


class FFM(Model):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._ffm = FieldAwareInteraction("ffm")

    def _body_forward(self, indices, values, training):
        return self._ffm.forward(self.field_embedding, indices, values)

    def _body_backward(self, dlogits):
        g, _ = self._ffm.backward(dlogits)
        return {"field_embedding": g}


class NFM(Model):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._pool = PlainInteraction("pool")

    def _body_forward(self, indices, values, training):
        return self._deep_forward(self._pool.forward(self.embedding, indices, values), training)

    def _body_backward(self, dlogits):
        grads = {}
        dx = self._deep_backward(dlogits, grads)
        grads["embedding"], _ = self._pool.backward(dx)
        return grads


class DeepFM(Model):
    """FM and MLP sharing one embedding table; their outputs are summed before the sigmoid."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._fm = PlainInteraction("fm")
        self._flat = PlainInteraction("flat")

    def _body_forward(self, indices, values, training):
        fm = self._fm.forward(self.embedding, indices, values)
        deep = self._deep_forward(self._flat.forward(self.embedding, indices, values), training)
        return fm + deep

    def _body_backward(self, dlogits):
        grads = {}
        dx = self._deep_backward(dlogits, grads)
        g_deep, _ = self._flat.backward(dx)
        g_fm, _ = self._fm.backward(dlogits)
        grads["embedding"] = g_fm + g_deep
        return grads


class FNFM(Model):
    """Field-aware pair products, concatenated (or pooled), batch-normalized and fed to the MLP."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._bi = FieldAwareInteraction(self.spec.interaction)

    def _body_forward(self, indices, values, training):
        return self._deep_forward(self._bi.forward(self.field_embedding, indices, values), training)

    def _body_backward(self, dlogits):
        grads = {}
        dx = self._deep_backward(dlogits, grads)
        grads["field_embedding"], _ = self._bi.backward(dx)
        return grads


MODEL_CLASSES = {"LR": LR, "FM": FM, "FFM": FFM, "NFM": NFM, "DeepFM": DeepFM, "FNFM": FNFM}


def build_model(spec: ModelSpec, schema: FieldSchema, seed=0, l2_linear=0.0, l2_embedding=0.0) -> Model:
    return MODEL_CLASSES[spec.kind](spec, schema, seed=seed, l2_linear=l2_linear, l2_embedding=l2_embedding)


def forward_logit(model: Model, indices, values, training=False):
    return model.forward(indices, values, training)
