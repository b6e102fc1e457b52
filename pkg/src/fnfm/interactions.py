"""Second-order interaction mechanisms over one-hot field inputs.

A batch is given by ``indices`` and ``values``, both ``[B, f]``: the active
global feature of each field and its value (1.0 for categorical fields, the
raw number for numeric ones). Since exactly one feature per field is active,
all sums over feature pairs reduce to sums over field pairs.

Plain embedding tables are ``[n, D]``. Field-aware tables are ``[n, f, D]``:
``table[m, j]`` is feature ``m``'s vector used against field ``j``. The
own-field rows ``table[m, field(m)]`` exist but are never read.
"""

from functools import lru_cache

import numpy as np

from .errors import SchemaError, ShapeError, StateError
from .sparse import SparseRows


@lru_cache(maxsize=None)
def pair_order(f: int):
    """Canonical lexicographic field pairs ``(0,1), (0,2), ..., (f-2,f-1)``.

    Returns ``(left, right)`` index arrays of length ``f(f-1)/2``.
    """
    if f < 2:
        raise SchemaError(f"pairwise interactions need at least 2 fields, got {f}")
    left, right = np.triu_indices(f, k=1)
    left.setflags(write=False)
    right.setflags(write=False)
    return left, right


def concat_width(f: int, dim: int) -> int:
    return f * (f - 1) // 2 * dim


def _batched(indices, values):
    indices = np.asarray(indices)
    values = np.asarray(values, dtype=np.float64)
    single = indices.ndim == 1
    if single:
        indices, values = indices[None], values[None]
    if indices.shape != values.shape or indices.ndim != 2:
        raise ShapeError(f"indices {indices.shape} and values {values.shape} must both be [B, f]")
    return indices, values, single


def _incidence(pos, f):
    m = np.zeros((pos.size, f))
    m[np.arange(pos.size), pos] = 1.0
    return m


class PlainInteraction:
    """Interactions over a plain ``[n, D]`` table.

    ``kind`` is ``"fm"`` (scalar FM second-order term), ``"pool"``
    (bi-interaction pooling, a D-vector) or ``"flat"`` (the field embeddings
    laid side by side, ``f*D`` wide; the deep input of DeepFM).
    """

    KINDS = ("fm", "pool", "flat")

    def __init__(self, kind: str):
        if kind not in self.KINDS:
            raise ValueError(f"unknown plain interaction {kind!r}")
        self.kind = kind
        self._cache = None

    def forward(self, table, indices, values):
        if table.ndim != 2:
            raise ShapeError(f"plain embedding table must be [n, D], got {table.shape}")
        vecs = table[indices]                      # [B, f, D]
        e = vecs * values[..., None]
        self._cache = (table.shape, indices, values, vecs, e)
        if self.kind == "flat":
            return e.reshape(e.shape[0], -1)
        s = e.sum(axis=1)
        pooled = 0.5 * (s * s - (e * e).sum(axis=1))
        self._cache += (s,)
        return pooled.sum(axis=1) if self.kind == "fm" else pooled

    def backward(self, upstream):
        """Return ``(SparseRows over table rows, dvalues [B, f])``."""
        if self._cache is None:
            raise StateError("interaction backward called before forward")
        shape, indices, values, vecs, e = self._cache[:5]
        b, f, d = e.shape
        if self.kind == "flat":
            de = upstream.reshape(b, f, d)
        else:
            s = self._cache[5]
            up = upstream[:, None, None] if self.kind == "fm" else upstream[:, None, :]
            de = up * (s[:, None, :] - e)
        grad = SparseRows.accumulate(indices, de * values[..., None])
        dvalues = (de * vecs).sum(axis=-1)
        return grad, dvalues


class FieldAwareInteraction:
    """Interactions over a field-aware ``[n, f, D]`` table.

    For each canonical pair ``(i, j)`` the product vector is
    ``a_ij = x_i table[m_i, j] * x_j table[m_j, i]``. ``kind`` selects the
    output: ``"ffm"`` sums everything to the FFM scalar, ``"concat"`` lays the
    ``a_ij`` side by side (``f(f-1)/2 * D`` wide) and ``"pool"`` sums the
    pairs into one D-vector.
    """

    KINDS = ("ffm", "concat", "pool")

    def __init__(self, kind: str):
        if kind not in self.KINDS:
            raise ValueError(f"unknown field-aware interaction {kind!r}")
        self.kind = kind
        self._cache = None

    def products(self, table, indices, values):
        n, f, d = table.shape
        if indices.shape[1] != f:
            raise ShapeError(f"table has {f} target fields but batch has {indices.shape[1]} fields")
        pi, pj = pair_order(f)
        flat = table.reshape(n * f, d)
        left_rows = indices[:, pi] * f + pj        # feature of field i toward field j
        right_rows = indices[:, pj] * f + pi
        left, right = flat[left_rows], flat[right_rows]
        xl, xr = values[:, pi, None], values[:, pj, None]
        el, er = xl * left, xr * right             # x_i v_{i,f_j} and x_j v_{j,f_i}
        self._cache = (table.shape, left_rows, right_rows, left, right, el, er, xl, xr)
        return el * er                             # [B, P, D]

    def forward(self, table, indices, values):
        if table.ndim != 3:
            raise ShapeError(f"field-aware table must be [n, f, D], got {table.shape}")
        a = self.products(table, indices, values)
        if self.kind == "concat":
            return a.reshape(a.shape[0], -1)
        if self.kind == "pool":
            return a.sum(axis=1)
        return a.sum(axis=(1, 2))

    def backward(self, upstream):
        """Return ``(SparseRows over the [n*f, D] row view, dvalues [B, f])``.

        Only rows read by the forward pass appear in the gradient; own-field
        rows are never among them.
        """
        if self._cache is None:
            raise StateError("interaction backward called before forward")
        shape, left_rows, right_rows, left, right, el, er, xl, xr = self._cache
        b, p, d = left.shape
        if self.kind == "concat":
            da = upstream.reshape(b, p, d)
        elif self.kind == "pool":
            da = np.broadcast_to(upstream[:, None, :], (b, p, d))
        else:
            da = np.broadcast_to(upstream[:, None, None], (b, p, d))
        grad = SparseRows.accumulate(np.concatenate([left_rows, right_rows], axis=1),
                                     np.concatenate([da * er * xl, da * el * xr], axis=1))
        f = shape[1]
        pi, pj = pair_order(f)
        d_xl = (da * left * er).sum(axis=-1)       # [B, P]
        d_xr = (da * right * el).sum(axis=-1)
        dvalues = d_xl @ _incidence(pi, f) + d_xr @ _incidence(pj, f)
        return grad, dvalues


# -- functional forms -------------------------------------------------------------

def fm_pairwise(table, indices, values, method="identity"):
    """FM second-order term ``sum_{i<j} <x_i v_i, x_j v_j>``.

    ``method="loop"`` evaluates the double sum directly; ``"identity"`` uses
    ``1/2 sum_d [(sum_i e_id)^2 - sum_i e_id^2]``.
    """
    indices, values, single = _batched(indices, values)
    if method == "identity":
        out = PlainInteraction("fm").forward(table, indices, values)
    elif method == "loop":
        e = table[indices] * values[..., None]
        out = np.zeros(len(indices))
        f = indices.shape[1]
        for i in range(f):
            for j in range(i + 1, f):
                out += (e[:, i] * e[:, j]).sum(axis=-1)
    else:
        raise ValueError(f"unknown method {method!r}")
    return out[0] if single else out


def bi_interaction_pool(table, indices, values, method="identity"):
    """NFM pooling ``sum_{i<j} (x_i v_i) * (x_j v_j)``; a D-vector per example."""
    indices, values, single = _batched(indices, values)
    if method == "identity":
        out = PlainInteraction("pool").forward(table, indices, values)
    elif method == "loop":
        e = table[indices] * values[..., None]
        out = np.zeros((len(indices), table.shape[1]))
        f = indices.shape[1]
        for i in range(f):
            for j in range(i + 1, f):
                out += e[:, i] * e[:, j]
    else:
        raise ValueError(f"unknown method {method!r}")
    return out[0] if single else out


def ffm_pairwise(table, indices, values):
    """FFM second-order term ``sum_{i<j} <v_{i,f_j}, v_{j,f_i}> x_i x_j``."""
    indices, values, single = _batched(indices, values)
    out = FieldAwareInteraction("ffm").forward(table, indices, values)
    return out[0] if single else out


def bi_interaction_concat(table, indices, values):
    """Concatenation of ``a_{1,2}, a_{1,3}, ..., a_{f-1,f}`` in canonical pair order."""
    indices, values, single = _batched(indices, values)
    out = FieldAwareInteraction("concat").forward(table, indices, values)
    return out[0] if single else out


def field_aware_pool(table, indices, values):
    """Segment-sum of :func:`bi_interaction_concat`; one D-vector per example."""
    indices, values, single = _batched(indices, values)
    out = FieldAwareInteraction("pool").forward(table, indices, values)
    return out[0] if single else out


def concat_segments(concat, f: int, dim: int) -> dict:
    """Split a concatenation back into ``{(i, j): a_ij}``."""
    concat = np.asarray(concat)
    pi, pj = pair_order(f)
    parts = concat.reshape(*concat.shape[:-1], pi.size, dim)
    return {(int(i), int(j)): parts[..., k, :] for k, (i, j) in enumerate(zip(pi, pj))}
