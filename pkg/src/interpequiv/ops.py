"""Serializable transition evaluators.

Every evaluator is batched: it receives a list of parent value arrays of shape
``(batch, arity)`` plus the input array and returns ``(batch, arity)``.
Ops flagged with ``positions > 1`` treat each flat vector as ``positions``
equal-width chunks and act position-wise, the way transformer blocks do.

Only the names in :data:`OP_REGISTRY` may appear in a model file.
"""

from __future__ import annotations

from typing import Any, ClassVar

import numpy as np

from .errors import SerializationError


def _as_array(value: Any) -> np.ndarray:
    return np.array(value, dtype=np.float64)


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": arr.ravel().tolist()}


def _decode_array(obj: dict) -> np.ndarray:
    return np.array(obj["data"], dtype=np.float64).reshape(obj["shape"])


def _positionwise_input(parents: list[np.ndarray], u: np.ndarray, positions: int) -> np.ndarray:
    """Concatenate parents per position; returns ``(batch, positions, width)``."""
    sources = parents if parents else [u]
    chunks = []
    for arr in sources:
        batch = arr.shape[0]
        chunks.append(arr.reshape(batch, positions, -1))
    if len(chunks) == 1:
        return chunks[0]
    return np.concatenate(chunks, axis=2)


class Op:
    """Base class: a named evaluator with array parameters."""

    name: ClassVar[str] = ""
    array_params: ClassVar[tuple[str, ...]] = ()
    scalar_params: ClassVar[tuple[str, ...]] = ()

    def __init__(self, **params: Any):
        for key in self.array_params:
            value = params.get(key)
            setattr(self, key, None if value is None else _as_array(value))
        for key in self.scalar_params:
            setattr(self, key, params.get(key))

    @classmethod
    def from_params(cls, params: dict[str, Any]) -> "Op":
        """Rebuild without re-running constructor normalisation (keeps bits)."""
        obj = cls.__new__(cls)
        for key in cls.array_params:
            value = params.get(key)
            setattr(obj, key, None if value is None else _as_array(value))
        for key in cls.scalar_params:
            setattr(obj, key, params.get(key))
        return obj

    def __call__(self, parents: list[np.ndarray], u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.array_params if getattr(self, k) is not None}

    def replace(self, **changes: Any) -> "Op":
        params = {k: getattr(self, k) for k in self.array_params + self.scalar_params}
        params.update(changes)
        return type(self).from_params(params)

    def to_json(self) -> dict:
        params: dict[str, Any] = {}
        for key in self.array_params:
            value = getattr(self, key)
            params[key] = None if value is None else _encode_array(value)
        for key in self.scalar_params:
            params[key] = getattr(self, key)
        return {"name": self.name, "params": params}

    def __eq__(self, other: object) -> bool:
        if type(self) is not type(other):
            return NotImplemented
        for key in self.scalar_params:
            if getattr(self, key) != getattr(other, key):
                return False
        for key in self.array_params:
            a, b = getattr(self, key), getattr(other, key)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or not np.array_equal(a, b)):
                return False
        return True

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        shapes = {k: v.shape for k, v in self.arrays().items()}
        return f"{type(self).__name__}({shapes})"


class Affine(Op):
    """``y = x @ W + b`` applied per position on the concatenated parents."""

    name = "affine"
    array_params = ("W", "b")
    scalar_params = ("positions",)

    def __init__(self, W, b=None, positions: int = 1):
        W = _as_array(W)
        super().__init__(W=W, b=np.zeros(W.shape[1]) if b is None else b, positions=int(positions))

    def __call__(self, parents, u):
        x = _positionwise_input(parents, u, self.positions)
        y = x @ self.W + self.b
        return y.reshape(x.shape[0], -1)


class Relu(Op):
    """``y = max(0, x @ W + b)``; with no weights it rectifies the input."""

    name = "relu"
    array_params = ("W", "b")
    scalar_params = ("positions",)

    def __init__(self, W=None, b=None, positions: int = 1):
        if W is not None and b is None:
            b = np.zeros(np.shape(W)[1])
        super().__init__(W=W, b=b, positions=int(positions))

    def __call__(self, parents, u):
        x = _positionwise_input(parents, u, self.positions)
        if self.W is not None:
            x = x @ self.W + self.b
        return np.maximum(x, 0.0).reshape(x.shape[0], -1)


class HardAttention(Op):
    """Attention whose weights are the limit of a sharpened softmax.

    A key is attended iff its query-key score reaches ``threshold``; attended
    values are averaged uniformly. Rows that attend nothing emit ``default``.
    When ``bos`` is given, a virtual always-attended key contributes it as an
    extra value, so the output becomes ``(bos + sum) / (count + 1)``.
    """

    name = "softmax-hard-attention"
    array_params = ("W_q", "W_k", "W_ov", "default", "bos")
    scalar_params = ("positions", "threshold")

    def __init__(self, W_q, W_k, W_ov, default=None, bos=None, positions: int = 1, threshold: float = 0.5):
        W_ov = _as_array(W_ov)
        if default is None:
            default = np.zeros(W_ov.shape[1])
        super().__init__(
            W_q=W_q, W_k=W_k, W_ov=W_ov, default=default, bos=bos,
            positions=int(positions), threshold=float(threshold),
        )

    def __call__(self, parents, u):
        x = _positionwise_input(parents, u, self.positions)
        q = x @ self.W_q
        k = x @ self.W_k
        scores = q @ np.swapaxes(k, 1, 2)
        selected = (scores >= self.threshold).astype(np.float64)
        values = x @ self.W_ov
        sums = selected @ values
        counts = selected.sum(axis=2, keepdims=True)
        if self.bos is not None:
            out = (sums + self.bos) / (counts + 1.0)
        else:
            safe = np.where(counts > 0, counts, 1.0)
            out = np.where(counts > 0, sums / safe, self.default)
        return out.reshape(x.shape[0], -1)


class ElementwiseTable(Op):
    """Per-position lookup of one input channel in a finite table.

    ``match="exact"`` rejects values missing from ``keys``; ``"nearest"`` picks
    the closest key. ``positional`` rows are added per position.
    """

    name = "elementwise-table"
    array_params = ("keys", "table", "positional")
    scalar_params = ("positions", "channel", "match")

    def __init__(self, keys, table, positional=None, positions: int = 1, channel: int = 0, match: str = "exact"):
        keys = _as_array(keys)
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        table = _as_array(table)[order]
        if match not in ("exact", "nearest"):
            raise ValueError(f"unknown match mode {match!r}")
        super().__init__(
            keys=keys, table=table, positional=positional,
            positions=int(positions), channel=int(channel), match=match,
        )

    def __call__(self, parents, u):
        x = _positionwise_input(parents, u, self.positions)[:, :, self.channel]
        idx = np.searchsorted(self.keys, x)
        idx = np.clip(idx, 0, len(self.keys) - 1)
        if self.match == "exact":
            if not np.all(self.keys[idx] == x):
                bad = x[self.keys[idx] != x]
                raise ValueError(f"value {bad.ravel()[0]!r} not in table keys")
        else:
            left = np.clip(idx - 1, 0, len(self.keys) - 1)
            use_left = np.abs(x - self.keys[left]) <= np.abs(self.keys[idx] - x)
            idx = np.where(use_left, left, idx)
        out = self.table[idx]
        if self.positional is not None:
            out = out + self.positional[None, :, :]
        return out.reshape(x.shape[0], -1)


class Constant(Op):
    name = "constant"
    array_params = ("value",)

    def __init__(self, value):
        super().__init__(value=np.atleast_1d(_as_array(value)))

    def __call__(self, parents, u):
        return np.broadcast_to(self.value, (u.shape[0], self.value.shape[0])).copy()


class Concat(Op):
    name = "concat"
    scalar_params = ("positions",)

    def __init__(self, positions: int = 1):
        super().__init__(positions=int(positions))

    def __call__(self, parents, u):
        x = _positionwise_input(parents, u, self.positions)
        return x.reshape(x.shape[0], -1)


class MeanPool(Op):
    name = "mean-pool"
    scalar_params = ("positions",)

    def __init__(self, positions: int = 1):
        super().__init__(positions=int(positions))

    def __call__(self, parents, u):
        x = _positionwise_input(parents, u, self.positions)
        return x.mean(axis=1)


OP_REGISTRY: dict[str, type[Op]] = {
    cls.name: cls
    for cls in (Affine, Relu, HardAttention, ElementwiseTable, Constant, Concat, MeanPool)
}


def op_from_json(obj: dict) -> Op:
    name = obj.get("name")
    cls = OP_REGISTRY.get(name)
    if cls is None:
        raise SerializationError(f"op {name!r} is not in the whitelist {sorted(OP_REGISTRY)}")
    kwargs: dict[str, Any] = {}
    params = obj.get("params", {})
    for key in cls.array_params:
        value = params.get(key)
        kwargs[key] = None if value is None else _decode_array(value)
    for key in cls.scalar_params:
        if key in params:
            kwargs[key] = params[key]
    return cls.from_params(kwargs)
