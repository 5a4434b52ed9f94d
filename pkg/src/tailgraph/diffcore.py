"""Dense float64 tensors with reverse-mode gradient accumulation.

A tape-free micrograd-style engine: every operation stores its parents and
a closure computing vector-Jacobian products, so calling ``backward()`` on a
scalar walks the graph in reverse topological order. Gradients accumulate
additively into ``.grad`` (a second backward pass without zeroing doubles
them exactly).
"""

from __future__ import annotations

import json
from contextlib import contextmanager

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Parameter",
    "no_grad",
    "concat",
    "stack_rows",
    "const_mm",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference forward passes)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def _recording() -> bool:
    return _GRAD_ENABLED[-1]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient `g` down to `shape` (undo numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        if _recording():
            self._parents = tuple(parents)
            self._vjp = vjp
        else:
            self._parents = ()
            self._vjp = None

    # ------------------------------------------------------------------
    # basic protocol
    # ------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={self.data!r})"

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    # ------------------------------------------------------------------
    # arithmetic (numpy broadcasting allowed; backward unbroadcasts)
    # ------------------------------------------------------------------
    def __add__(self, other):
        other = Tensor._lift(other)
        out_data = self.data + other.data
        return Tensor(
            out_data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._lift(other)
        return Tensor(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)),
        )

    def __rsub__(self, other):
        return Tensor._lift(other) - self

    def __mul__(self, other):
        other = Tensor._lift(other)
        return Tensor(
            self.data * other.data,
            (self, other),
            lambda g: (
                _unbroadcast(g * other.data, self.shape),
                _unbroadcast(g * self.data, other.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        out_data = self.data / other.data
        return Tensor(
            out_data,
            (self, other),
            lambda g: (
                _unbroadcast(g / other.data, self.shape),
                _unbroadcast(-g * out_data / other.data, other.shape),
            ),
        )

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __neg__(self):
        return Tensor(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ValueError("only scalar exponents are supported")
        out_data = self.data ** exponent
        return Tensor(
            out_data,
            (self,),
            lambda g: (g * exponent * self.data ** (exponent - 1),),
        )

    def __matmul__(self, other):
        other = Tensor._lift(other)
        a, b = self.data, other.data
        if a.ndim == 2 and b.ndim == 2:
            if a.shape[1] != b.shape[0]:
                raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
            return Tensor(
                a @ b,
                (self, other),
                lambda g: (g @ b.T, a.T @ g),
            )
        if a.ndim == 1 and b.ndim == 2:
            if a.shape[0] != b.shape[0]:
                raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
            return Tensor(
                a @ b,
                (self, other),
                lambda g: (b @ g, np.outer(a, g)),
            )
        if a.ndim == 2 and b.ndim == 1:
            if a.shape[1] != b.shape[0]:
                raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
            return Tensor(
                a @ b,
                (self, other),
                lambda g: (np.outer(g, b), a.T @ g),
            )
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")

    @property
    def T(self):
        if self.ndim != 2:
            raise ShapeError(f"transpose expects a matrix, got shape {self.shape}")
        return Tensor(self.data.T, (self,), lambda g: (g.T,))

    # ------------------------------------------------------------------
    # nonlinearities and reductions
    # ------------------------------------------------------------------
    def relu(self):
        mask = self.data > 0  # subgradient at 0 is 0
        return Tensor(np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,))

    # elementwise hinge max(0, x) is the same operation
    hinge = relu

    def abs(self):
        sign = np.sign(self.data)  # 0 at 0, consistent with the hinge convention
        return Tensor(np.abs(self.data), (self,), lambda g: (g * sign,))

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor(out_data, (self,), lambda g: (g * out_data,))

    def log(self):
        return Tensor(np.log(self.data), (self,), lambda g: (g / self.data,))

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        shape, nd = self.shape, self.ndim

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy() if nd else g,)

        return Tensor(out_data, (self,), vjp)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def log_sum_exp(self, axis=None, keepdims=False):
        """Numerically stable log(sum(exp(x)))."""
        m = np.max(self.data, axis=axis, keepdims=True)
        lse_keep = m + np.log(np.sum(np.exp(self.data - m), axis=axis, keepdims=True))
        out_data = lse_keep if keepdims else np.squeeze(lse_keep, axis=axis) if axis is not None else lse_keep.reshape(())
        softmax = np.exp(self.data - lse_keep)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (g * softmax,)

        return Tensor(out_data, (self,), vjp)

    def row_softmax(self):
        """Softmax along the last axis of a matrix (or of a vector)."""
        m = np.max(self.data, axis=-1, keepdims=True)
        e = np.exp(self.data - m)
        s = e / e.sum(axis=-1, keepdims=True)

        def vjp(g):
            return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

        return Tensor(s, (self,), vjp)

    def rows(self, indices) -> "Tensor":
        """Gather rows of a matrix; backward scatter-adds."""
        idx = np.asarray(indices, dtype=np.int64)
        shape = self.shape

        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor(self.data[idx], (self,), vjp)

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return Tensor(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def l2_norm(self):
        """Euclidean norm of all entries, as a scalar."""
        norm = float(np.sqrt((self.data ** 2).sum()))

        def vjp(g):
            if norm == 0.0:
                return (np.zeros_like(self.data),)
            return (g * self.data / norm,)

        return Tensor(norm, (self,), vjp)

    # ------------------------------------------------------------------
    # backward
    # ------------------------------------------------------------------
    def backward(self):
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        # pass-local flows keep repeated backward calls exact: .grad only ever
        # receives each node's full adjoint once per pass
        flows: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in flows:
                    flows[key] = flows[key] + pg
                else:
                    flows[key] = pg

    def zero_grad(self):
        self.grad = None


class Parameter(Tensor):
    """A named trainable tensor; optimizers update ``.data`` in place."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data)
        self.name = name
        self.trainable = trainable

    @classmethod
    def randn(cls, shape, rng: np.random.Generator, scale: float, name: str = ""):
        return cls(rng.normal(0.0, scale, size=shape), name=name)


# ----------------------------------------------------------------------
# free functions over several tensors
# ----------------------------------------------------------------------
def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out_data, tuple(tensors), vjp)


def stack_rows(vectors) -> Tensor:
    """Stack 1-D tensors into a matrix, one per row."""
    vectors = [Tensor._lift(v) for v in vectors]
    out_data = np.stack([v.data for v in vectors], axis=0)

    def vjp(g):
        return tuple(g[i] for i in range(len(vectors)))

    return Tensor(out_data, tuple(vectors), vjp)


def const_mm(matrix, x: Tensor) -> Tensor:
    """Multiply by a constant matrix (dense ndarray or scipy.sparse).

    The constant side receives no gradient; backward is ``matrix.T @ g``.
    Used for neighbor averaging, pooling, and row selection where the
    operator is data, not a parameter.
    """
    out_data = matrix @ x.data
    mt = matrix.T

    def vjp(g):
        return (mt @ g,)

    return Tensor(np.asarray(out_data), (x,), vjp)


# ----------------------------------------------------------------------
# verification and persistence
# ----------------------------------------------------------------------
def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    ``f`` must be scalar-valued and differentiable at ``x``; kinked points
    (relu/abs at 0) should be avoided by perturbing ``x`` beforehand.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.grad = None
    out = f(x)
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data)
            flat[i] = orig - eps
            fm = float(f(x).data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)

    a = analytic.reshape(-1)
    rel = np.abs(a - numeric) / np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    return float(rel.max())


def save_checkpoint(params: dict, path) -> None:
    """Write ``{name: {shape, values}}`` JSON; 17 significant digits so every
    float64 round-trips exactly."""
    payload = {}
    for name, p in params.items():
        payload[name] = {
            "shape": list(p.data.shape),
            "values": [float(f"{v:.17g}") for v in p.data.reshape(-1)],
        }
    text = json.dumps(payload, indent=1)
    with open(path, "w") as fh:
        fh.write(text)


def load_checkpoint(path) -> dict:
    """Read a checkpoint back into ``{name: ndarray}``."""
    with open(path) as fh:
        payload = json.load(fh)
    out = {}
    for name, entry in payload.items():
        out[name] = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
    return out
