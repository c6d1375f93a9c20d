# (c) 2024 riskformer contributors
# Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php
"""
Minimal reverse-mode differentiation on 64-bit numpy arrays.

Only the operations needed by the model families are implemented:
matmul, elementwise add/sub/mul/power, tanh, sigmoid, relu, softmax with an
optional attention mask, 1-D convolution and transposed convolution,
mean/sum reductions, reshape/transpose, and layer normalization.

A :class:`Graph` wraps a *build function* that maps named input nodes to
one or more output nodes. Calling :meth:`Graph.forward_eval` binds arrays to
the inputs and records the computation; :meth:`Graph.backward` then
propagates gradients from one scalar output to every input.

Example::

    graph = Graph(lambda n: mse(n["x"], n["t"]))
    graph.forward_eval({"x": [1.0, 0.0], "t": [0.0, 0.0]})  # {'output': 0.5}
    graph.backward()["x"]  # [1.0, 0.0]
"""
from contextlib import contextmanager

import numpy as np

from riskformer.util import (
    GraphError,
    NonFiniteError,
    ShapeError,
    check_arg,
    logger,
)

#: Additive score for blocked attention entries (exp() underflows to exactly 0)
MASK_VALUE = -1e9

DTYPE = np.float64


class TensorNode:
    """One value in the computation graph.

    Attributes:
        values (ndarray): float64 result of the operation
        grad (ndarray|None): same shape as `values`, set by `backward()`
        op (str): name of the producing operation ('input', 'const', ...)
        parents (tuple): input nodes of the operation
        requires_grad (bool): true if a graph input is reachable via `parents`
    """

    __slots__ = ("values", "grad", "op", "parents", "name", "requires_grad", "_backward")

    def __init__(self, values, parents=(), op="const", name=None, requires_grad=False):
        self.values = np.asarray(values, dtype=DTYPE)
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self.name = name
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self._backward = None

    def __repr__(self):
        name = f" {self.name!r}" if self.name else ""
        return f"TensorNode<{self.op}{name}, shape={self.shape}>"

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)


def constant(values, name=None):
    """Return a node that never receives a gradient."""
    return TensorNode(values, op="const", name=name)


def _wrap(x):
    return x if isinstance(x, TensorNode) else constant(x)


@contextmanager
def _shape_guard(op, *nodes):
    try:
        yield
    except ValueError as e:
        if isinstance(e, ShapeError):
            raise
        shapes = ", ".join(str(n.shape) for n in nodes)
        raise ShapeError(f"Shape mismatch in '{op}' (operands {shapes}): {e}") from None


def _require(op, condition, msg, *nodes):
    if not condition:
        shapes = ", ".join(str(n.shape) for n in nodes)
        raise ShapeError(f"Shape mismatch in '{op}' (operands {shapes}): {msg}")


def _accumulate(node, grad):
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = grad
    else:
        node.grad = node.grad + grad


def _unbroadcast(grad, shape):
    """Sum `grad` over the axes that numpy broadcasting added or stretched."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _node(values, parents, op, backward):
    out = TensorNode(values, parents, op=op)
    if out.requires_grad:
        out._backward = backward
    return out


# --- Elementwise -------------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    with _shape_guard("add", a, b):
        values = a.values + b.values

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(values, (a, b), "add", backward)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    with _shape_guard("sub", a, b):
        values = a.values - b.values

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(values, (a, b), "sub", backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    with _shape_guard("mul", a, b):
        values = a.values * b.values

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.values, a.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.shape))

    return _node(values, (a, b), "mul", backward)


def power(a, exponent):
    """Elementwise `a ** exponent` for a constant real exponent."""
    a = _wrap(a)
    check_arg(exponent, (int, float))
    values = a.values**exponent

    def backward(g):
        _accumulate(a, g * exponent * a.values ** (exponent - 1))

    return _node(values, (a,), "power", backward)


def tanh(a):
    a = _wrap(a)
    values = np.tanh(a.values)

    def backward(g):
        _accumulate(a, g * (1.0 - values * values))

    return _node(values, (a,), "tanh", backward)


def sigmoid(a):
    a = _wrap(a)
    x = a.values
    # Two branches, so exp() never overflows
    ex = np.exp(-np.abs(x))
    values = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))

    def backward(g):
        _accumulate(a, g * values * (1.0 - values))

    return _node(values, (a,), "sigmoid", backward)


def relu(a):
    a = _wrap(a)
    active = a.values > 0
    values = np.where(active, a.values, 0.0)

    def backward(g):
        _accumulate(a, g * active)

    return _node(values, (a,), "relu", backward)


# --- Linear algebra ----------------------------------------------------------


def matmul(a, b):
    """Batched matrix product over the last two axes (numpy broadcasting rules)."""
    a, b = _wrap(a), _wrap(b)
    _require("matmul", a.ndim >= 2 and b.ndim >= 2, "operands must be 2-D or more", a, b)
    with _shape_guard("matmul", a, b):
        values = np.matmul(a.values, b.values)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # Fold batch axes into one product
                k = a.shape[-1]
                gb = a.values.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.values, -1, -2), g), b.shape)
            _accumulate(b, gb)

    return _node(values, (a, b), "matmul", backward)


def reshape(a, shape):
    a = _wrap(a)
    with _shape_guard("reshape", a):
        values = a.values.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(values, (a,), "reshape", backward)


def transpose(a, axes):
    a = _wrap(a)
    axes = tuple(axes)
    with _shape_guard("transpose", a):
        values = np.transpose(a.values, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, np.transpose(g, inverse))

    return _node(values, (a,), "transpose", backward)


# --- Reductions --------------------------------------------------------------


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand_reduced(g, axes, shape):
    for ax in axes:
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = _wrap(a)
    axes = _normalize_axes(axis, a.ndim)
    values = a.values.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = _expand_reduced(g, axes, a.shape)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _node(values, (a,), "sum", backward)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    values = a.values.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = _expand_reduced(g, axes, a.shape)
        _accumulate(a, np.broadcast_to(g, a.shape) / count)

    return _node(values, (a,), "mean", backward)


# --- Neural network building blocks ------------------------------------------


def softmax(a, mask=None):
    """Softmax over the last axis.

    Args:
        a (TensorNode): scores
        mask (ndarray, optional): boolean array broadcastable to `a`;
            false entries are blocked by adding :data:`MASK_VALUE`.
    """
    a = _wrap(a)
    z = a.values
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        with _shape_guard("softmax", a, constant(mask)):
            z = z + np.where(mask, 0.0, MASK_VALUE)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    values = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(a, values * (g - (g * values).sum(axis=-1, keepdims=True)))

    return _node(values, (a,), "softmax", backward)


def layer_norm(a, gamma, beta, eps=1e-6):
    """Normalize over the last axis, then scale by `gamma` and shift by `beta`."""
    a, gamma, beta = _wrap(a), _wrap(gamma), _wrap(beta)
    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    with _shape_guard("layer_norm", a, gamma, beta):
        values = xhat * gamma.values + beta.values

    def backward(g):
        _accumulate(gamma, _unbroadcast(g * xhat, gamma.shape))
        _accumulate(beta, _unbroadcast(g, beta.shape))
        if a.requires_grad:
            dxhat = g * gamma.values
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            _accumulate(a, dx)

    return _node(values, (a, gamma, beta), "layer_norm", backward)


def conv1d(a, kernel):
    """'Same'-padded, stride-1 convolution of channels-last input.

    Args:
        a: input of shape (B, T, C_in)
        kernel: weights of shape (K, C_in, C_out)
    Returns:
        node of shape (B, T, C_out)
    """
    a, kernel = _wrap(a), _wrap(kernel)
    _require("conv1d", a.ndim == 3 and kernel.ndim == 3, "expected 3-D operands", a, kernel)
    _require("conv1d", a.shape[2] == kernel.shape[1], "input channels differ", a, kernel)
    B, T, c_in = a.shape
    K, _, c_out = kernel.shape
    pad_left = (K - 1) // 2
    xp = np.pad(a.values, ((0, 0), (pad_left, K - 1 - pad_left), (0, 0)))
    cols = np.stack([xp[:, k : k + T, :] for k in range(K)], axis=2)
    cols = cols.reshape(B, T, K * c_in)
    w2 = kernel.values.reshape(K * c_in, c_out)
    values = cols @ w2

    def backward(g):
        if kernel.requires_grad:
            gw = cols.reshape(-1, K * c_in).T @ g.reshape(-1, c_out)
            _accumulate(kernel, gw.reshape(kernel.shape))
        if a.requires_grad:
            gcols = (g @ w2.T).reshape(B, T, K, c_in)
            gxp = np.zeros((B, T + K - 1, c_in), dtype=DTYPE)
            for k in range(K):
                gxp[:, k : k + T, :] += gcols[:, :, k, :]
            _accumulate(a, gxp[:, pad_left : pad_left + T, :])

    return _node(values, (a, kernel), "conv1d", backward)


def conv_transpose1d(a, kernel):
    """'Same'-cropped, stride-1 transposed convolution of channels-last input.

    Args:
        a: input of shape (B, T, C_in)
        kernel: weights of shape (K, C_in, C_out)
    Returns:
        node of shape (B, T, C_out)
    """
    a, kernel = _wrap(a), _wrap(kernel)
    _require(
        "conv_transpose1d",
        a.ndim == 3 and kernel.ndim == 3,
        "expected 3-D operands",
        a,
        kernel,
    )
    _require(
        "conv_transpose1d",
        a.shape[2] == kernel.shape[1],
        "input channels differ",
        a,
        kernel,
    )
    B, T, c_in = a.shape
    K, _, c_out = kernel.shape
    crop = K - 1 - (K - 1) // 2
    full = np.zeros((B, T + K - 1, c_out), dtype=DTYPE)
    for k in range(K):
        full[:, k : k + T, :] += a.values @ kernel.values[k]
    values = full[:, crop : crop + T, :]

    def backward(g):
        gfull = np.zeros((B, T + K - 1, c_out), dtype=DTYPE)
        gfull[:, crop : crop + T, :] = g
        if a.requires_grad:
            ga = np.zeros_like(a.values)
            for k in range(K):
                ga += gfull[:, k : k + T, :] @ kernel.values[k].T
            _accumulate(a, ga)
        if kernel.requires_grad:
            flat_a = a.values.reshape(-1, c_in).T
            gw = np.stack(
                [flat_a @ gfull[:, k : k + T, :].reshape(-1, c_out) for k in range(K)]
            )
            _accumulate(kernel, gw)

    return _node(values, (a, kernel), "conv_transpose1d", backward)


# --- Losses ------------------------------------------------------------------


def mse(prediction, target):
    """Mean of squared differences over all entries."""
    return mean(power(sub(prediction, target), 2))


def binary_cross_entropy(prob, target, eps=1e-12):
    """Mean binary cross-entropy of probabilities `prob` against 0/1 `target`."""
    prob, target = _wrap(prob), _wrap(target)
    with _shape_guard("binary_cross_entropy", prob, target):
        p = np.clip(prob.values, eps, 1.0 - eps)
        t = target.values
        losses = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    n = losses.size
    values = losses.mean()

    def backward(g):
        _accumulate(prob, g * (p - t) / (p * (1.0 - p)) / n)

    return _node(values, (prob, target), "binary_cross_entropy", backward)


# --- Graph -------------------------------------------------------------------


def topological_order(root):
    """Return all nodes that `root` depends on (and needs gradients for), inputs first."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


class Graph:
    """A computation graph that can be evaluated and differentiated repeatedly.

    Args:
        build_fn (callable):
            Called with a dict {input_name: TensorNode}; returns one
            :class:`TensorNode` (exposed as output 'output') or a dict of them.
        name (str, optional): used in error messages
    """

    def __init__(self, build_fn, name=None):
        assert callable(build_fn)
        self.build_fn = build_fn
        self.name = name or getattr(build_fn, "__name__", "graph")
        #: (dict) arrays bound by the last `forward_eval()` call
        self.inputs = None
        #: (dict) input name -> leaf TensorNode of the last evaluation
        self.leaves = None
        #: (dict) output name -> TensorNode of the last evaluation
        self.outputs = None

    def __repr__(self):
        return f"Graph<{self.name}>"

    def forward_eval(self, inputs, check_finite=True):
        """Bind `inputs` and evaluate all outputs.

        Raises:
            GraphError: if the build function reads an unbound input name
            ShapeError: if an operation gets incompatible shapes
            NonFiniteError: if an output contains NaN or Inf
        Returns:
            dict {output_name: ndarray}
        """
        check_arg(inputs, dict)
        leaves = {
            name: TensorNode(
                np.array(value, dtype=DTYPE, copy=True),
                op="input",
                name=name,
                requires_grad=True,
            )
            for name, value in inputs.items()
        }
        try:
            res = self.build_fn(leaves)
        except KeyError as e:
            raise GraphError(f"{self}: input {e} is not bound") from None

        if isinstance(res, TensorNode):
            res = {"output": res}
        check_arg(res, dict)

        self.inputs = inputs
        self.leaves = leaves
        self.outputs = res

        out = {}
        for name, node in res.items():
            if check_finite and not np.all(np.isfinite(node.values)):
                raise NonFiniteError(
                    f"{self}: output '{name}' contains NaN or Inf (produced by '{node.op}')"
                )
            out[name] = node.values
        return out

    def output_node(self, name=None):
        if self.outputs is None:
            raise GraphError(f"{self}: forward_eval() must be called first")
        if name is None:
            if len(self.outputs) != 1:
                raise GraphError(
                    f"{self}: pass an output name, one of {list(self.outputs)}"
                )
            name = next(iter(self.outputs))
        return self.outputs[name]

    def backward(self, seed_output=None, seed=1.0):
        """Propagate gradients from `seed_output` to all inputs.

        Args:
            seed_output (str, optional): output name (may be omitted for
                single-output graphs)
            seed (float): initial gradient, e.g. a batch weight
        Returns:
            dict {input_name: gradient ndarray}; inputs that do not influence
            the output get exact zeros.
        """
        out = self.output_node(seed_output)
        order = topological_order(out) if out.requires_grad else []
        for leaf in self.leaves.values():
            leaf.grad = None
        for node in order:
            node.grad = None
        if order:
            out.grad = np.full(out.shape, seed, dtype=DTYPE)
            for node in reversed(order):
                if node._backward is not None and node.grad is not None:
                    node._backward(node.grad)

        grads = {}
        for name, leaf in self.leaves.items():
            if leaf.grad is None:
                grads[name] = np.zeros_like(leaf.values)
            else:
                grads[name] = np.array(leaf.grad, dtype=DTYPE, copy=True)
        return grads


def forward_eval(graph, inputs):
    """Evaluate `graph` with named input arrays (see :meth:`Graph.forward_eval`)."""
    return graph.forward_eval(inputs)


def backward(graph, seed_output=None):
    """Return gradients of `seed_output` for all graph inputs."""
    return graph.backward(seed_output)


def finite_difference_gradient(graph, param, eps=1e-5, inputs=None, output=None):
    """Central-difference estimate of d(output)/d(param).

    Uses the inputs of the last `forward_eval()` unless `inputs` is passed.
    The graph is re-evaluated with the original inputs before returning.

    Raises:
        ShapeError: if the output is not a scalar
    """
    check_arg(eps, float, eps > 0)
    if inputs is None:
        if graph.inputs is None:
            raise GraphError(f"{graph}: forward_eval() must be called first")
        inputs = graph.inputs
    work = {k: np.array(v, dtype=DTYPE, copy=True) for k, v in inputs.items()}
    p = work[param]

    def f():
        res = graph.forward_eval(work, check_finite=False)
        name = output or next(iter(res))
        val = res[name]
        if np.size(val) != 1:
            raise ShapeError(
                f"{graph}: finite differences need a scalar output, got shape {np.shape(val)}"
            )
        return float(np.reshape(val, ()))

    grad = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        orig = p[idx]
        p[idx] = orig + eps
        f_plus = f()
        p[idx] = orig - eps
        f_minus = f()
        p[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * eps)

    graph.forward_eval(inputs, check_finite=False)
    logger.debug(f"{graph}: finite differences for '{param}' ({p.size} entries)")
    return grad
