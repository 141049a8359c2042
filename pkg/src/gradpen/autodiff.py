"""Reverse-mode automatic differentiation with differentiable gradients.

Every operation returns a DiffNode; the backward rules themselves build
DiffNodes, so the gradient of a scalar is a first-class graph that can be
differentiated again. That is what makes the Jacobian penalty trainable: the
penalty is a scalar built from input gradients, and its parameter gradient is
one more backward pass through the gradient graph (double backpropagation).

Conventions baked in here:

* relu'(0) = 0, and the relu mask is treated as piecewise constant under a
  second differentiation (its a.e. derivative);
* d|u|/du = sign(u) with sign(0) = 0, and the sign is likewise held constant;
* nodes record a creation index, and since inputs always precede outputs,
  descending creation order is a valid reverse-topological order. Gradient
  accumulation follows that fixed order, which keeps runs bit-reproducible.
"""
from __future__ import annotations

import itertools

import numpy as np

from .precision import active_dtype
from .tensor import (
    Tensor,
    col2im_array,
    crop2d_array,
    im2col_array,
    pad2d_array,
    same_pads,
)

_counter = itertools.count()


class GraphError(ValueError):
    pass


class DiffNode:
    """A value in the computation graph.

    ``parents`` are the input nodes (empty for leaves and constants) and
    ``vjp`` maps an incoming gradient node to one gradient node per parent.
    """

    __slots__ = ("value", "parents", "vjp", "requires_grad", "_id")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.requires_grad = bool(requires_grad)
        self._id = next(_counter)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def item(self) -> float:
        return self.value.item()

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"DiffNode(shape={self.shape}, requires_grad={self.requires_grad})"


def leaf(value, requires_grad: bool = True) -> DiffNode:
    return DiffNode(value, requires_grad=requires_grad)


def constant(value) -> DiffNode:
    return DiffNode(value)


def _node(x) -> DiffNode:
    if isinstance(x, DiffNode):
        return x
    return constant(x)


def _arr(x: DiffNode) -> np.ndarray:
    return x.value.data


def _op(arr: np.ndarray, parents: tuple, vjp) -> DiffNode:
    rg = any(p.requires_grad for p in parents)
    node = DiffNode.__new__(DiffNode)
    node.value = Tensor.wrap(arr)
    node.parents = parents
    node.vjp = vjp if rg else None
    node.requires_grad = rg
    node._id = next(_counter)
    return node


# ---------------------------------------------------------------------------
# broadcasting helpers

def _unbroadcast(g: DiffNode, shape: tuple) -> DiffNode:
    """Reduce a broadcast gradient back to the shape of the operand."""
    if g.shape == shape:
        return g
    lead = len(g.shape) - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    out = reduce_sum(g, axis=axes, keepdims=False) if axes else g
    if out.shape != shape:
        out = reshape(out, shape)
    return out


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops

def add(a, b) -> DiffNode:
    a, b = _node(a), _node(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _op(_arr(a) + _arr(b), (a, b), vjp)


def sub(a, b) -> DiffNode:
    a, b = _node(a), _node(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(neg(g), sb)

    return _op(_arr(a) - _arr(b), (a, b), vjp)


def neg(a) -> DiffNode:
    a = _node(a)

    def vjp(g):
        return (neg(g),)

    return _op(-_arr(a), (a,), vjp)


def mul(a, b) -> DiffNode:
    a, b = _node(a), _node(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(mul(g, b), sa), _unbroadcast(mul(g, a), sb)

    return _op(_arr(a) * _arr(b), (a, b), vjp)


def scale(a, c: float) -> DiffNode:
    a = _node(a)
    c = float(c)

    def vjp(g):
        return (scale(g, c),)

    return _op(_arr(a) * c, (a,), vjp)


def matmul(a, b) -> DiffNode:
    a, b = _node(a), _node(b)
    if _arr(a).ndim != 2 or _arr(b).ndim != 2:
        raise GraphError("matmul is 2-d only")

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _op(_arr(a) @ _arr(b), (a, b), vjp)


def transpose(a) -> DiffNode:
    a = _node(a)

    def vjp(g):
        return (transpose(g),)

    return _op(np.ascontiguousarray(_arr(a).T), (a,), vjp)


def permute(a, axes: tuple) -> DiffNode:
    a = _node(a)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (permute(g, inv),)

    return _op(np.ascontiguousarray(_arr(a).transpose(axes)), (a,), vjp)


def reshape(a, shape) -> DiffNode:
    a = _node(a)
    old = a.shape
    shape = tuple(shape)

    def vjp(g):
        return (reshape(g, old),)

    return _op(np.ascontiguousarray(_arr(a).reshape(shape)), (a,), vjp)


def broadcast_to(a, shape) -> DiffNode:
    a = _node(a)
    old = a.shape
    shape = tuple(shape)

    def vjp(g):
        return (_unbroadcast(g, old),)

    return _op(np.ascontiguousarray(np.broadcast_to(_arr(a), shape)), (a,), vjp)


def reduce_sum(a, axis=None, keepdims: bool = False) -> DiffNode:
    a = _node(a)
    old = a.shape
    if axis is None:
        axes = tuple(range(len(old)))
    elif isinstance(axis, int):
        axes = (axis % len(old),)
    else:
        axes = tuple(ax % len(old) for ax in axis)
    keepshape = tuple(1 if i in axes else s for i, s in enumerate(old))

    def vjp(g):
        return (broadcast_to(reshape(g, keepshape), old),)

    return _op(np.sum(_arr(a), axis=axes, keepdims=keepdims), (a,), vjp)


def relu(a) -> DiffNode:
    a = _node(a)
    mask = constant((_arr(a) > 0).astype(active_dtype()))

    def vjp(g):
        return (mul(g, mask),)

    return _op(np.maximum(_arr(a), 0), (a,), vjp)


def absolute(a) -> DiffNode:
    a = _node(a)
    s = constant(np.sign(_arr(a)))  # sign(0) = 0, held constant

    def vjp(g):
        return (mul(g, s),)

    return _op(np.abs(_arr(a)), (a,), vjp)


def exp(a) -> DiffNode:
    a = _node(a)
    out_holder = []

    def vjp(g):
        return (mul(g, out_holder[0]),)

    node = _op(np.exp(_arr(a)), (a,), vjp)
    out_holder.append(node)
    return node


def reciprocal(a) -> DiffNode:
    a = _node(a)
    out_holder = []

    def vjp(g):
        sq = mul(out_holder[0], out_holder[0])
        return (neg(mul(g, sq)),)

    node = _op(1.0 / _arr(a), (a,), vjp)
    out_holder.append(node)
    return node


def log(a) -> DiffNode:
    a = _node(a)
    if np.any(_arr(a) <= 0):
        raise GraphError("log of non-positive value")

    def vjp(g):
        return (mul(g, reciprocal(a)),)

    return _op(np.log(_arr(a)), (a,), vjp)


def max_detached(a, axis=None, keepdims: bool = True) -> DiffNode:
    """The max as a constant node (no gradient); used for softmax stabilization."""
    return constant(np.max(_arr(_node(a)), axis=axis, keepdims=keepdims))


def sign_detached(a) -> DiffNode:
    return constant(np.sign(_arr(_node(a))))


def clip01(a) -> DiffNode:
    """Clip to [0, 1]; gradient passes where the pre-clip value is inside."""
    a = _node(a)
    av = _arr(a)
    mask = constant(((av >= 0.0) & (av <= 1.0)).astype(active_dtype()))

    def vjp(g):
        return (mul(g, mask),)

    return _op(np.clip(av, 0.0, 1.0), (a,), vjp)


def concat0(nodes) -> DiffNode:
    nodes = tuple(_node(n) for n in nodes)
    sizes = [n.shape[0] for n in nodes]
    starts = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g):
        return tuple(narrow0(g, int(starts[i]), sizes[i]) for i in range(len(nodes)))

    return _op(np.concatenate([_arr(n) for n in nodes], axis=0), nodes, vjp)


def narrow0(a, start: int, length: int) -> DiffNode:
    a = _node(a)
    total = a.shape[0]

    def vjp(g):
        return (embed0(g, start, total),)

    return _op(np.ascontiguousarray(_arr(a)[start : start + length]), (a,), vjp)


def embed0(a, start: int, total: int) -> DiffNode:
    a = _node(a)
    length = a.shape[0]

    def vjp(g):
        return (narrow0(g, start, length),)

    av = _arr(a)
    out = np.zeros((total,) + av.shape[1:], dtype=av.dtype)
    out[start : start + length] = av
    return _op(out, (a,), vjp)


# ---------------------------------------------------------------------------
# convolution building blocks (im2col and col2im are mutually adjoint linear
# maps, so arbitrarily deep differentiation falls out of the vjp pairing)

def pad2d(a, pads: tuple) -> DiffNode:
    a = _node(a)

    def vjp(g):
        return (crop2d(g, pads),)

    return _op(pad2d_array(_arr(a), pads), (a,), vjp)


def crop2d(a, pads: tuple) -> DiffNode:
    a = _node(a)

    def vjp(g):
        return (pad2d(g, pads),)

    return _op(np.ascontiguousarray(crop2d_array(_arr(a), pads)), (a,), vjp)


def im2col(a, k: int, stride: int) -> DiffNode:
    a = _node(a)
    xshape = a.shape

    def vjp(g):
        return (col2im(g, xshape, k, stride),)

    cols, _, _ = im2col_array(_arr(a), k, stride)
    return _op(cols, (a,), vjp)


def col2im(a, xshape: tuple, k: int, stride: int) -> DiffNode:
    a = _node(a)

    def vjp(g):
        return (im2col(g, k, stride),)

    return _op(col2im_array(_arr(a), xshape, k, stride), (a,), vjp)


def dense_op(x, w, b) -> DiffNode:
    return add(matmul(x, w), b)


def conv2d_op(x, w, b, stride: int = 1, padding: str = "valid") -> DiffNode:
    """Graph version of tensor.conv2d, composed from differentiable primitives."""
    x, w, b = _node(x), _node(w), _node(b)
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    if padding == "same":
        x = pad2d(x, same_pads(h, wd, k, stride))
    oh = (x.shape[2] - k) // stride + 1
    ow = (x.shape[3] - k) // stride + 1
    cols = im2col(x, k, stride)
    out = add(matmul(cols, transpose(reshape(w, (f, c * k * k)))), b)
    return permute(reshape(out, (n, oh, ow, f)), (0, 3, 1, 2))


def flatten_op(x) -> DiffNode:
    x = _node(x)
    n = x.shape[0]
    return reshape(x, (n, int(np.prod(x.shape[1:]))))


# ---------------------------------------------------------------------------
# backward

class GradientMap:
    """Gradients keyed by leaf identity; every requested leaf appears once."""

    def __init__(self, pairs):
        self._by_id = {}
        for node, grad in pairs:
            if grad.shape != node.shape:
                raise GraphError(
                    f"gradient shape {grad.shape} != leaf shape {node.shape}"
                )
            if id(node) in self._by_id:
                raise GraphError("duplicate leaf in gradient map")
            self._by_id[id(node)] = (node, grad)

    def __getitem__(self, node: DiffNode) -> DiffNode:
        return self._by_id[id(node)][1]

    def __contains__(self, node: DiffNode) -> bool:
        return id(node) in self._by_id

    def __len__(self) -> int:
        return len(self._by_id)

    def items(self):
        return list(self._by_id.values())


def _needed_set(output: DiffNode, wrt_ids: set) -> dict:
    """node id -> does this node lead to any wrt leaf (iterative post-order)."""
    need: dict[int, bool] = {}
    stack = [(output, False)]
    while stack:
        node, processed = stack.pop()
        nid = id(node)
        if processed:
            need[nid] = nid in wrt_ids or any(need[id(p)] for p in node.parents)
            continue
        if nid in need:
            continue
        need[nid] = False  # placeholder until post-visit
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in need:
                stack.append((p, False))
    return need


def backward(output: DiffNode, wrt, create_graph: bool = False) -> GradientMap:
    """Gradients of a scalar output with respect to leaf nodes.

    With create_graph the returned gradients keep their producing graph and
    can be differentiated again; otherwise they are detached constants.
    Leaves the output does not depend on get exact zeros.
    """
    wrt = list(wrt)
    if output.value.size != 1:
        raise GraphError(f"backward needs a scalar output, got shape {output.shape}")
    for w in wrt:
        if w.parents:
            raise GraphError("wrt entries must be leaf nodes")
        if not w.requires_grad:
            raise GraphError("wrt leaf does not require grad")
    wrt_ids = {id(w) for w in wrt}

    need = _needed_set(output, wrt_ids)
    dtype = output.value.dtype

    grads: dict[int, DiffNode] = {}
    results: dict[int, DiffNode] = {}
    if need.get(id(output), False):
        # Walk every node reachable from the output that leads to a wrt leaf,
        # in descending creation order (consumers strictly precede producers).
        by_id: dict[int, DiffNode] = {}
        stack = [output]
        seen = {id(output)}
        while stack:
            node = stack.pop()
            by_id[node._id] = node
            for p in node.parents:
                if need.get(id(p), False) and id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        grads[output._id] = constant(np.ones(output.shape, dtype=dtype))
        for nid in sorted(by_id, reverse=True):
            node = by_id[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if id(node) in wrt_ids:
                results[id(node)] = g
                continue
            if node.vjp is None:
                continue
            pgrads = node.vjp(g)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not need.get(id(parent), False):
                    continue
                held = grads.get(parent._id)
                grads[parent._id] = pg if held is None else add(held, pg)

    pairs = []
    for w in wrt:
        g = results.get(id(w))
        if g is None:
            g = constant(np.zeros(w.shape, dtype=dtype))
        elif not create_graph:
            g = constant(g.value)
        pairs.append((w, g))
    return GradientMap(pairs)


def input_jacobian(model, x, create_graph: bool = False) -> DiffNode:
    """The [c, d] Jacobian of the logits of a single example w.r.t. its pixels.

    Built from c independent backward passes, one per output component; with
    create_graph each row keeps its graph so the result can be differentiated
    w.r.t. the parameters.
    """
    graph = model.build_graph(x, input_requires_grad=True)
    if graph.x.shape[0] != 1:
        raise GraphError("input_jacobian takes a single example")
    logits = graph.logits
    c = logits.shape[1]
    d = int(np.prod(graph.x.shape[1:]))
    rows = []
    for i in range(c):
        onehot = np.zeros((1, c), dtype=logits.value.dtype)
        onehot[0, i] = 1.0
        si = reduce_sum(mul(logits, constant(onehot)))
        gi = backward(si, [graph.x], create_graph=create_graph)[graph.x]
        rows.append(reshape(gi, (1, d)))
    return concat0(rows)
