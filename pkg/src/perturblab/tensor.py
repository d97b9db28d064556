"""Reverse-mode automatic differentiation over dense float64 arrays.

Covers exactly the operations a small convolutional classifier needs:
3x3 same-padded convolution, ReLU, 2x2 max pooling, dense layers, softmax
cross-entropy, and the elementwise arithmetic tests use to build toy
objectives. Values are computed eagerly at node construction; ``backward``
walks the recorded graph once in reverse topological order and accumulates
the gradient of a scalar root into every node, including data inputs.

Graphs are throwaway: build, run backward, read ``.grad``, discard. Nodes
are never mutated after construction, so independent graphs can run on
separate threads.
"""

from __future__ import annotations

import numpy as np


class Node:
    """One vertex of the computation graph.

    value     eagerly computed float64 array (the cached output)
    grad      gradient of the backward root, same shape as ``value``
    parents   input nodes this value was computed from
    """

    __slots__ = ("value", "grad", "parents", "_backward")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        kind = "leaf" if not self.parents else "op"
        return f"Node({kind}, shape={self.value.shape})"


def leaf(value) -> Node:
    """Wrap an array as a graph input (parameter or data)."""
    return Node(value)


def _unbroadcast(grad, shape):
    """Sum out the axes numpy broadcasting added or stretched."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a: Node, b: Node) -> Node:
    out = Node(a.value + b.value, (a, b))

    def bwd():
        a.grad += _unbroadcast(out.grad, a.value.shape)
        b.grad += _unbroadcast(out.grad, b.value.shape)

    out._backward = bwd
    return out


def sub(a: Node, b: Node) -> Node:
    out = Node(a.value - b.value, (a, b))

    def bwd():
        a.grad += _unbroadcast(out.grad, a.value.shape)
        b.grad -= _unbroadcast(out.grad, b.value.shape)

    out._backward = bwd
    return out


def mul(a: Node, b: Node) -> Node:
    out = Node(a.value * b.value, (a, b))

    def bwd():
        a.grad += _unbroadcast(out.grad * b.value, a.value.shape)
        b.grad += _unbroadcast(out.grad * a.value, b.value.shape)

    out._backward = bwd
    return out


def matmul(a: Node, b: Node) -> Node:
    """2-D matrix product (N,D) @ (D,M)."""
    out = Node(a.value @ b.value, (a, b))

    def bwd():
        a.grad += out.grad @ b.value.T
        b.grad += a.value.T @ out.grad

    out._backward = bwd
    return out


def relu(x: Node) -> Node:
    out = Node(np.maximum(x.value, 0.0), (x,))

    def bwd():
        x.grad += out.grad * (x.value > 0.0)

    out._backward = bwd
    return out


def conv2d(x: Node, w: Node, b: Node) -> Node:
    """Same-padded stride-1 convolution, channels last.

    x: (N, H, W, Cin); w: (kh, kw, Cin, F) with odd kh, kw; b: (F,).
    """
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim != 4:
        raise ValueError(f"conv2d input must be (N,H,W,C), got {xv.shape}")
    kh, kw, cin, f = wv.shape
    n, h, wd, cx = xv.shape
    if cx != cin:
        raise ValueError(f"conv2d channel mismatch: input {cx}, kernel {cin}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xv, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    # one flat GEMM per kernel offset beats an explicit im2col buffer here
    acc = np.broadcast_to(bv, (n * h * wd, f)).copy()
    for dy in range(kh):
        for dx in range(kw):
            patch = np.ascontiguousarray(xp[:, dy:dy + h, dx:dx + wd, :])
            acc += patch.reshape(-1, cin) @ wv[dy, dx]
    out = Node(acc.reshape(n, h, wd, f), (x, w, b))

    def bwd():
        g = out.grad
        g2 = np.ascontiguousarray(g).reshape(-1, f)
        b.grad += g2.sum(axis=0)
        dxp = np.zeros_like(xp)
        for dy in range(kh):
            for dx in range(kw):
                patch = np.ascontiguousarray(xp[:, dy:dy + h, dx:dx + wd, :])
                w.grad[dy, dx] += patch.reshape(-1, cin).T @ g2
                dxp[:, dy:dy + h, dx:dx + wd, :] += (g2 @ wv[dy, dx].T).reshape(n, h, wd, cin)
        x.grad += dxp[:, ph:ph + h, pw:pw + wd, :]

    out._backward = bwd
    return out


def maxpool2(x: Node) -> Node:
    """2x2 max pooling with stride 2; trailing odd rows/columns are dropped."""
    xv = x.value
    n, h, w, c = xv.shape
    h2, w2 = h // 2, w // 2
    win = xv[:, :h2 * 2, :w2 * 2, :].reshape(n, h2, 2, w2, 2, c)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    idx = win.argmax(axis=-1)
    out = Node(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], (x,))

    def bwd():
        gwin = np.zeros((n, h2, w2, c, 4))
        np.put_along_axis(gwin, idx[..., None], out.grad[..., None], axis=-1)
        gwin = gwin.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        gx = np.zeros_like(xv)
        gx[:, :h2 * 2, :w2 * 2, :] = gwin.reshape(n, h2 * 2, w2 * 2, c)
        x.grad += gx

    out._backward = bwd
    return out


def flatten(x: Node) -> Node:
    """Collapse all but the leading batch axis."""
    xv = x.value
    out = Node(xv.reshape(xv.shape[0], -1), (x,))

    def bwd():
        x.grad += out.grad.reshape(xv.shape)

    out._backward = bwd
    return out


def sum_all(x: Node) -> Node:
    out = Node(x.value.sum(), (x,))

    def bwd():
        x.grad += out.grad * np.ones_like(x.value)

    out._backward = bwd
    return out


def softmax_xent(logits: Node, labels) -> Node:
    """Mean softmax cross-entropy against integer class labels.

    Numerically stabilized by the row-max shift; the fused backward is the
    classic ``(softmax - onehot) / N``.
    """
    lv = logits.value
    if lv.ndim != 2:
        raise ValueError(f"softmax_xent expects (N, classes) logits, got {lv.shape}")
    y = np.asarray(labels)
    n, classes = lv.shape
    if y.shape != (n,):
        raise ValueError(f"labels shape {y.shape} does not match batch size {n}")
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise ValueError(f"label out of range [0, {classes})")
    shifted = lv - lv.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    loss = np.mean(logsum - shifted[np.arange(n), y])
    out = Node(loss, (logits,))

    def bwd():
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), y] -= 1.0
        logits.grad += out.grad * p / n

    out._backward = bwd
    return out


def backward(root: Node) -> None:
    """Populate ``.grad`` on every node reachable from a scalar root.

    Gradients are reset first, so calling backward twice on the same graph
    is idempotent. Each node's backward hook runs exactly once, in reverse
    topological order.
    """
    if root.value.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.value.shape}")
    order = _topo_order(root)
    for node in order:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()


def _topo_order(root: Node):
    """Iterative post-order DFS: parents precede children in the result."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order
