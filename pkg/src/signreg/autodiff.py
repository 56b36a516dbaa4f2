"""Reverse-mode differentiation over a recorded primitive graph.

A forward pass is recorded on a :class:`Tape` as a list of nodes in
evaluation order. Cotangents can then be seeded at any recorded node and
pulled back either to the input (``vjp`` / ``summed_jacobian``) or to the
parameter leaves (``param_gradients``). Each tape belongs to one forward
call; nothing is global, so independent tapes over shared (immutable)
parameters can run concurrently.

Derivative conventions, chosen for determinism:
  * relu'(0) == 0 exactly;
  * maxpool ties resolve to the first element in row-major window order
    (the lowest flat index of the original array);
  * dropout is recorded with its mask, so train-time gradients are exact.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor


class Node:
    """One recorded primitive application (or a leaf value)."""

    __slots__ = ("op", "value", "parents", "vjp_fn", "idx")

    def __init__(self, op: str, value: Tensor, parents: tuple, vjp_fn, idx: int):
        self.op = op
        self.value = value
        self.parents = parents
        # vjp_fn(cotangent, needed) -> per-parent cotangents; entries whose
        # needed flag is False may be returned as None (their subgraph does
        # not reach any requested leaf, so computing them would be waste)
        self.vjp_fn = vjp_fn
        self.idx = idx

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}, shape={self.shape}, idx={self.idx})"


class Tape:
    """Recorded forward computation: nodes in evaluation order plus bookkeeping.

    ``input`` is the differentiation root for vjp/summed_jacobian;
    ``params`` maps parameter names to their leaf nodes; ``taps`` maps
    tap names to interior nodes of interest (e.g. "pre-logits").
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.input: Node | None = None
        self.output: Node | None = None
        self.params: dict[str, Node] = {}
        self.taps: dict[str, Node] = {}

    # -- construction -----------------------------------------------------

    def _record(self, op: str, value, parents: tuple = (), vjp_fn=None) -> Node:
        if not isinstance(value, Tensor):
            value = Tensor._wrap(value)
        node = Node(op, value, parents, vjp_fn, len(self.nodes))
        self.nodes.append(node)
        return node

    def leaf_input(self, t: Tensor) -> Node:
        node = self._record("input", t)
        self.input = node
        return node

    def leaf_param(self, name: str, t: Tensor) -> Node:
        node = self._record("param", t)
        self.params[name] = node
        return node

    def leaf_const(self, t: Tensor) -> Node:
        return self._record("const", t)

    def owns(self, node: Node) -> bool:
        return 0 <= node.idx < len(self.nodes) and self.nodes[node.idx] is node

    def _require(self, node: Node):
        if not self.owns(node):
            raise ValueError("node is not on this tape")

    # -- primitives ---------------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
        return self._record("add", a.value.data + b.value.data, (a, b),
                            lambda g, needed: (g, g))

    def sub(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
        return self._record("sub", a.value.data - b.value.data, (a, b),
                            lambda g, needed: (g, -g))

    def mul(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
        ad, bd = a.value.data, b.value.data
        return self._record("mul", ad * bd, (a, b),
                            lambda g, needed: (g * bd, g * ad))

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        ad, bd = a.value.data, b.value.data

        def vjp(g, needed):
            return (g @ bd.T if needed[0] else None,
                    ad.T @ g if needed[1] else None)

        return self._record("matmul", ad @ bd, (a, b), vjp)

    def bias_add(self, x: Node, b: Node) -> Node:
        """Add a per-feature bias over the leading batch axis.

        (B, M) + (M,) or (B, C, H, W) + (C,). The only broadcasting the
        engine supports.
        """
        xd, bd = x.value.data, b.value.data
        if xd.ndim == 2 and bd.shape == (xd.shape[1],):
            return self._record("bias-add", xd + bd, (x, b),
                                lambda g, needed: (g, g.sum(axis=0) if needed[1] else None))
        if xd.ndim == 4 and bd.shape == (xd.shape[1],):
            return self._record("bias-add", xd + bd[None, :, None, None], (x, b),
                                lambda g, needed: (g, g.sum(axis=(0, 2, 3)) if needed[1] else None))
        raise ShapeError(f"bias_add: incompatible shapes {x.shape} + {b.shape}")

    def relu(self, x: Node) -> Node:
        xd = x.value.data
        return self._record("relu", np.maximum(xd, 0.0), (x,),
                            lambda g, needed: (g * (xd > 0.0),))

    def softplus(self, x: Node) -> Node:
        xd = x.value.data
        out = np.logaddexp(0.0, xd)

        def vjp(g, needed):
            return (g / (1.0 + np.exp(-xd)),)

        return self._record("softplus", out, (x,), vjp)

    def reshape(self, x: Node, shape) -> Node:
        shape = tuple(int(s) for s in shape)
        in_shape = x.shape
        return self._record("reshape", x.value.data.reshape(shape), (x,),
                            lambda g, needed: (g.reshape(in_shape),))

    def dropout(self, x: Node, mask: np.ndarray) -> Node:
        """Multiply by a fixed 0/(1/keep) mask drawn by the caller."""
        if mask.shape != x.shape:
            raise ShapeError(f"dropout: mask shape {mask.shape} != {x.shape}")
        return self._record("dropout", x.value.data * mask, (x,),
                            lambda g, needed: (g * mask,))

    def maxpool2(self, x: Node) -> Node:
        """2x2 max pooling, stride 2. Spatial dims must be even."""
        xd = x.value.data
        if xd.ndim != 4:
            raise ShapeError(f"maxpool2 expects (B, C, H, W), got {x.shape}")
        b, c, h, w = xd.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
        h2, w2 = h // 2, w // 2
        win = xd.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
        arg = win.argmax(axis=-1)  # first max wins: lowest flat index
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

        def vjp(g, needed):
            gw = np.zeros((b, c, h2, w2, 4))
            np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
            return (gw.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w),)

        return self._record("maxpool", out, (x,), vjp)

    def conv2d(self, x: Node, w: Node) -> Node:
        """2D convolution, stride 1, 'same' zero padding, odd square kernel."""
        xd, wd = x.value.data, w.value.data
        if xd.ndim != 4 or wd.ndim != 4:
            raise ShapeError(f"conv2d expects (B,C,H,W) and (O,C,k,k), got {x.shape}, {w.shape}")
        b, c, h, wdt = xd.shape
        oc, ic, kh, kw = wd.shape
        if ic != c or kh != kw or kh % 2 == 0:
            raise ShapeError(f"conv2d: kernel {w.shape} incompatible with input {x.shape}")
        k, p = kh, kh // 2
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)))
        # im2col: (B, H*W, C*k*k)
        cols = (sliding_window_view(xp, (k, k), axis=(2, 3))
                .transpose(0, 2, 3, 1, 4, 5).reshape(b, h * wdt, c * k * k))
        wmat = wd.reshape(oc, c * k * k)
        out = (cols @ wmat.T).transpose(0, 2, 1).reshape(b, oc, h, wdt)

        def vjp(g, needed):
            g2 = g.reshape(b, oc, h * wdt).transpose(0, 2, 1)  # (B, H*W, OC)
            dx_ = None
            if needed[0]:
                dcols = (g2 @ wmat).reshape(b, h, wdt, c, k, k)
                dxp = np.zeros_like(xp)
                for dy in range(k):
                    for dx in range(k):
                        dxp[:, :, dy:dy + h, dx:dx + wdt] += dcols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
                dx_ = dxp[:, :, p:p + h, p:p + wdt]
            dw = None
            if needed[1]:
                dw = (g2.reshape(-1, oc).T @ cols.reshape(-1, c * k * k)).reshape(oc, c, k, k)
            return (dx_, dw)

        return self._record("conv2d", out, (x, w), vjp)

    def sum(self, x: Node) -> Node:
        """Total sum, producing a scalar-shaped (1,) node."""
        xd = x.value.data
        return self._record("sum", np.array([xd.sum()]), (x,),
                            lambda g, needed: (np.full(xd.shape, g[0]),))

    def mean(self, x: Node) -> Node:
        xd = x.value.data
        n = xd.size
        return self._record("mean", np.array([xd.mean()]), (x,),
                            lambda g, needed: (np.full(xd.shape, g[0] / n),))

    def cross_entropy(self, logits: Node, labels: np.ndarray) -> Node:
        """Mean soft-label cross-entropy over the batch, log-sum-exp shifted.

        ``labels`` is a fixed (B, C) matrix of probabilities (rows sum to 1);
        it is not differentiated through.
        """
        z = logits.value.data
        if z.ndim != 2 or labels.shape != z.shape:
            raise ShapeError(f"cross_entropy: logits {z.shape} vs labels {labels.shape}")
        bsz = z.shape[0]
        shifted = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + z.max(axis=1, keepdims=True)
        value = -(labels * (z - lse)).sum(axis=1).mean()
        probs = np.exp(z - lse)

        def vjp(g, needed):
            return (g[0] * (probs - labels) / bsz,)

        return self._record("cross-entropy", np.array([value]), (logits,), vjp)

    def aleatoric_nll(self, f: Node, sigma: Node, labels: np.ndarray, eps: np.ndarray) -> Node:
        """Negative Monte-Carlo categorical log-likelihood under logit noise.

        Per sample i, with draws eps[t] ~ N(0, I) fixed by the caller:
            x_hat[t] = f[i] + sigma[i] * eps[t]
            L_i = log (1/T) sum_t exp(x_hat[t, c] - logsumexp_c' x_hat[t, c'])
        and the node value is -mean_i sum_c labels[i, c] * L_i(c). For one-hot
        labels this is the standard formulation; soft labels weight the
        per-class log-likelihoods (used when mixup feeds this loss).

        The likelihood itself increases with fit, so the recorded value is
        its negation: a quantity to minimize.
        """
        fd, sd = f.value.data, sigma.value.data
        if fd.ndim != 2 or sd.shape != fd.shape:
            raise ShapeError(f"aleatoric_nll: f {fd.shape} vs sigma {sd.shape}")
        if labels.shape != fd.shape:
            raise ShapeError(f"aleatoric_nll: labels {labels.shape} vs f {fd.shape}")
        t_draws, bsz, ncls = eps.shape
        if (bsz, ncls) != fd.shape:
            raise ShapeError(f"aleatoric_nll: eps {eps.shape} vs f {fd.shape}")
        if np.any(sd <= 0.0):
            raise ValueError("aleatoric_nll: sigma must be strictly positive")

        xhat = fd[None, :, :] + sd[None, :, :] * eps  # (T, B, C)
        xmax = xhat.max(axis=2, keepdims=True)
        lse = np.log(np.exp(xhat - xmax).sum(axis=2, keepdims=True)) + xmax
        logp = xhat - lse  # (T, B, C): per-draw log-softmax
        # L[i, c] = logmeanexp_t logp[t, i, c], computed stably.
        m = logp.max(axis=0)
        ll = m + np.log(np.exp(logp - m).mean(axis=0))  # (B, C)
        value = -(labels * ll).sum(axis=1).mean()

        softmax = np.exp(logp)  # (T, B, C)
        # weight of draw t in the per-(i, c) log-mean-exp
        wt = np.exp(logp - ll[None, :, :])
        wt /= t_draws

        def vjp(g, needed):
            # dL/dxhat[t,i,c'] summed over target classes c weighted by labels
            # d ll[i,c] / d xhat[t,i,c'] = wt[t,i,c] * (1[c=c'] - softmax[t,i,c'])
            lw = labels[None, :, :] * wt  # (T, B, C) weight per target class
            dxhat = lw - lw.sum(axis=2, keepdims=True) * softmax
            dxhat *= -g[0] / bsz
            df = dxhat.sum(axis=0)
            dsigma = (dxhat * eps).sum(axis=0)
            return (df, dsigma)

        return self._record("aleatoric-nll", np.array([value]), (f, sigma), vjp)


# -- differentiation -------------------------------------------------------


def forward(fn, x: Tensor) -> tuple[Tensor, Tape]:
    """Record ``fn`` applied to ``x``. ``fn(tape, input_node) -> output_node``."""
    tape = Tape()
    node = tape.leaf_input(x)
    out = fn(tape, node)
    tape.output = out
    return out.value, tape


def _reach(tape: Tape, upto: int, targets: set[int]) -> np.ndarray:
    """needed[i]: node i's cotangent can flow into some target leaf."""
    needed = np.zeros(upto + 1, dtype=bool)
    for i in range(upto + 1):
        n = tape.nodes[i]
        if i in targets:
            needed[i] = True
        elif n.parents:
            needed[i] = any(needed[p.idx] for p in n.parents)
    return needed


def _pullback(tape: Tape, node: Node, cotangent: np.ndarray, targets: set[int]) -> list:
    """Reverse accumulation from ``node`` into the target leaves.

    Fixed reverse-index order makes the accumulation deterministic;
    cotangents are only materialized along paths that reach a target.
    """
    needed = _reach(tape, node.idx, targets)
    grads: list = [None] * (node.idx + 1)
    grads[node.idx] = cotangent
    for i in range(node.idx, -1, -1):
        g = grads[i]
        if g is None or not needed[i]:
            continue
        n = tape.nodes[i]
        if n.vjp_fn is None:
            continue
        flags = tuple(bool(needed[p.idx]) for p in n.parents)
        for parent, pg in zip(n.parents, n.vjp_fn(g, flags)):
            if pg is None:
                continue
            if grads[parent.idx] is None:
                grads[parent.idx] = pg
            else:
                grads[parent.idx] = grads[parent.idx] + pg
    return grads


def vjp(tape: Tape, node: Node, cotangent: Tensor) -> Tensor:
    """Pull a cotangent at ``node`` back to the tape's input.

    Returns d(cotangent . node)/d input, with the input's shape. Linear in
    the cotangent.
    """
    tape._require(node)
    if tape.input is None:
        raise ValueError("tape has no input leaf")
    if cotangent.shape != node.shape:
        raise ShapeError(f"cotangent shape {cotangent.shape} != node shape {node.shape}")
    if tape.input.idx > node.idx:
        return Tensor._wrap(np.zeros(tape.input.shape))
    grads = _pullback(tape, node, cotangent.data, {tape.input.idx})
    g = grads[tape.input.idx]
    if g is None:
        return Tensor._wrap(np.zeros(tape.input.shape))
    return Tensor._wrap(g)


def summed_jacobian(tape: Tape, node: Node) -> Tensor:
    """Row-sum of the Jacobian of ``node`` w.r.t. the input.

    Element i is sum_a d node_a / d input_i: a vjp with an all-ones
    cotangent, and computed exactly that way (one backward pass instead of
    one per output row).
    """
    tape._require(node)
    return vjp(tape, node, Tensor._wrap(np.ones(node.shape)))


def param_gradients(tape: Tape, loss_node: Node) -> dict[str, Tensor]:
    """Gradient of a scalar loss node for every parameter leaf on the tape."""
    tape._require(loss_node)
    if loss_node.value.size != 1:
        raise ShapeError(f"loss node must be scalar-shaped, got {loss_node.shape}")
    targets = {p.idx for p in tape.params.values() if p.idx <= loss_node.idx}
    grads = _pullback(tape, loss_node, np.ones(loss_node.shape), targets)
    out: dict[str, Tensor] = {}
    for name, pnode in tape.params.items():
        g = grads[pnode.idx] if pnode.idx <= loss_node.idx else None
        if g is None:
            out[name] = Tensor._wrap(np.zeros(pnode.shape))
        else:
            out[name] = Tensor._wrap(g)
    return out
