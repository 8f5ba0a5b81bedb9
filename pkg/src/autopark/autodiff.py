"""Dense float64 tensors with reverse-mode differentiation.

Every op builds a node holding its parents and a closure that maps the output
gradient to parent gradients. ``Tensor.backward`` walks the graph once in
reverse topological order and releases it afterwards.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64
NEG_INF = -np.inf


class GradientError(ValueError):
    """Raised for malformed differentiation requests."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- differentiation ------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        if grad is None:
            if self.data.size != 1:
                raise GradientError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def _topological_order(root):
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# -- elementwise --------------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _result(ad / bd, (a, b), backward)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def square(x):
    x = as_tensor(x)
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x):
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def cos(x):
    x = as_tensor(x)
    xd = x.data
    return _result(np.cos(xd), (x,), lambda g: (-g * np.sin(xd),))


def sin(x):
    x = as_tensor(x)
    xd = x.data
    return _result(np.sin(xd), (x,), lambda g: (g * np.cos(xd),))


# -- reductions and shape ops -------------------------------------------------
def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a1, a2):
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def getitem(x, index):
    x = as_tensor(x)
    shape = x.shape

    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), backward)


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def take_rows(table, ids):
    """Row gather ``table[ids]`` (embedding lookup) with scatter-add gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return _result(table.data[ids], (table,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def broadcast_to(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _result(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, old),))


def where(cond, a, b):
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)

    return _result(np.where(cond, a.data, b.data), (a, b), backward)


# -- linear algebra -----------------------------------------------------------
def matmul(a, b):
    """Matrix product; leading axes batch (numpy ``matmul`` semantics)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), backward)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis, flattening leading axes for BLAS."""
    x = as_tensor(x)
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (wd.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(x.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


# -- normalisation / probabilities -------------------------------------------
def softmax(x, axis=-1):
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward)


def cross_entropy(logits, targets, weights=None):
    """Mean negative log-likelihood of integer ``targets`` under ``logits`` (N x V).

    ``weights`` optionally masks rows (0/1); the mean then runs over weighted rows.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects N x V logits, got {logits.shape}")
    n, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise ValueError(f"{n} logit rows but {targets.shape[0]} targets")
    if np.any(targets < 0) or np.any(targets >= v):
        bad = targets[(targets < 0) | (targets >= v)][0]
        raise ValueError(f"target index {bad} outside vocabulary of size {v}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=DTYPE).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy with zero total weight")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = lse - z[rows, targets]
    loss = float((w * nll).sum() / total)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (g * p * (w / total)[:, None],)

    return _result(np.array(loss), (logits,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    d = xd.shape[-1]

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        return gx, (flat * xhat.reshape(-1, d)).sum(axis=0), flat.sum(axis=0)

    return _result(out, (x, gain, bias), backward)


def attention(q, k, v, mask=None):
    """Scaled dot-product attention over the last two axes.

    ``q``: (..., Tq, d), ``k``/``v``: (..., Tk, d). ``mask`` is a boolean array
    broadcastable to (..., Tq, Tk) where True keeps a key. Rows whose keys are all
    masked produce zero output. Returns ``(output, weights)``; weights are plain
    arrays for inspection.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    scale = 1.0 / np.sqrt(q.shape[-1])
    p = q.data @ np.swapaxes(k.data, -1, -2)
    p *= scale
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), p.shape)
        p[~mask] = NEG_INF
        smax = np.max(p, axis=-1, keepdims=True)
        smax[~np.isfinite(smax)] = 0.0
    else:
        smax = np.max(p, axis=-1, keepdims=True)
    p -= smax
    np.exp(p, out=p)
    denom = p.sum(axis=-1, keepdims=True)
    denom[denom == 0] = 1.0
    p /= denom
    vd, qd, kd = v.data, q.data, k.data
    out = p @ vd

    def backward(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gs = g @ np.swapaxes(vd, -1, -2)
        row = (gs * p).sum(axis=-1, keepdims=True)
        gs -= row
        gs *= p
        gs *= scale
        gq = gs @ kd
        gk = np.swapaxes(gs, -1, -2) @ qd
        return (_unbroadcast(gq, qd.shape), _unbroadcast(gk, kd.shape), _unbroadcast(gv, vd.shape))

    return _result(out, (q, k, v), backward), p


def conv2d(x, weight, bias, stride=1, padding=0):
    """2-D convolution, channels-last.

    ``x``: (B, H, W, Cin); ``weight``: (kh, kw, Cin, Cout); ``bias``: (Cout,).
    """
    x = as_tensor(x)
    kh, kw, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d expects {cin} input channels, got {x.shape[-1]}")
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    b, hp, wp, _ = xd.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]  # (B, ho, wo, Cin, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * ho * wo, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat + bias.data).reshape(b, ho, wo, cout)
    in_shape = x.shape

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat.T).reshape(b, ho, wo, kh, kw, cin)
        gpad = np.zeros((b, hp, wp, cin), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                gpad[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, i, j]
        if padding:
            gpad = gpad[:, padding:padding + in_shape[1], padding:padding + in_shape[2]]
        return gpad, gw, gb

    return _result(out, (x, weight, bias), backward)


def weighted_scatter(feats, probs, index, n_out):
    """Lift-and-pool primitive: ``out[t] = sum_{(p,k): index[p,k]=t} probs[p,k] * feats[p]``.

    ``feats``: (B, P, C); ``probs``: (B, P, K); ``index``: (P, K) integer cell ids with
    -1 marking dropped contributions. Returns (B, n_out, C). The gather matrix is
    formed densely (n_out x P) per batch element, which keeps both passes on BLAS.
    """
    feats, probs = as_tensor(feats), as_tensor(probs)
    index = np.asarray(index, dtype=np.int64)
    bsz, npix, kbins = probs.shape
    keep = index >= 0
    flat_cell = index[keep]
    flat_pix = np.broadcast_to(np.arange(npix)[:, None], index.shape)[keep]
    lin = flat_cell * npix + flat_pix
    amat = np.empty((bsz, n_out, npix), dtype=DTYPE)
    pd = probs.data
    for bi in range(bsz):
        amat[bi] = np.bincount(lin, weights=pd[bi][keep], minlength=n_out * npix).reshape(n_out, npix)
    fd = feats.data
    out = amat @ fd

    def backward(g):
        gf = np.swapaxes(amat, 1, 2) @ g
        gamat = g @ np.swapaxes(fd, 1, 2)  # (B, n_out, P)
        gp = np.zeros_like(pd)
        for bi in range(bsz):
            gp[bi][keep] = gamat[bi].reshape(-1)[lin]
        return gf, gp

    return _result(out, (feats, probs), backward)


def sparse_scatter(feats, probs, index, n_out):
    """Same contract as :func:`weighted_scatter`, accumulated entry by entry.

    Suited to large ``n_out`` (the full BEV grid) where the dense gather matrix
    would not fit in memory.
    """
    feats, probs = as_tensor(feats), as_tensor(probs)
    index = np.asarray(index, dtype=np.int64)
    bsz, npix, kbins = probs.shape
    keep = index >= 0
    cell = index[keep]
    pix = np.broadcast_to(np.arange(npix)[:, None], index.shape)[keep]
    fd, pd = feats.data, probs.data
    out = np.zeros((bsz, n_out, fd.shape[-1]), dtype=DTYPE)
    for bi in range(bsz):
        np.add.at(out[bi], cell, pd[bi][keep][:, None] * fd[bi][pix])

    def backward(g):
        gf = np.zeros_like(fd)
        gp = np.zeros_like(pd)
        for bi in range(bsz):
            gc = g[bi][cell]
            np.add.at(gf[bi], pix, pd[bi][keep][:, None] * gc)
            gp[bi][keep] = np.einsum("mc,mc->m", gc, fd[bi][pix])
        return gf, gp

    return _result(out, (feats, probs), backward)


def mse_masked(pred, target, mask):
    """Mean squared error over entries whose leading-axis ``mask`` is set.

    ``pred``/``target``: (B, N, ...); ``mask``: (B, N). Returns 0 when nothing is
    present.
    """
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    m = np.asarray(mask, dtype=DTYPE)
    per = int(np.prod(pred.shape[m.ndim:]))
    count = m.sum() * per
    if count == 0:
        return Tensor(0.0)
    mexp = m.reshape(m.shape + (1,) * (pred.ndim - m.ndim))
    diff = (pred.data - target) * mexp
    loss = float((diff * diff).sum() / count)
    return _result(np.array(loss), (pred,), lambda g: (g * 2.0 * diff / count,))


# -- verification -------------------------------------------------------------
def gradients(loss, leaves):
    """Run ``loss.backward()`` and return one gradient array per leaf.

    Leaves the loss does not depend on get zeros of their own shape.
    """
    for leaf in leaves:
        leaf.grad = None
    loss.backward()
    return [np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad for leaf in leaves]


def finite_diff_check(f, params, step=1e-5, max_coords=None, rng=None):
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    ``params`` is a list of leaf tensors with ``requires_grad``. Returns the max over
    checked coordinates of ``|analytic - numeric| / max(1, |analytic|)``. When
    ``max_coords`` is set and the parameter count exceeds it, that many coordinates
    are sampled uniformly (seeded by ``rng``).
    """
    for p in params:
        p.grad = None
    loss = f()
    value = np.asarray(loss.data)
    if value.size != 1:
        raise GradientError(f"finite_diff_check needs a scalar function, got shape {value.shape}")
    if not np.isfinite(value):
        raise FloatingPointError("function value is not finite")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = [p.data.size for p in params]
    total = int(sum(sizes))
    if max_coords is not None and total > max_coords:
        rng = np.random.default_rng(0) if rng is None else rng
        picks = np.sort(rng.choice(total, size=max_coords, replace=False))
    else:
        picks = np.arange(total)
    offsets = np.cumsum([0] + sizes)

    worst = 0.0
    for flat in picks:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        local = int(flat - offsets[which])
        arr = params[which].data.reshape(-1)
        orig = arr[local]
        arr[local] = orig + step
        fp = float(f().data)
        arr[local] = orig - step
        fm = float(f().data)
        arr[local] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("function value is not finite under perturbation")
        numeric = (fp - fm) / (2.0 * step)
        a = analytic[which].reshape(-1)[local]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
