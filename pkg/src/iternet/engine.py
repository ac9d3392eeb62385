"""Reverse-mode autodiff over dense NCHW tensors.

Values are plain numpy arrays (float32 in production, float64 allowed so
numerical checks can run at higher precision).  Every differentiable op
appends one node to a Tape; backward() walks the node list in reverse.
The raw forward kernels are exposed as module functions (conv2d_forward
etc.) so a no-tape inference path computes bit-identical outputs.
"""

from __future__ import annotations

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


def _as_float(value):
    a = np.asarray(value)
    if a.dtype not in _FLOAT_DTYPES:
        a = a.astype(np.float32)
    return a


class Var:
    """Handle for one value living on a tape."""

    __slots__ = ("tape", "vid", "value")

    def __init__(self, tape, vid, value):
        self.tape = tape
        self.vid = vid
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(id={self.vid}, shape={self.value.shape})"


class TapeNode:
    """One recorded op: kind, input/output var ids, attrs, saved-for-backward."""

    __slots__ = ("op", "input_ids", "output_id", "attrs", "saved")

    def __init__(self, op, input_ids, output_id, attrs, saved):
        self.op = op
        self.input_ids = input_ids
        self.output_id = output_id
        self.attrs = attrs
        self.saved = saved


class Tape:
    """Topologically ordered op recording.

    Nodes are appended at creation time, so every node's inputs were
    created earlier; backward is a single reverse sweep.  Parameters
    bound from a ParamStore are cached per (store, name) so a shared
    weight is one var used at many sites and its gradient contributions
    sum naturally.
    """

    def __init__(self):
        self.nodes = []
        self._vars = {}
        self._params = {}  # (id(store), name) -> Var
        self._param_refs = []  # (store, name, Var)
        self._next_id = 0

    def _new_var(self, value):
        v = Var(self, self._next_id, value)
        self._vars[self._next_id] = v
        self._next_id += 1
        return v

    def leaf(self, value):
        """Wrap a raw array as an input (no grad tracked unless asked for)."""
        return self._new_var(_as_float(value))

    def param(self, store, name):
        """Bind a ParamStore entry; repeated binds return the same var."""
        key = (id(store), name)
        v = self._params.get(key)
        if v is None:
            v = self._new_var(store.value(name))
            self._params[key] = v
            self._param_refs.append((store, name, v))
        return v

    def record(self, op, inputs, out_value, attrs=None, saved=None):
        out = self._new_var(out_value)
        self.nodes.append(TapeNode(op, tuple(x.vid for x in inputs), out.vid,
                                   attrs or {}, saved or {}))
        return out

    def owns(self, var):
        return var.tape is self and self._vars.get(var.vid) is var

    def replay(self):
        """Recompute every node output from the leaves; returns {vid: value}.

        Uses the same forward kernels as the original execution, so the
        recomputed values are bit-identical to the recorded ones.
        """
        values = {vid: v.value for vid, v in self._vars.items()
                  if not any(n.output_id == vid for n in self.nodes)}
        for node in self.nodes:
            ins = [values[i] if i in values else self._vars[i].value
                   for i in node.input_ids]
            values[node.output_id] = _REPLAY[node.op](ins, node.attrs)
        return values


# ---------------------------------------------------------------------------
# forward kernels (pure numpy, shared by tape ops and the inference path)

def _check_nchw(x, who):
    if x.ndim != 4:
        raise ValueError(f"{who} expects a [N,C,H,W] tensor, got shape {x.shape}")


def _pad_for(x, kh, kw, padding):
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"same padding needs odd kernel dims, got {kh}x{kw}")
        ph, pw = kh // 2, kw // 2
        if ph or pw:
            x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        return x
    if padding == "valid":
        return x
    raise ValueError(f"unknown padding mode {padding!r}")


def _im2col(x, kh, kw):
    # x already padded; -> [N, C*kh*kw, Ho*Wo]
    n, c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(dcols, n, c, hp, wp, kh, kw, ho, wo):
    dx = np.zeros((n, c, hp, wp), dtype=dcols.dtype)
    d6 = dcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + ho, j:j + wo] += d6[:, :, i, j]
    return dx


def conv2d_forward(x, w, b, padding="same", want_cols=False):
    """Cross-correlation plus per-output-channel bias.

    x: [N,C,H,W], w: [O,C,kH,kW], b: [O].  padding 'same' keeps H,W
    (odd kernels only, zero fill); 'valid' shrinks to H-kH+1 x W-kW+1.
    """
    _check_nchw(x, "conv2d input")
    if w.ndim != 4:
        raise ValueError(f"conv2d kernel expects [O,C,kH,kW], got shape {w.shape}")
    o, c, kh, kw = w.shape
    if x.shape[1] != c:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} has C={x.shape[1]}, "
            f"kernel {w.shape} expects C={c}")
    if b.shape != (o,):
        raise ValueError(f"conv2d bias shape {b.shape} does not match O={o}")
    xp = _pad_for(x, kh, kw, padding)
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ValueError(
            f"conv2d input {x.shape} smaller than kernel {w.shape} under "
            f"{padding} padding")
    cols, ho, wo = _im2col(xp, kh, kw)
    out = np.matmul(w.reshape(o, -1), cols) + b[:, None]
    out = out.reshape(x.shape[0], o, ho, wo)
    if want_cols:
        return out, cols, xp.shape
    return out


def conv2d_backward(g, cols, xp_shape, x_shape, w, padding):
    o, c, kh, kw = w.shape
    n = x_shape[0]
    ho, wo = g.shape[2], g.shape[3]
    gm = g.reshape(n, o, ho * wo)
    db = g.sum(axis=(0, 2, 3))
    dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    dcols = np.matmul(w.reshape(o, -1).T, gm)
    dxp = _col2im(dcols, n, c, xp_shape[2], xp_shape[3], kh, kw, ho, wo)
    if padding == "same":
        ph, pw = kh // 2, kw // 2
        if ph or pw:
            dxp = dxp[:, :, ph:xp_shape[2] - ph, pw:xp_shape[3] - pw]
    return dxp, dw, db


def max_pool_2x2_forward(x, want_argmax=False):
    """2x2 max pooling, stride 2.  H and W must be even."""
    _check_nchw(x, "max_pool_2x2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool_2x2 needs even H,W, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    # argmax is the first maximal entry in window scan order, which fixes
    # the tie rule for the backward scatter
    idx = win.argmax(axis=4)
    out = np.take_along_axis(win, idx[..., None], axis=4)[..., 0]
    if want_argmax:
        return out, idx
    return out


def max_pool_2x2_backward(g, idx, x_shape):
    n, c, h, w = x_shape
    dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
    np.put_along_axis(dwin, idx[..., None], g[..., None], axis=4)
    dwin = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dwin.reshape(n, c, h, w)


def upsample2x_forward(x):
    """Nearest-neighbour 2x upsampling (each pixel becomes a 2x2 block)."""
    _check_nchw(x, "upsample2x input")
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2x_backward(g):
    n, c, h, w = g.shape
    return g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def sigmoid_forward(x):
    # evaluates exp only on the stable side of 0
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce_with_logits(z, y, mask=None):
    """Mean sigmoid cross-entropy over unmasked pixels, fused stable form.

    The reduction runs in float64 regardless of input dtype so the scalar
    loss is accurate enough for logging and finite-difference checks.
    """
    if z.shape != y.shape:
        raise ValueError(f"logits shape {z.shape} != labels shape {y.shape}")
    bad = (y != 0) & (y != 1)
    if bad.any():
        raise ValueError("labels must be 0 or 1")
    z64 = z.astype(np.float64, copy=False)
    y64 = y.astype(np.float64, copy=False)
    per = np.maximum(z64, 0) - z64 * y64 + np.log1p(np.exp(-np.abs(z64)))
    if mask is None:
        count = per.size
        total = per.sum()
    else:
        if mask.shape != z.shape:
            raise ValueError(f"mask shape {mask.shape} != logits shape {z.shape}")
        count = np.count_nonzero(mask)
        if count == 0:
            raise ValueError("sigmoid_cross_entropy: mask selects zero pixels")
        total = (per * (mask != 0)).sum()
    return np.asarray(total / count)


def he_uniform(shape, fan_in, rng):
    """He-uniform kernel init: U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# tape ops

def _tape_of(*vars_):
    tape = vars_[0].tape
    for v in vars_[1:]:
        if v.tape is not tape:
            raise ValueError("ops cannot mix vars from different tapes")
    return tape


def conv2d(x, w, b, padding="same"):
    tape = _tape_of(x, w, b)
    out, cols, xp_shape = conv2d_forward(x.value, w.value, b.value, padding,
                                         want_cols=True)
    return tape.record("conv2d", (x, w, b), out, attrs={"padding": padding},
                       saved={"cols": cols, "xp_shape": xp_shape})


def max_pool_2x2(x):
    out, idx = max_pool_2x2_forward(x.value, want_argmax=True)
    return x.tape.record("max_pool_2x2", (x,), out, saved={"idx": idx})


def upsample2x(x):
    return x.tape.record("upsample2x", (x,), upsample2x_forward(x.value))


def upsample2x_conv(x, w, b, padding="same"):
    """Nearest-neighbour 2x replication followed by a conv (learned upsampling)."""
    return conv2d(upsample2x(x), w, b, padding)


def concat_channels(a, b):
    tape = _tape_of(a, b)
    av, bv = a.value, b.value
    if av.ndim != 4 or bv.ndim != 4:
        raise ValueError("concat_channels expects [N,C,H,W] tensors")
    if av.shape[0] != bv.shape[0] or av.shape[2:] != bv.shape[2:]:
        raise ValueError(
            f"concat_channels needs matching N,H,W: got {av.shape} and {bv.shape}")
    out = np.concatenate([av, bv], axis=1)
    return tape.record("concat", (a, b), out, attrs={"ca": av.shape[1]})


def relu(x):
    return x.tape.record("relu", (x,), np.maximum(x.value, 0))


def sigmoid(x):
    out = sigmoid_forward(x.value)
    return x.tape.record("sigmoid", (x,), out, saved={"y": out})


def add(a, b):
    tape = _tape_of(a, b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    return tape.record("add", (a, b), a.value + b.value)


def mul(a, b):
    tape = _tape_of(a, b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"mul shape mismatch: {a.value.shape} vs {b.value.shape}")
    return tape.record("mul", (a, b), a.value * b.value)


def scale(x, c):
    return x.tape.record("scale", (x,), x.value * x.value.dtype.type(c),
                         attrs={"c": float(c)})


def sum_all(x):
    return x.tape.record("sum", (x,), np.asarray(x.value.sum(), dtype=x.dtype))


def sigmoid_cross_entropy(logits, labels, mask=None):
    """Scalar mean-over-unmasked-pixels loss; labels/mask are constants."""
    labels = np.asarray(labels, dtype=logits.dtype)
    if mask is not None:
        mask = np.asarray(mask)
    out = bce_with_logits(logits.value, labels, mask)
    return logits.tape.record("sce", (logits,), out,
                              attrs={"labels": labels, "mask": mask})


# ---------------------------------------------------------------------------
# backward

def _bwd_conv2d(g, node, ins):
    x, w, _b = ins
    dx, dw, db = conv2d_backward(g, node.saved["cols"], node.saved["xp_shape"],
                                 x.value.shape, w.value, node.attrs["padding"])
    return dx, dw, db


def _bwd_sce(g, node, ins):
    # gradient computed in float64 (matching the forward reduction), then
    # cast back to the tape's working dtype at the boundary
    z = ins[0].value.astype(np.float64, copy=False)
    y = node.attrs["labels"].astype(np.float64, copy=False)
    mask = node.attrs["mask"]
    dz = sigmoid_forward(z) - y
    if mask is None:
        dz /= z.size
    else:
        m = (mask != 0)
        dz = dz * m / np.count_nonzero(m)
    return ((dz * g).astype(ins[0].value.dtype),)


_BACKWARD = {
    "conv2d": _bwd_conv2d,
    "max_pool_2x2": lambda g, n, ins: (max_pool_2x2_backward(g, n.saved["idx"],
                                                             ins[0].value.shape),),
    "upsample2x": lambda g, n, ins: (upsample2x_backward(g),),
    "concat": lambda g, n, ins: (g[:, :n.attrs["ca"]], g[:, n.attrs["ca"]:]),
    "relu": lambda g, n, ins: (g * (ins[0].value > 0),),
    "sigmoid": lambda g, n, ins: (g * n.saved["y"] * (1 - n.saved["y"]),),
    "add": lambda g, n, ins: (g, g),
    "mul": lambda g, n, ins: (g * ins[1].value, g * ins[0].value),
    "scale": lambda g, n, ins: (g * ins[0].value.dtype.type(n.attrs["c"]),),
    "sum": lambda g, n, ins: (np.broadcast_to(g, ins[0].value.shape).copy(),),
    "sce": _bwd_sce,
}

_REPLAY = {
    "conv2d": lambda ins, a: conv2d_forward(ins[0], ins[1], ins[2], a["padding"]),
    "max_pool_2x2": lambda ins, a: max_pool_2x2_forward(ins[0]),
    "upsample2x": lambda ins, a: upsample2x_forward(ins[0]),
    "concat": lambda ins, a: np.concatenate(ins, axis=1),
    "relu": lambda ins, a: np.maximum(ins[0], 0),
    "sigmoid": lambda ins, a: sigmoid_forward(ins[0]),
    "add": lambda ins, a: ins[0] + ins[1],
    "mul": lambda ins, a: ins[0] * ins[1],
    "scale": lambda ins, a: ins[0] * ins[0].dtype.type(a["c"]),
    "sum": lambda ins, a: np.asarray(ins[0].sum(), dtype=ins[0].dtype),
    "sce": lambda ins, a: bce_with_logits(ins[0], a["labels"], a["mask"]),
}


def backward(tape, loss):
    """Reverse sweep from a scalar loss var.

    Returns {var id: gradient array} for every var the loss depends on,
    and accumulates (+=) parameter gradients into their ParamStore
    entries.  Shared parameters receive the sum over all use sites.
    """
    if not isinstance(loss, Var) or not tape.owns(loss):
        raise ValueError("backward: loss var does not belong to this tape")
    if loss.value.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    grads = {loss.vid: np.ones((), dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output_id)
        if g is None:
            continue
        ins = [tape._vars[i] for i in node.input_ids]
        for v, gi in zip(ins, _BACKWARD[node.op](g, node, ins)):
            if gi is None:
                continue
            acc = grads.get(v.vid)
            grads[v.vid] = gi if acc is None else acc + gi
    for store, name, v in tape._param_refs:
        g = grads.get(v.vid)
        if g is not None:
            store.accumulate_grad(name, g)
    return grads
