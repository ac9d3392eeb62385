"""Iterative UNet assembly with weight-shared refinement modules.

One base UNet produces an initial vessel map; N-1 lightweight refinement
UNets then re-segment, every one of them reusing a single shared set of
refinery weights.  Three kinds of skip paths feed each refinement step:
the usual intra-UNet encoder/decoder skips, a path from the base
network's first conv block, and dense paths from every earlier module's
pre-head feature map.

The dense paths enter through one shared 1x1 input adapter ("reduce")
over three fixed channel banks: [base first-layer feature | base
pre-head feature | running sum of earlier refinery pre-head features].
A shared 1x1 conv over per-iteration concatenation slots with tied
slot weights is algebraically the same conv applied to the slotwise
sum, so the running-sum bank realizes the all-predecessors
concatenation while keeping the adapter's shape independent of the
iteration count: iterating more adds no parameters.  Banks that have
no producer yet (first refinement step) are zero-filled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as eng
from .optim import ParamStore


@dataclass(frozen=True)
class UNetConfig:
    """depth = number of resolution levels; channels double per level."""

    depth: int = 3
    channels: int = 8
    in_channels: int = 3

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"UNet depth must be >= 2, got {self.depth}")
        if self.channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")


@dataclass(frozen=True)
class IterNetConfig:
    base: UNetConfig = field(default_factory=UNetConfig)
    mini: UNetConfig = field(default_factory=lambda: UNetConfig(2, 4, 4))
    iterations: int = 4
    skip_connections: bool = True
    full_size_refinery: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")

    def refinery(self):
        """Config of the shared refinement UNet (its input width equals
        its first-level channel count; the reduce adapter produces it)."""
        if self.full_size_refinery:
            c = self.base.channels
            return UNetConfig(self.base.depth, c, c)
        return self.mini

    def max_depth(self):
        return max(self.base.depth,
                   self.refinery().depth if self.iterations > 1 else 2)


def toy_config(in_channels=3, iterations=4, skip_connections=True,
               full_size_refinery=False):
    """Desk-scale setup: base depth 3 / 8 channels, refinery depth 2 / 4."""
    return IterNetConfig(base=UNetConfig(3, 8, in_channels),
                         mini=UNetConfig(2, 4, 4),
                         iterations=iterations,
                         skip_connections=skip_connections,
                         full_size_refinery=full_size_refinery)


def full_scale_config(in_channels=3, iterations=4):
    """Full-scale setup (base depth 4 / 32 channels, refinery depth 3 / 16).

    Follows the halving rule used throughout: the refinery is one level
    shallower than the base and half as wide.
    """
    return IterNetConfig(base=UNetConfig(4, 32, in_channels),
                         mini=UNetConfig(3, 16, 16),
                         iterations=iterations)


@dataclass
class ForwardResult:
    """outputs[i] = sigmoid map of module i; logits are the pre-sigmoid
    1x1 head outputs; features are the per-module pre-head maps."""

    outputs: list
    logits: list
    features: list


# ---------------------------------------------------------------------------
# parameter layout

def _unet_layout(prefix, cfg):
    layout = {}

    def conv(name, cin, cout, k):
        layout[f"{prefix}.{name}.w"] = (cout, cin, k, k)
        layout[f"{prefix}.{name}.b"] = (cout,)

    ch = [cfg.channels * (1 << i) for i in range(cfg.depth)]
    cin = cfg.in_channels
    for lvl in range(cfg.depth - 1):
        conv(f"enc{lvl + 1}.conv1", cin, ch[lvl], 3)
        conv(f"enc{lvl + 1}.conv2", ch[lvl], ch[lvl], 3)
        cin = ch[lvl]
    conv("bot.conv1", ch[-2], ch[-1], 3)
    conv("bot.conv2", ch[-1], ch[-1], 3)
    for lvl in range(cfg.depth - 2, -1, -1):
        conv(f"dec{lvl + 1}.up", ch[lvl + 1], ch[lvl], 3)
        conv(f"dec{lvl + 1}.conv1", 2 * ch[lvl], ch[lvl], 3)
        conv(f"dec{lvl + 1}.conv2", ch[lvl], ch[lvl], 3)
    conv("head", ch[0], 1, 1)
    return layout


def reduce_in_channels(cfg):
    # banks: base first-layer | base pre-head | summed refinery pre-head
    return 2 * cfg.base.channels + cfg.refinery().channels


def iternet_param_layout(cfg):
    """name -> shape for every trainable tensor of the assembly."""
    layout = _unet_layout("base", cfg.base)
    if cfg.iterations > 1:
        ref = cfg.refinery()
        layout.update(_unet_layout("mini", ref))
        layout["reduce.w"] = (ref.in_channels, reduce_in_channels(cfg), 1, 1)
        layout["reduce.b"] = (ref.in_channels,)
    return layout


def build_iternet(cfg, seed=0):
    """Initialize a ParamStore for the assembly (He-uniform kernels, zero
    biases).  Groups: base.*, then mini.* and reduce.* when iterating."""
    if cfg.iterations > 1 and not cfg.full_size_refinery:
        mini_n = sum(int(np.prod(s)) for n, s in _unet_layout("m", cfg.mini).items())
        base_n = sum(int(np.prod(s)) for n, s in _unet_layout("b", cfg.base).items())
        if mini_n >= base_n:
            raise ValueError(
                f"refinery must be smaller than the base UNet "
                f"({mini_n} vs {base_n} parameters)")
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape in iternet_param_layout(cfg).items():
        if name.endswith(".w"):
            fan_in = shape[1] * shape[2] * shape[3]
            store.add(name, eng.he_uniform(shape, fan_in, rng))
        else:
            store.add(name, np.zeros(shape, dtype=np.float32))
    return store


# ---------------------------------------------------------------------------
# execution: the same wiring code runs on a tape (training) or on raw
# arrays (inference), so the two paths cannot drift apart

class _TapeExec:
    def __init__(self, tape, store):
        self.tape = tape
        self.store = store

    def conv(self, x, name, padding="same"):
        return eng.conv2d(x, self.tape.param(self.store, f"{name}.w"),
                          self.tape.param(self.store, f"{name}.b"), padding)

    def upconv(self, x, name):
        return eng.upsample2x_conv(x, self.tape.param(self.store, f"{name}.w"),
                                   self.tape.param(self.store, f"{name}.b"))

    def relu(self, x):
        return eng.relu(x)

    def sigmoid(self, x):
        return eng.sigmoid(x)

    def pool(self, x):
        return eng.max_pool_2x2(x)

    def concat(self, a, b):
        return eng.concat_channels(a, b)

    def add(self, a, b):
        return eng.add(a, b)

    def zeros(self, like, channels):
        v = like.value
        return self.tape.leaf(np.zeros((v.shape[0], channels) + v.shape[2:],
                                       dtype=v.dtype))


class _ArrayExec:
    def __init__(self, store):
        self.store = store

    def conv(self, x, name, padding="same"):
        return eng.conv2d_forward(x, self.store.value(f"{name}.w"),
                                  self.store.value(f"{name}.b"), padding)

    def upconv(self, x, name):
        return self.conv(eng.upsample2x_forward(x), name)

    def relu(self, x):
        return np.maximum(x, 0)

    def sigmoid(self, x):
        return eng.sigmoid_forward(x)

    def pool(self, x):
        return eng.max_pool_2x2_forward(x)

    def concat(self, a, b):
        return np.concatenate([a, b], axis=1)

    def add(self, a, b):
        return a + b

    def zeros(self, like, channels):
        return np.zeros((like.shape[0], channels) + like.shape[2:],
                        dtype=like.dtype)


def _unet(ex, x, prefix, cfg):
    """Returns (pre-head feature at cfg.channels width, first-block feature)."""
    skips = []
    h = x
    for lvl in range(1, cfg.depth):
        h = ex.relu(ex.conv(h, f"{prefix}.enc{lvl}.conv1"))
        h = ex.relu(ex.conv(h, f"{prefix}.enc{lvl}.conv2"))
        skips.append(h)
        h = ex.pool(h)
    h = ex.relu(ex.conv(h, f"{prefix}.bot.conv1"))
    h = ex.relu(ex.conv(h, f"{prefix}.bot.conv2"))
    for lvl in range(cfg.depth - 1, 0, -1):
        h = ex.relu(ex.upconv(h, f"{prefix}.dec{lvl}.up"))
        h = ex.concat(skips[lvl - 1], h)
        h = ex.relu(ex.conv(h, f"{prefix}.dec{lvl}.conv1"))
        h = ex.relu(ex.conv(h, f"{prefix}.dec{lvl}.conv2"))
    return h, skips[0]


def _iternet_graph(ex, x, cfg, refinery_prefix=None):
    # refinery_prefix maps iteration index k (1-based) to a parameter
    # group name; the default shares one "mini" group across iterations
    if refinery_prefix is None:
        refinery_prefix = lambda k: "mini"
    ref = cfg.refinery()
    base_feat, base_first = _unet(ex, x, "base", cfg.base)
    logits = [ex.conv(base_feat, "base.head")]
    features = [base_feat]
    hist = None  # running sum of refinery pre-head features
    prev = base_feat
    for k in range(1, cfg.iterations):
        if cfg.skip_connections:
            banks = [base_first, base_feat,
                     hist if hist is not None else ex.zeros(x, ref.channels)]
        elif k == 1:
            banks = [ex.zeros(x, cfg.base.channels), prev,
                     ex.zeros(x, ref.channels)]
        else:
            banks = [ex.zeros(x, cfg.base.channels),
                     ex.zeros(x, cfg.base.channels), prev]
        cat = ex.concat(ex.concat(banks[0], banks[1]), banks[2])
        prefix = refinery_prefix(k)
        h = ex.conv(cat, "reduce")
        feat, _ = _unet(ex, h, prefix, ref)
        logits.append(ex.conv(feat, f"{prefix}.head"))
        features.append(feat)
        hist = feat if hist is None else ex.add(hist, feat)
        prev = feat
    outputs = [ex.sigmoid(l) for l in logits]
    return ForwardResult(outputs=outputs, logits=logits, features=features)


def _check_input(x, cfg):
    if x.ndim != 4:
        raise ValueError(f"model input must be [N,C,H,W], got shape {x.shape}")
    if x.shape[1] != cfg.base.in_channels:
        raise ValueError(
            f"model expects {cfg.base.in_channels} input channels, "
            f"image has {x.shape[1]}")
    div = 1 << (cfg.max_depth() - 1)
    if x.shape[2] % div or x.shape[3] % div:
        raise ValueError(
            f"input H,W must be divisible by {div}, got "
            f"{x.shape[2]}x{x.shape[3]}")


def validate_patch_size(cfg, patch):
    div = 1 << (cfg.max_depth() - 1)
    if patch % div:
        raise ValueError(
            f"patch size {patch} not divisible by {div} "
            f"(model has {cfg.max_depth()} resolution levels)")


def iternet_forward(store, image, cfg, tape=None, refinery_prefix=None):
    """Run the assembly.

    With a tape, image may be a raw array or an existing tape var and
    the result holds tape vars ready for backward.  Without a tape,
    everything is plain numpy (used for inference; bit-identical math).
    """
    if tape is not None:
        if isinstance(image, eng.Var):
            x = image
        else:
            x = tape.leaf(np.asarray(image, dtype=store.dtype))
        _check_input(x.value, cfg)
        return _iternet_graph(_TapeExec(tape, store), x, cfg, refinery_prefix)
    x = np.asarray(image, dtype=store.dtype)
    _check_input(x, cfg)
    return _iternet_graph(_ArrayExec(store), x, cfg, refinery_prefix)


def iternet_loss(result, gold, weights=None, mask=None):
    """Weighted sum of per-output sigmoid cross-entropies (defaults to
    weight 1 for every output, none favoured)."""
    n = len(result.logits)
    if weights is None:
        weights = [1.0] * n
    if len(weights) != n:
        raise ValueError(f"{len(weights)} weights for {n} outputs")
    total = None
    for logit, w in zip(result.logits, weights):
        term = eng.sigmoid_cross_entropy(logit, gold, mask)
        if w != 1.0:
            term = eng.scale(term, w)
        total = term if total is None else eng.add(total, term)
    return total


def per_output_losses(result, gold, mask=None):
    """Plain-float per-output cross-entropies for logging."""
    vals = []
    for logit in result.logits:
        z = logit.value if isinstance(logit, eng.Var) else logit
        vals.append(float(eng.bce_with_logits(
            z, np.asarray(gold, dtype=z.dtype),
            None if mask is None else np.asarray(mask))))
    return vals
