"""The learned synthesis pipeline.

Three stages: a soft-masking hourglass producing one correspondence mask
per depth plane, a grouped gated section that extracts per-plane-pair
features modulated by those masks, and a U-Net fusion network with a
dilated middle block that renders the output view.  The no-mask variant
replaces the mask path with gated feature halving in every encoder
level.

Channel schedules follow the fixed width tables; ``channel_cap`` (used
for small-scale training runs) additionally clamps every non-structural
width.  Structural widths (anything that must line up with the plane
grouping or the mask count) are never clamped.
"""

from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np

from . import psv as psvmod
from .checkpoint import ChecksumMismatch, load_arrays, save_arrays
from .ops import BatchNorm2d, Conv2d, avg_pool2, bilinear_resize
from .tensor import (
    Tensor,
    channel_interleave,
    concat_channels,
    mul,
    no_grad,
    relu,
    sigmoid,
    softmax_groups,
    tanh,
)


@dataclass(frozen=True)
class ModelVariant:
    name: str
    n_planes: int
    n_views: int = 2
    use_sm: bool = True
    d_min: float = 1.0
    d_max: float = 100.0
    channel_cap: int = 0  # 0 = uncapped

    def __post_init__(self):
        if self.n_planes < 2:
            raise ValueError("need at least 2 depth planes")
        if self.n_views not in (2, 3):
            raise ValueError("supported view counts are 2 and 3")

    def cap(self, width):
        return min(width, self.channel_cap) if self.channel_cap else width

    def with_cap(self, channel_cap):
        return replace(self, channel_cap=channel_cap)

    def depth_sampling(self):
        return psvmod.sample_depths(self.n_planes, self.d_min, self.d_max)


PRESETS = {
    "Ours-32": ModelVariant("Ours-32", 32, 2, True, 1.0, 100.0),
    "Ours-19": ModelVariant("Ours-19", 19, 2, True, 1.0, 100.0),
    "Ours-32-NoSM": ModelVariant("Ours-32-NoSM", 32, 2, False, 1.0, 100.0),
    "Ours-19-NoSM": ModelVariant("Ours-19-NoSM", 19, 2, False, 1.0, 100.0),
    "Ours-17-NoSM": ModelVariant("Ours-17-NoSM", 17, 2, False, 0.3, 16.0),
    "Ours-13-NoSM": ModelVariant("Ours-13-NoSM", 13, 2, False, 0.3, 16.0),
    "F-19-3view": ModelVariant("F-19-3view", 19, 3, True, 1.0, 100.0),
}


def get_variant(name, channel_cap=None):
    if name not in PRESETS:
        raise KeyError(f"unknown variant {name!r}; presets: {sorted(PRESETS)}")
    v = PRESETS[name]
    return v.with_cap(channel_cap) if channel_cap is not None else v


_SM_CAP = 256  # width ceiling of the masking hourglass


class SoftMaskNet:
    """Hourglass over the grayscale volume: four pool downs, four
    bilinear ups with pooled-feature skips, then a per-plane softmax
    head keeping one probability per plane."""

    def __init__(self, variant, rng):
        n, k = variant.n_planes, variant.n_views
        cap = lambda w: variant.cap(min(w, _SM_CAP))
        cin = k * n
        a1, a2, a3, a4 = cap(k * n), cap(8 * n), cap(16 * n), cap(32 * n)
        b, u2, u3, u4 = cap(16 * n), cap(8 * n), cap(4 * n), cap(2 * n)
        conv = lambda ci, co: Conv2d(ci, co, 3, padding=1, rng=rng)
        self.c1 = conv(cin, a1)
        self.c2 = conv(a1, a2)
        self.c3 = conv(a2, a3)
        self.c4 = conv(a3, a4)
        self.c5 = conv(a4, b)
        self.c6 = conv(b + a3, u2)
        self.c7 = conv(u2 + a2, u3)
        self.c8 = conv(u3 + a1, u4)
        self.c9 = conv(u4 + cin, k * n)
        self.group = k

    def forward(self, gray):
        p1 = avg_pool2(relu(self.c1(gray)))
        p2 = avg_pool2(relu(self.c2(p1)))
        p3 = avg_pool2(relu(self.c3(p2)))
        p4 = avg_pool2(relu(self.c4(p3)))
        u = relu(self.c5(p4))
        u = relu(self.c6(concat_channels([_up_to(u, p3), p3])))
        u = relu(self.c7(concat_channels([_up_to(u, p2), p2])))
        u = relu(self.c8(concat_channels([_up_to(u, p1), p1])))
        logits = self.c9(concat_channels([_up_to(u, gray), gray]))
        return softmax_groups(logits, self.group)

    def layers(self):
        return [("c1", self.c1), ("c2", self.c2), ("c3", self.c3), ("c4", self.c4),
                ("c5", self.c5), ("c6", self.c6), ("c7", self.c7), ("c8", self.c8),
                ("c9", self.c9)]


def _up_to(x, ref):
    return bilinear_resize(x, ref.shape[2], ref.shape[3])


class GroupGate:
    """Grouped gated feature extraction over plane pairs.

    Input channels are plane-major groups of (3K + 1): the K warped RGB
    triplets of one plane plus its mask.  Two grouped 3x3 convolutions
    extract per-pair features; a sigmoid branch then gates a ReLU branch
    elementwise, halving the width to 6 features per plane.
    """

    def __init__(self, variant, rng):
        n, k = variant.n_planes, variant.n_views
        pin = (3 * k + 1) * n
        gconv = lambda ci, co: Conv2d(ci, co, 3, padding=1, groups=n, rng=rng)
        self.c1 = gconv(pin, pin)
        self.c2 = gconv(pin, 12 * n)
        # gate branches are pointwise: mask/feature mixing within a pair
        self.f = Conv2d(12 * n, 6 * n, 1, groups=n, rng=rng)
        self.g = Conv2d(12 * n, 6 * n, 1, groups=n, rng=rng)

    def forward(self, z):
        h = relu(self.c2(relu(self.c1(z))))
        return mul(relu(self.f(h)), sigmoid(self.g(h)))

    def layers(self):
        return [("c1", self.c1), ("c2", self.c2), ("f", self.f), ("g", self.g)]


class _ConvBN:
    def __init__(self, cin, cout, rng, stride=1, dilation=1, norm=False):
        pad = dilation
        self.conv = Conv2d(cin, cout, 3, stride=stride, padding=pad, dilation=dilation, rng=rng)
        self.bn = BatchNorm2d(cout) if norm else None

    def __call__(self, x, training):
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y, training)
        return relu(y)

    def layers(self, name):
        out = [(name, self.conv)]
        if self.bn is not None:
            out.append((name + ".bn", self.bn))
        return out


class FusionUNet:
    """U-Net renderer: a full-resolution bottleneck, four stride-2 down
    blocks with batchnorm, a dilated middle block, four bilinear-up
    blocks with skips, and a 1x1 tanh head."""

    def __init__(self, variant, rng):
        n = variant.n_planes
        c = variant.cap
        c6, c3, c12 = c(6 * n), c(3 * n), c(12 * n)
        c128, c256 = c(128), c(256)
        cb = lambda ci, co, **kw: _ConvBN(ci, co, rng, **kw)
        self.b1 = cb(6 * n, c6)
        self.b2 = cb(c6, c3)
        self.d1a = cb(c3, c6, norm=True)
        self.d1b = cb(c6, c6, stride=2, norm=True)
        self.d2a = cb(c6, c128, norm=True)
        self.d2b = cb(c128, c128, stride=2, norm=True)
        self.d3a = cb(c128, c256, norm=True)
        self.d3b = cb(c256, c256, stride=2, norm=True)
        self.d4a = cb(c256, c256, norm=True)
        self.d4b = cb(c256, c256, stride=2, norm=True)
        self.m1 = cb(c256, c256, dilation=2)
        self.m2 = cb(c256, c256, dilation=2)
        self.u1a = cb(c256 + c256, c256)
        self.u1b = cb(c256, c128)
        self.u2a = cb(c128 + c128, c128)
        self.u2b = cb(c128, c12)
        self.u3a = cb(c12 + c6, c6)
        self.u3b = cb(c6, c3)
        self.u4a = cb(c3 + c3, c(32))
        self.u4b = cb(c(32), c(32))
        self.out = Conv2d(c(32), 3, 1, rng=rng)

    def forward(self, gated, training):
        bott = self.b2(self.b1(gated, training), training)
        d1 = self.d1b(self.d1a(bott, training), training)
        d2 = self.d2b(self.d2a(d1, training), training)
        d3 = self.d3b(self.d3a(d2, training), training)
        d4 = self.d4b(self.d4a(d3, training), training)
        mid = self.m2(self.m1(d4, training), training)
        u = self.u1b(self.u1a(concat_channels([_up_to(mid, d3), d3]), training), training)
        u = self.u2b(self.u2a(concat_channels([_up_to(u, d2), d2]), training), training)
        u = self.u3b(self.u3a(concat_channels([_up_to(u, d1), d1]), training), training)
        u = self.u4b(self.u4a(concat_channels([_up_to(u, bott), bott]), training), training)
        return tanh(self.out(u))

    def layers(self):
        names = ["b1", "b2", "d1a", "d1b", "d2a", "d2b", "d3a", "d3b", "d4a",
                 "d4b", "m1", "m2", "u1a", "u1b", "u2a", "u2b", "u3a", "u3b",
                 "u4a", "u4b"]
        out = []
        for nm in names:
            out.extend(getattr(self, nm).layers(nm))
        out.append(("out", self.out))
        return out


class GatedHalf:
    """Gated width reduction: ReLU(conv_f(x)) * sigmoid(conv_g(x)), each
    branch a 1x1 conv emitting half the input channels."""

    def __init__(self, cin, rng, groups=1):
        if cin % 2:
            raise ValueError(f"gated halving needs even width, got {cin}")
        self.f = Conv2d(cin, cin // 2, 1, groups=groups, rng=rng)
        self.g = Conv2d(cin, cin // 2, 1, groups=groups, rng=rng)
        self.out_channels = cin // 2

    def __call__(self, x):
        return mul(relu(self.f(x)), sigmoid(self.g(x)))

    def layers(self, name):
        return [(name + ".f", self.f), (name + ".g", self.g)]


class NoSMNet:
    """Mask-free variant: gated convolutions feed every encoder level and
    every skip, at the cost of wider deep layers."""

    def __init__(self, variant, rng):
        n, k = variant.n_planes, variant.n_views
        c = variant.cap
        gconv = lambda ci, co: Conv2d(ci, co, 3, padding=1, groups=n, rng=rng)
        self.g0a = gconv(3 * k * n, 3 * k * n)
        self.g0b = gconv(3 * k * n, 12 * n)
        self.gate0 = GatedHalf(12 * n, rng, groups=n)
        cb = lambda ci, co, **kw: _ConvBN(ci, co, rng, **kw)
        self.b1 = cb(6 * n, c(6 * n))
        self.b2 = cb(c(6 * n), c(6 * n))
        self.gate1 = GatedHalf(c(6 * n), rng)
        self.d1a = cb(self.gate1.out_channels, c(6 * n), norm=True)
        self.d1b = cb(c(6 * n), c(12 * n), stride=2, norm=True)
        self.gate2 = GatedHalf(c(12 * n), rng)
        self.d2a = cb(self.gate2.out_channels, c(128), norm=True)
        self.d2b = cb(c(128), c(256), stride=2, norm=True)
        self.gate3 = GatedHalf(c(256), rng)
        self.d3a = cb(self.gate3.out_channels, c(256), norm=True)
        self.d3b = cb(c(256), c(512), stride=2, norm=True)
        self.gate4 = GatedHalf(c(512), rng)
        self.d4a = cb(self.gate4.out_channels, c(256), norm=True)
        self.d4b = cb(c(256), c(1024), stride=2, norm=True)
        self.gate5 = GatedHalf(c(1024), rng)
        self.m1 = cb(self.gate5.out_channels, c(512), dilation=2)
        self.m2 = cb(c(512), c(512), dilation=2)
        self.u1a = cb(c(512) + self.gate4.out_channels, c(256))
        self.u1b = cb(c(256), c(256))
        self.u2a = cb(c(256) + self.gate3.out_channels, c(12 * n))
        self.u2b = cb(c(12 * n), c(12 * n))
        self.u3a = cb(c(12 * n) + self.gate2.out_channels, c(6 * n))
        self.u3b = cb(c(6 * n), c(6 * n))
        self.u4a = cb(c(6 * n) + self.gate1.out_channels, c(32))
        self.u4b = cb(c(32), c(32))
        self.out = Conv2d(c(32), 3, 1, rng=rng)

    def forward(self, planes, training):
        h = relu(self.g0b(relu(self.g0a(planes))))
        h = self.gate0(h)
        bott = self.b2(self.b1(h, training), training)
        s1 = self.gate1(bott)
        d1 = self.d1b(self.d1a(s1, training), training)
        s2 = self.gate2(d1)
        d2 = self.d2b(self.d2a(s2, training), training)
        s3 = self.gate3(d2)
        d3 = self.d3b(self.d3a(s3, training), training)
        s4 = self.gate4(d3)
        d4 = self.d4b(self.d4a(s4, training), training)
        s5 = self.gate5(d4)
        mid = self.m2(self.m1(s5, training), training)
        u = self.u1b(self.u1a(concat_channels([_up_to(mid, s4), s4]), training), training)
        u = self.u2b(self.u2a(concat_channels([_up_to(u, s3), s3]), training), training)
        u = self.u3b(self.u3a(concat_channels([_up_to(u, s2), s2]), training), training)
        u = self.u4b(self.u4a(concat_channels([_up_to(u, s1), s1]), training), training)
        return tanh(self.out(u))

    def layers(self):
        out = [("g0a", self.g0a), ("g0b", self.g0b)]
        out.extend(self.gate0.layers("gate0"))
        for nm in ["b1", "b2"]:
            out.extend(getattr(self, nm).layers(nm))
        out.extend(self.gate1.layers("gate1"))
        for nm in ["d1a", "d1b"]:
            out.extend(getattr(self, nm).layers(nm))
        out.extend(self.gate2.layers("gate2"))
        for nm in ["d2a", "d2b"]:
            out.extend(getattr(self, nm).layers(nm))
        out.extend(self.gate3.layers("gate3"))
        for nm in ["d3a", "d3b"]:
            out.extend(getattr(self, nm).layers(nm))
        out.extend(self.gate4.layers("gate4"))
        for nm in ["d4a", "d4b"]:
            out.extend(getattr(self, nm).layers(nm))
        out.extend(self.gate5.layers("gate5"))
        for nm in ["m1", "m2", "u1a", "u1b", "u2a", "u2b", "u3a", "u3b", "u4a", "u4b"]:
            out.extend(getattr(self, nm).layers(nm))
        out.append(("out", self.out))
        return out


class Model:
    """Complete synthesis network for one variant."""

    def __init__(self, variant, seed=0):
        self.variant = variant
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
        if variant.use_sm:
            self.sm = SoftMaskNet(variant, rng)
            self.gate = GroupGate(variant, rng)
            self.fusion = FusionUNet(variant, rng)
            self.nosm = None
        else:
            self.sm = self.gate = self.fusion = None
            self.nosm = NoSMNet(variant, rng)

    # -- forward ------------------------------------------------------

    def forward(self, planes, gray=None, training=False, masks=None):
        """planes: Tensor (B, 3*K*N, H, W), plane-major, in [-1, 1].
        gray: Tensor (B, K*N, H, W) in [-1, 1] (soft-mask variants only).
        Returns the predicted image, Tensor (B, 3, H, W) in (-1, 1)."""
        if self.nosm is not None:
            return self.nosm.forward(planes, training)
        if masks is None:
            if gray is None:
                raise ValueError("soft-mask variant needs grayscale planes")
            masks = self.sm.forward(gray)
        k = self.variant.n_views
        z = channel_interleave(planes, masks, 3 * k, 1)
        return self.fusion.forward(self.gate.forward(z), training)

    def soft_masks(self, gray):
        if self.sm is None:
            raise ValueError("variant has no soft-masking stage")
        return self.sm.forward(gray)

    # -- parameters ---------------------------------------------------

    def _modules(self):
        if self.nosm is not None:
            return [("nosm", self.nosm)]
        return [("sm", self.sm), ("gate", self.gate), ("fusion", self.fusion)]

    def named_params(self):
        for mname, mod in self._modules():
            for lname, layer in mod.layers():
                if isinstance(layer, BatchNorm2d):
                    yield from layer.named_params(f"{mname}.{lname}")
                else:
                    yield from layer.named_params(f"{mname}.{lname}")

    def named_buffers(self):
        for mname, mod in self._modules():
            for lname, layer in mod.layers():
                if isinstance(layer, BatchNorm2d):
                    yield from layer.named_buffers(f"{mname}.{lname}")

    def params(self):
        return [t for _, t in self.named_params()]

    def param_count(self):
        return sum(t.size for _, t in self.named_params())

    def cast(self, dtype):
        for _, mod in self._modules():
            for _, layer in mod.layers():
                layer.cast(dtype)
        return self

    # -- persistence ----------------------------------------------------

    def state_arrays(self):
        out = OrderedDict()
        for name, t in self.named_params():
            out[name] = t.data
        for name, buf in self.named_buffers():
            out[name] = buf
        return out

    def load_state(self, arrays):
        own = {n: t for n, t in self.named_params()}
        bufs = dict(self.named_buffers())
        for name, t in own.items():
            if name not in arrays:
                raise ChecksumMismatch(f"checkpoint missing parameter {name}")
            if tuple(arrays[name].shape) != tuple(t.shape):
                raise ChecksumMismatch(
                    f"parameter {name}: checkpoint {arrays[name].shape} vs model {t.shape}"
                )
            t.data = np.ascontiguousarray(arrays[name], dtype=t.dtype)
        for mname, mod in self._modules():
            for lname, layer in mod.layers():
                if isinstance(layer, BatchNorm2d):
                    for bname, _ in layer.named_buffers(f"{mname}.{lname}"):
                        if bname not in arrays:
                            raise ChecksumMismatch(f"checkpoint missing buffer {bname}")
                        layer.set_buffer(bname, arrays[bname])
        extra = set(arrays) - set(own) - set(bufs) - {
            k for k in arrays if k.startswith(("opt.", "meta."))
        }
        if extra:
            raise ChecksumMismatch(f"checkpoint has unknown arrays: {sorted(extra)[:4]}")

    def save(self, path):
        save_arrays(path, self.state_arrays())

    def load(self, path):
        self.load_state(load_arrays(path))
        return self


def param_count(variant, seed=0):
    """Total learned scalars (conv weights/biases, batchnorm scale/shift)."""
    return Model(variant, seed=seed).param_count()


# -- inference over plane sweep volumes --------------------------------


def psv_net_inputs(psv):
    """Plane-major normalized planes + grayscale planes as (1, C, H, W)
    float32 arrays ready for the network."""
    k, n = psv.n_views, psv.n_planes
    kn, _, h, w = psv.planes.shape
    pm = psv.planes.reshape(k, n, 3, h, w).transpose(1, 0, 2, 3, 4).reshape(1, 3 * k * n, h, w)
    gray = psvmod.grayscale_planes(psv).reshape(k, n, h, w).transpose(1, 0, 2, 3)
    gray = gray.reshape(1, k * n, h, w)
    return psvmod.normalize_for_net(pm), psvmod.normalize_for_net(gray)


def model_forward(model, psv):
    """Synthesize the target view from a PSV.  Returns (H, W, 3) in [0, 1]."""
    _check_psv(model.variant, psv)
    pm, gray = psv_net_inputs(psv)
    with no_grad():
        out = model.forward(Tensor(pm), Tensor(gray), training=False)
    return psvmod.denormalize(out.data[0].transpose(1, 2, 0))


def mixed_scale_forward(model, psv_full, psv_half):
    """Soft masks at half resolution, bilinearly upsampled, then gating
    and fusion at full resolution."""
    if model.sm is None:
        raise ValueError("mixed-scale path needs a soft-mask variant")
    _check_psv(model.variant, psv_full)
    _check_psv(model.variant, psv_half)
    fh, fw = psv_full.planes.shape[2:]
    hh, hw = psv_half.planes.shape[2:]
    if (hh * 2, hw * 2) != (fh, fw):
        raise ValueError(f"half PSV is {hw}x{hh}, expected {fw // 2}x{fh // 2}")
    pm_full, _ = psv_net_inputs(psv_full)
    _, gray_half = psv_net_inputs(psv_half)
    with no_grad():
        masks = model.soft_masks(Tensor(gray_half))
        masks = bilinear_resize(masks, fh, fw)
        out = model.forward(Tensor(pm_full), masks=masks, training=False)
    return psvmod.denormalize(out.data[0].transpose(1, 2, 0))


def _check_psv(variant, psv):
    if psv.n_views != variant.n_views or psv.n_planes != variant.n_planes:
        raise ValueError(
            f"PSV has K={psv.n_views}, N={psv.n_planes}; variant expects "
            f"K={variant.n_views}, N={variant.n_planes}"
        )


# -- model config file (plain text, key = value) -----------------------


def save_model_config(path, variant, seed=0):
    lines = [
        f"variant = {variant.name}",
        f"n_planes = {variant.n_planes}",
        f"n_views = {variant.n_views}",
        f"use_sm = {'true' if variant.use_sm else 'false'}",
        f"d_min = {variant.d_min!r}",
        f"d_max = {variant.d_max!r}",
        f"channel_cap = {variant.channel_cap}",
        f"seed = {seed}",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_kv_file(path):
    out = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {raw.strip()!r}")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def load_model_config(path):
    kv = parse_kv_file(path)
    name = kv.get("variant", "Ours-19")
    base = PRESETS.get(name)
    variant = ModelVariant(
        name=name,
        n_planes=int(kv.get("n_planes", base.n_planes if base else 19)),
        n_views=int(kv.get("n_views", base.n_views if base else 2)),
        use_sm=kv.get("use_sm", str(base.use_sm if base else True)).lower()
        in ("1", "true", "yes"),
        d_min=float(kv.get("d_min", base.d_min if base else 1.0)),
        d_max=float(kv.get("d_max", base.d_max if base else 100.0)),
        channel_cap=int(kv.get("channel_cap", 0)),
    )
    seed = int(kv.get("seed", 0))
    return variant, seed
