"""Small U-shaped encoder-decoder segmentation network.

Plain numpy forward/backward built on the kernel backends. The network
is architecture-agnostic at the call sites: anything exposing
`forward`, `backward`, `parameters`, `gradients` with the same shape
contract would drop in.
"""

import json

import numpy as np

from . import kernels
from .errors import InvalidInputError


class Conv3x3:
    def __init__(self, cin, cout, rng, dtype):
        std = np.sqrt(2.0 / (9 * cin))
        self.w = (rng.standard_normal((3, 3, cin, cout)) * std).astype(dtype)
        self.b = np.zeros(cout, dtype=dtype)
        self.dw = None
        self.db = None
        self._x = None

    def forward(self, x, train):
        if train:
            self._x = x
        return kernels.conv3x3_forward(x, self.w, self.b)

    def backward(self, dy):
        dx, self.dw, self.db = kernels.conv3x3_backward(self._x, self.w, dy)
        return dx


class Conv1x1:
    def __init__(self, cin, cout, rng, dtype):
        std = np.sqrt(2.0 / cin)
        self.w = (rng.standard_normal((cin, cout)) * std).astype(dtype)
        self.b = np.zeros(cout, dtype=dtype)
        self.dw = None
        self.db = None
        self._x = None

    def forward(self, x, train):
        if train:
            self._x = x
        return kernels.conv1x1_forward(x, self.w, self.b)

    def backward(self, dy):
        dx, self.dw, self.db = kernels.conv1x1_backward(self._x, self.w, dy)
        return dx


class ConvBlock:
    """conv3x3 -> ReLU -> conv3x3 -> ReLU."""

    def __init__(self, cin, cout, rng, dtype):
        self.c1 = Conv3x3(cin, cout, rng, dtype)
        self.c2 = Conv3x3(cout, cout, rng, dtype)
        self._m1 = None
        self._m2 = None

    def forward(self, x, train):
        h = self.c1.forward(x, train)
        m1 = h > 0
        h *= m1
        h = self.c2.forward(h, train)
        m2 = h > 0
        h *= m2
        if train:
            self._m1, self._m2 = m1, m2
        return h

    def backward(self, dy):
        dy = dy * self._m2
        dy = self.c2.backward(dy)
        dy *= self._m1
        return self.c1.backward(dy)

    def convs(self):
        return [("c1", self.c1), ("c2", self.c2)]


class UNet:
    """Three-pool U-Net (4 resolution levels) with skip connections.

    Input is NHWC with H, W divisible by 8; output logits are NHWC with
    num_classes channels at the input resolution.
    """

    def __init__(self, in_channels=3, num_classes=2, base_width=16,
                 input_size=(128, 128), dtype=np.float32, init_seed=0):
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.base_width = base_width
        self.input_size = tuple(input_size)
        self.dtype = np.dtype(dtype)
        self.init_seed = init_seed
        rng = np.random.default_rng(init_seed)
        b = base_width
        self.enc1 = ConvBlock(in_channels, b, rng, self.dtype)
        self.enc2 = ConvBlock(b, 2 * b, rng, self.dtype)
        self.enc3 = ConvBlock(2 * b, 4 * b, rng, self.dtype)
        self.bott = ConvBlock(4 * b, 8 * b, rng, self.dtype)
        self.dec3 = ConvBlock(8 * b + 4 * b, 4 * b, rng, self.dtype)
        self.dec2 = ConvBlock(4 * b + 2 * b, 2 * b, rng, self.dtype)
        self.dec1 = ConvBlock(2 * b + b, b, rng, self.dtype)
        self.head = Conv1x1(b, num_classes, rng, self.dtype)
        self._cache = {}

    # ---------------------------------------------------------- plumbing

    def _blocks(self):
        return [("enc1", self.enc1), ("enc2", self.enc2), ("enc3", self.enc3),
                ("bott", self.bott), ("dec3", self.dec3), ("dec2", self.dec2),
                ("dec1", self.dec1)]

    def _convs(self):
        out = []
        for bname, block in self._blocks():
            for cname, conv in block.convs():
                out.append((f"{bname}.{cname}", conv))
        out.append(("head", self.head))
        return out

    def parameters(self):
        """Flat dict of parameter arrays keyed by stable names."""
        out = {}
        for name, conv in self._convs():
            out[f"{name}.w"] = conv.w
            out[f"{name}.b"] = conv.b
        return out

    def gradients(self):
        out = {}
        for name, conv in self._convs():
            out[f"{name}.w"] = conv.dw
            out[f"{name}.b"] = conv.db
        return out

    def set_parameters(self, params):
        for name, conv in self._convs():
            conv.w[...] = params[f"{name}.w"]
            conv.b[...] = params[f"{name}.b"]

    @property
    def num_parameters(self):
        return sum(int(p.size) for p in self.parameters().values())

    # ---------------------------------------------------------- forward

    def forward(self, x, train=False):
        """Compute logits for an NHWC batch."""
        x = np.asarray(x)
        if x.ndim != 4:
            raise InvalidInputError(f"expected NHWC batch, got shape {x.shape}")
        _, h, w, c = x.shape
        if c != self.in_channels:
            raise InvalidInputError(
                f"expected {self.in_channels} input channels, got {c}")
        if h % 8 or w % 8 or h < 8 or w < 8:
            raise InvalidInputError(
                f"input H and W must be multiples of 8, got {h}x{w}")
        x = x.astype(self.dtype, copy=False)

        e1 = self.enc1.forward(x, train)
        p1, i1 = kernels.maxpool2_forward(e1)
        e2 = self.enc2.forward(p1, train)
        p2, i2 = kernels.maxpool2_forward(e2)
        e3 = self.enc3.forward(p2, train)
        p3, i3 = kernels.maxpool2_forward(e3)
        bt = self.bott.forward(p3, train)
        u3 = kernels.upsample2_forward(bt)
        d3 = self.dec3.forward(np.concatenate([u3, e3], axis=3), train)
        u2 = kernels.upsample2_forward(d3)
        d2 = self.dec2.forward(np.concatenate([u2, e2], axis=3), train)
        u1 = kernels.upsample2_forward(d2)
        d1 = self.dec1.forward(np.concatenate([u1, e1], axis=3), train)
        logits = self.head.forward(d1, train)
        if train:
            self._cache = {"i1": i1, "i2": i2, "i3": i3}
        return logits

    def backward(self, dlogits):
        """Backprop from dL/dlogits; gradients land in `gradients()`."""
        c = self._cache
        b = self.base_width
        dd1 = self.head.backward(dlogits)
        dcat1 = self.dec1.backward(dd1)
        du1, de1_skip = dcat1[..., :2 * b], dcat1[..., 2 * b:]
        dd2 = kernels.upsample2_backward(np.ascontiguousarray(du1))
        dcat2 = self.dec2.backward(dd2)
        du2, de2_skip = dcat2[..., :4 * b], dcat2[..., 4 * b:]
        dd3 = kernels.upsample2_backward(np.ascontiguousarray(du2))
        dcat3 = self.dec3.backward(dd3)
        du3, de3_skip = dcat3[..., :8 * b], dcat3[..., 8 * b:]
        dbt = kernels.upsample2_backward(np.ascontiguousarray(du3))
        dp3 = self.bott.backward(dbt)
        de3 = kernels.maxpool2_backward(dp3, c["i3"]) + de3_skip
        dp2 = self.enc3.backward(de3)
        de2 = kernels.maxpool2_backward(dp2, c["i2"]) + de2_skip
        dp1 = self.enc2.backward(de2)
        de1 = kernels.maxpool2_backward(dp1, c["i1"]) + de1_skip
        return self.enc1.backward(de1)


def softmax(logits):
    """Stable softmax over the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_probs(model, images):
    """Per-pixel class distributions for an NHWC batch (inference mode)."""
    return softmax(model.forward(images, train=False))


# ------------------------------------------------------------ checkpoints

def save_checkpoint(model, path, meta=None):
    """Single-archive checkpoint: parameter arrays + JSON metadata record."""
    meta = dict(meta or {})
    meta["model"] = {
        "in_channels": model.in_channels,
        "num_classes": model.num_classes,
        "base_width": model.base_width,
        "input_size": list(model.input_size),
        "dtype": model.dtype.name,
        "init_seed": model.init_seed,
    }
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"),
                         dtype=np.uint8)
    arrays = {f"param/{k}": v for k, v in model.parameters().items()}
    np.savez(path, __meta__=blob, **arrays)


def load_checkpoint(path):
    """Rebuild a model from a checkpoint archive. Returns (model, meta)."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
        params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    mc = meta["model"]
    model = UNet(in_channels=mc["in_channels"], num_classes=mc["num_classes"],
                 base_width=mc["base_width"], input_size=tuple(mc["input_size"]),
                 dtype=np.dtype(mc["dtype"]), init_seed=mc.get("init_seed", 0))
    model.set_parameters(params)
    return model, meta
