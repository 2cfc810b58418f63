"""Image-to-image encoder-decoder used to parameterize the regularizers.

Layout for ``num_scales = S``, channel width ``C_s = base_channels * 2**s`` and
``R = residual_blocks_per_scale``::

    h = head(x)                                   conv 1 -> C_0
    for s in 0 .. S-2:
        h = R residual blocks at C_s;  skip_s = h
        h = down_s(h)                             conv C_s -> C_{s+1}, stride 2
    h = R residual blocks at C_{S-1}              (body)
    for s in S-2 .. 0:
        h = up_s(h) + skip_s                      zero-fill x2, conv C_{s+1} -> C_s
        h = R residual blocks at C_s
    G(x) = x + tail(h)                            conv C_0 -> 1, global skip

A residual block is ``h + conv(elu(conv(h)))``; every conv carries a bias and
uses circular padding. A strided conv is a conv followed by
:func:`~elder.autodiff.downsample`, a transposed conv is
:func:`~elder.autodiff.upsample` followed by a conv. With all weights zero the
network is the identity map (only the global skip survives).

Parameter count, with ``k = kernel_size``::

    head         C_0 k^2 + C_0
    tail         C_0 k^2 + 1
    each block   2 (C_s^2 k^2 + C_s)          (S-1 encoder levels, body, S-1 decoder levels)
    down_s       C_{s+1} C_s k^2 + C_{s+1}
    up_s         C_s C_{s+1} k^2 + C_s

See :func:`parameter_count`.
"""

import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, FormatError, ShapeError

MAGIC = b"ELDR"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    num_scales: int = 2
    residual_blocks_per_scale: int = 2
    base_channels: int = 32
    kernel_size: int = 3

    def validate(self):
        for name in ("num_scales", "residual_blocks_per_scale", "base_channels", "kernel_size"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        return self

    @property
    def divisor(self):
        return 2 ** (self.num_scales - 1)

    def channels(self, scale):
        return self.base_channels * 2 ** scale


def parameter_shapes(arch):
    """Ordered mapping name -> shape, fully determined by ``arch``."""
    arch.validate()
    k = arch.kernel_size
    shapes = OrderedDict()

    def conv(name, cout, cin):
        shapes[name + ".w"] = (cout, cin, k, k)
        shapes[name + ".b"] = (cout,)

    def blocks(prefix, c):
        for i in range(arch.residual_blocks_per_scale):
            conv(f"{prefix}.res{i}.conv0", c, c)
            conv(f"{prefix}.res{i}.conv1", c, c)

    conv("head", arch.channels(0), 1)
    for s in range(arch.num_scales - 1):
        blocks(f"enc{s}", arch.channels(s))
        conv(f"down{s}", arch.channels(s + 1), arch.channels(s))
    blocks("body", arch.channels(arch.num_scales - 1))
    for s in reversed(range(arch.num_scales - 1)):
        conv(f"up{s}", arch.channels(s), arch.channels(s + 1))
        blocks(f"dec{s}", arch.channels(s))
    conv("tail", 1, arch.channels(0))
    return shapes


def parameter_count(arch):
    """Closed-form parameter count; agrees with ``sum(prod(shape))``."""
    arch.validate()
    k2 = arch.kernel_size ** 2
    c = [arch.channels(s) for s in range(arch.num_scales)]
    block = lambda ch: 2 * (ch * ch * k2 + ch)  # noqa: E731
    r = arch.residual_blocks_per_scale
    n = (c[0] * k2 + c[0]) + (c[0] * k2 + 1)
    n += r * block(c[-1])
    for s in range(arch.num_scales - 1):
        n += 2 * r * block(c[s])
        n += c[s + 1] * c[s] * k2 + c[s + 1]
        n += c[s] * c[s + 1] * k2 + c[s]
    return n


class NetworkWeights:
    """Weights of G_theta together with the architecture that shapes them.

    Treated as immutable: training produces new instances via :meth:`replace`.
    """

    def __init__(self, arch, params):
        self.arch = arch.validate()
        expected = parameter_shapes(arch)
        params = OrderedDict((name, np.asarray(params[name], dtype=np.float64)) for name in expected
                             if name in params)
        missing = [n for n in expected if n not in params]
        if missing:
            raise ShapeError(f"missing parameters: {missing[:3]}...")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"parameter {name}: expected shape {shape}, got {params[name].shape}")
            if not np.all(np.isfinite(params[name])):
                raise ValueError(f"parameter {name} has non-finite entries")
        self.params = params

    @property
    def names(self):
        return list(self.params)

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def replace(self, params):
        return NetworkWeights(self.arch, params)

    def flat(self):
        return np.concatenate([p.ravel() for p in self.params.values()])

    def from_flat(self, vector):
        out, i = OrderedDict(), 0
        for name, p in self.params.items():
            out[name] = np.asarray(vector[i:i + p.size]).reshape(p.shape)
            i += p.size
        return self.replace(out)

    def __eq__(self, other):
        return (isinstance(other, NetworkWeights) and self.arch == other.arch
                and all(np.array_equal(a, b) for a, b in zip(self.params.values(), other.params.values())))

    # evaluation

    def forward(self, params, x):
        """Trace-compatible forward pass; ``params`` maps names to arrays or Vars."""
        return forward(self.arch, params, x)

    def apply(self, x):
        return apply(self, x)


def build_network(arch, seed=0, branch_gain=0.1):
    """Deterministic weights: He-scaled Gaussian kernels, zero biases.

    Kernels that close a residual branch (``*.conv1``) and the ``tail`` are
    further multiplied by ``branch_gain`` so that G starts close to the
    identity; plain He scaling compounds over the stacked blocks.
    """
    arch = arch.validate()
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in parameter_shapes(arch).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            gain = branch_gain if name.endswith(".conv1.w") or name == "tail.w" else 1.0
            params[name] = gain * rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return NetworkWeights(arch, params)


def zero_network(arch):
    return NetworkWeights(arch, {n: np.zeros(s) for n, s in parameter_shapes(arch).items()})


def _conv(params, name, h):
    return ad.add_bias(ad.conv2d(h, params[name + ".w"]), params[name + ".b"])


def _blocks(arch, params, prefix, h):
    for i in range(arch.residual_blocks_per_scale):
        t = ad.elu(_conv(params, f"{prefix}.res{i}.conv0", h))
        h = ad.add(h, _conv(params, f"{prefix}.res{i}.conv1", t))
    return h


def as_batch(x):
    """Shape (H,W) -> (1,1,H,W) and (B,H,W) -> (B,1,H,W)."""
    shape = ad._shape(x)
    if len(shape) == 2:
        return ad.reshape(x, (1, 1) + tuple(shape)) if isinstance(x, ad.Var) else x.reshape((1, 1) + shape)
    if len(shape) == 3:
        new = (shape[0], 1) + tuple(shape[1:])
        return ad.reshape(x, new) if isinstance(x, ad.Var) else x.reshape(new)
    raise ShapeError(f"expected an (H,W) image or (B,H,W) batch, got shape {shape}")


def check_input(arch, shape):
    if len(shape) not in (2, 3):
        raise ShapeError(f"expected an (H,W) image or (B,H,W) batch, got shape {shape}")
    h, w = shape[-2:]
    d = arch.divisor
    if h % d or w % d:
        raise ShapeError(f"spatial extent {(h, w)} must be divisible by {d}")
    if min(h, w) // d < arch.kernel_size:
        raise ShapeError(f"spatial extent {(h, w)} too small for {arch.num_scales} scales")


def forward(arch, params, x):
    shape = ad._shape(x)
    check_input(arch, shape)
    xb = as_batch(x)
    h = _conv(params, "head", xb)
    skips = []
    for s in range(arch.num_scales - 1):
        h = _blocks(arch, params, f"enc{s}", h)
        skips.append(h)
        h = ad.downsample(_conv(params, f"down{s}", h), 2)
    h = _blocks(arch, params, "body", h)
    for s in reversed(range(arch.num_scales - 1)):
        h = ad.add(_conv(params, f"up{s}", ad.upsample(h, 2)), skips[s])
        h = _blocks(arch, params, f"dec{s}", h)
    out = ad.add(xb, _conv(params, "tail", h))
    return ad.reshape(out, tuple(shape))


def apply(weights, x):
    return forward(weights.arch, weights.params, np.asarray(x, dtype=np.float64))


def trace(weights, x, tape=None):
    """Record G(x) on ``tape``; returns (tape, x_var, param_vars, output_var)."""
    tape = tape or ad.Tape()
    xv = tape.leaf(x)
    pv = OrderedDict((n, tape.leaf(p)) for n, p in weights.params.items())
    return tape, xv, pv, weights.forward(pv, xv)


def vjp_input(weights, x, v):
    """[J_G(x)]^T v."""
    x = np.asarray(x, dtype=np.float64)
    if np.shape(v) != x.shape:
        raise ShapeError(f"cotangent shape {np.shape(v)} does not match input {x.shape}")
    tape, xv, _, out = trace(weights, x)
    return ad.grad(out, xv, v)


def vjp_weights(weights, x, v):
    """Gradient of <v, G_theta(x)> with respect to every parameter (ordered dict)."""
    x = np.asarray(x, dtype=np.float64)
    if np.shape(v) != x.shape:
        raise ShapeError(f"cotangent shape {np.shape(v)} does not match input {x.shape}")
    tape, _, pv, out = trace(weights, x)
    grads = ad.grad(out, list(pv.values()), v)
    return OrderedDict(zip(pv, grads))


# serialization

def _manifest(arch, params):
    lines = ["arch " + " ".join(f"{k}={v}" for k, v in asdict(arch).items())]
    for name, p in params.items():
        lines.append("param " + name + " " + " ".join(str(n) for n in p.shape))
    return "\n".join(lines).encode("utf-8")


def save_weights(weights, path):
    """Write the little-endian ``ELDR`` weight file.

    Layout: 4 magic bytes ``ELDR``, 1 version byte, a uint32 manifest length,
    the UTF-8 manifest (one ``arch key=value ...`` line, then one
    ``param <name> <extents...>`` line per tensor), then every tensor as raw
    float64 in manifest order.
    """
    manifest = _manifest(weights.arch, weights.params)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BI", FORMAT_VERSION, len(manifest)))
        fh.write(manifest)
        for p in weights.params.values():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_weights(path, arch=None):
    """Read a weight file; ``arch``, when given, must match the stored one."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 9 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: not an ELDR weight file")
    version, mlen = struct.unpack("<BI", blob[4:9])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if 9 + mlen > len(blob):
        raise FormatError(f"{path}: truncated manifest")
    try:
        lines = blob[9:9 + mlen].decode("utf-8").split("\n")
        head = lines[0].split()
        if head[0] != "arch":
            raise ValueError("missing arch line")
        fields = dict(item.split("=") for item in head[1:])
        stored = ArchConfig(**{k: int(v) for k, v in fields.items()}).validate()
        entries = []
        for line in lines[1:]:
            tag, name, *extents = line.split()
            if tag != "param":
                raise ValueError(f"unexpected manifest line {line!r}")
            entries.append((name, tuple(int(e) for e in extents)))
    except (ValueError, TypeError, IndexError, ConfigError) as exc:
        raise FormatError(f"{path}: corrupt manifest ({exc})") from exc

    expected = parameter_shapes(stored)
    if [n for n, _ in entries] != list(expected) or any(expected[n] != s for n, s in entries):
        raise FormatError(f"{path}: manifest extents inconsistent with its architecture")
    total = sum(int(np.prod(s)) for _, s in entries)
    payload = blob[9 + mlen:]
    if len(payload) != 8 * total:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {8 * total}")
    if arch is not None and arch != stored:
        raise ShapeError(f"{path}: stored architecture {stored} differs from expected {arch}")

    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    params, i = OrderedDict(), 0
    for name, shape in entries:
        n = int(np.prod(shape))
        params[name] = flat[i:i + n].reshape(shape).copy()
        i += n
    return NetworkWeights(stored, params)
