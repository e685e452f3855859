"""Dense/conv ReLU networks with manual forward, reverse and forward-mode passes.

Arrays are float64 numpy arrays, batch-first. Dense weights are stored as
(fan_out, fan_in); conv weights as (c_out, c_in, k, k). A network is a trunk of
layers followed by one dense output layer per head.
"""
from dataclasses import dataclass, field

import numpy as np

from . import _conv
from .errors import InputError, NumericError

LAYER_KINDS = ("dense", "conv2d", "relu", "flatten", "avgpool")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    fan_in: int = 0
    fan_out: int = 0
    channels_in: int = 0
    channels_out: int = 0
    kernel: int = 0
    stride: int = 1
    padding: str = "valid"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InputError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d":
            if self.stride not in (1, 2) or self.padding not in ("same", "valid"):
                raise InputError("conv2d supports stride 1/2 and same/valid padding")

    @property
    def has_params(self):
        return self.kind in ("dense", "conv2d")

    def param_shapes(self):
        if self.kind == "dense":
            return (self.fan_out, self.fan_in), (self.fan_out,)
        if self.kind == "conv2d":
            k = self.kernel
            return (self.channels_out, self.channels_in, k, k), (self.channels_out,)
        return None

    def output_shape(self, in_shape):
        in_shape = tuple(in_shape)
        if self.kind == "dense":
            if in_shape != (self.fan_in,):
                raise InputError(f"dense layer expects input ({self.fan_in},), got {in_shape}")
            return (self.fan_out,)
        if self.kind == "conv2d":
            if len(in_shape) != 3 or in_shape[0] != self.channels_in:
                raise InputError(f"conv2d expects ({self.channels_in}, H, W), got {in_shape}")
            _, _, oh = _conv.pad_amounts(in_shape[1], self.kernel, self.stride, self.padding)
            _, _, ow = _conv.pad_amounts(in_shape[2], self.kernel, self.stride, self.padding)
            if oh < 1 or ow < 1:
                raise InputError("conv2d kernel larger than input")
            return (self.channels_out, oh, ow)
        if self.kind == "relu":
            return in_shape
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        if len(in_shape) != 3 or in_shape[1] % self.kernel or in_shape[2] % self.kernel:
            raise InputError(f"avgpool({self.kernel}) cannot pool input {in_shape}")
        return (in_shape[0], in_shape[1] // self.kernel, in_shape[2] // self.kernel)


def dense(fan_in, fan_out):
    return LayerSpec("dense", fan_in=fan_in, fan_out=fan_out)


def conv2d(channels_in, channels_out, kernel, stride=1, padding="same"):
    return LayerSpec(
        "conv2d",
        channels_in=channels_in,
        channels_out=channels_out,
        kernel=kernel,
        stride=stride,
        padding=padding,
    )


def relu():
    return LayerSpec("relu")


def flatten():
    return LayerSpec("flatten")


def avgpool(kernel):
    return LayerSpec("avgpool", kernel=kernel)


def mlp_arch(sizes):
    """Trunk and head specs for an MLP with layer widths `sizes` (input first)."""
    if len(sizes) < 2:
        raise InputError("an MLP needs at least input and output sizes")
    trunk = []
    for fan_in, fan_out in zip(sizes[:-2], sizes[1:-1]):
        trunk += [dense(fan_in, fan_out), relu()]
    return tuple(trunk), dense(sizes[-2], sizes[-1])


@dataclass
class NetworkParams:
    input_shape: tuple
    arch: tuple
    head_spec: LayerSpec
    layers: list
    heads: list
    _shapes: list = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.arch = tuple(self.arch)
        if self.head_spec.kind != "dense":
            raise InputError("head layers must be dense")
        if not self.heads:
            raise InputError("head_count must be positive")
        shapes = [self.input_shape]
        for spec in self.arch:
            shapes.append(spec.output_shape(shapes[-1]))
        self.head_spec.output_shape(shapes[-1])
        self._shapes = shapes
        param_specs = [s for s in self.arch if s.has_params]
        if len(param_specs) != len(self.layers):
            raise InputError("parameter list does not match architecture")
        for spec, (w, b) in zip(param_specs + [self.head_spec] * len(self.heads),
                                list(self.layers) + list(self.heads)):
            ws, bs = spec.param_shapes()
            if w.shape != ws or b.shape != bs:
                raise InputError(f"parameter shapes {w.shape}, {b.shape} do not match {spec}")

    @property
    def head_count(self):
        return len(self.heads)

    @property
    def output_dim(self):
        return self.head_spec.fan_out

    @property
    def layer_shapes(self):
        """Activation shapes: network input, then the output of every trunk layer."""
        return list(self._shapes)

    @property
    def relu_shapes(self):
        return [self._shapes[i + 1] for i, s in enumerate(self.arch) if s.kind == "relu"]

    @property
    def n_activations(self):
        return int(sum(np.prod(s) for s in self.relu_shapes))

    @property
    def layer_param_counts(self):
        return [w.size + b.size for w, b in list(self.layers) + list(self.heads)]

    @property
    def n_params(self):
        return int(sum(self.layer_param_counts))

    def tensors(self):
        out = []
        for w, b in list(self.layers) + list(self.heads):
            out += [w, b]
        return out

    def with_tensors(self, tensors):
        tensors = list(tensors)
        n = len(self.layers)
        pairs = [(tensors[2 * i], tensors[2 * i + 1]) for i in range(len(tensors) // 2)]
        return NetworkParams(self.input_shape, self.arch, self.head_spec, pairs[:n], pairs[n:])

    def same_arch(self, other):
        return (
            self.input_shape == other.input_shape
            and self.arch == other.arch
            and self.head_spec == other.head_spec
            and self.head_count == other.head_count
        )

    def check_same_arch(self, other):
        if not self.same_arch(other):
            raise InputError("networks do not share an architecture")

    def map(self, fn):
        return self.with_tensors(fn(t) for t in self.tensors())

    def zip_map(self, other, fn):
        self.check_same_arch(other)
        return self.with_tensors(fn(a, b) for a, b in zip(self.tensors(), other.tensors()))

    def __add__(self, other):
        return self.zip_map(other, np.add)

    def __sub__(self, other):
        return self.zip_map(other, np.subtract)

    def __mul__(self, scalar):
        return self.map(lambda t: t * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return self.map(np.negative)

    def vdot(self, other):
        self.check_same_arch(other)
        return float(sum(np.vdot(a, b) for a, b in zip(self.tensors(), other.tensors())))

    def copy(self):
        return self.map(np.array)

    def zeros_like(self):
        return self.map(np.zeros_like)

    def flat(self):
        return np.concatenate([t.ravel() for t in self.tensors()])

    def from_flat(self, vec):
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params:
            raise InputError(f"flat vector has {vec.size} entries, expected {self.n_params}")
        out, i = [], 0
        for t in self.tensors():
            out.append(vec[i : i + t.size].reshape(t.shape).copy())
            i += t.size
        return self.with_tensors(out)

    def identical(self, other):
        """Bit-for-bit equality of architecture and every parameter."""
        return self.same_arch(other) and all(
            a.dtype == b.dtype and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors(), other.tensors())
        )


def init_params(input_shape, arch, head_spec, rng, head_count=1):
    """He-uniform weights (bound sqrt(6 / fan_in)) and small uniform biases."""
    def draw(spec):
        ws, bs = spec.param_shapes()
        fan_in = int(np.prod(ws[1:]))
        w = rng.uniform(-1.0, 1.0, size=ws) * np.sqrt(6.0 / fan_in)
        b = rng.uniform(-1.0, 1.0, size=bs) / np.sqrt(fan_in)
        return w, b

    layers = [draw(s) for s in arch if s.has_params]
    heads = [draw(head_spec) for _ in range(head_count)]
    return NetworkParams(input_shape, arch, head_spec, layers, heads)


def mlp_params(sizes, rng, head_count=1):
    trunk, head = mlp_arch(sizes)
    return init_params((sizes[0],), trunk, head, rng, head_count)


@dataclass
class ForwardTrace:
    """Inputs to every trunk layer (then to the head), relu gates and outputs."""

    arch: tuple
    inputs: list
    gates: list
    z: np.ndarray
    head: int

    @property
    def relu_indices(self):
        return [i for i, s in enumerate(self.arch) if s.kind == "relu"]

    @property
    def preactivations(self):
        return [self.inputs[i] for i in self.relu_indices]

    @property
    def activations(self):
        return [self.inputs[i + 1] for i in self.relu_indices]


def as_batch(params, x):
    x = np.asarray(x, dtype=float)
    if x.shape == params.input_shape:
        x = x[None]
    if x.shape[1:] != params.input_shape:
        raise InputError(f"input shape {x.shape[1:]} does not match {params.input_shape}")
    return x


def _check_head(params, head):
    if not 0 <= head < params.head_count:
        raise InputError(f"head {head} out of range for {params.head_count} heads")


def apply_layer(spec, x, wb=None):
    """Apply one non-relu layer. `wb` is (W, b); b may be None for a bias-free map."""
    if spec.kind == "dense":
        w, b = wb
        out = x @ w.T
        return out if b is None else out + b
    if spec.kind == "conv2d":
        w, b = wb
        return _conv.conv_forward(x, w, b, spec.stride, spec.padding)
    if spec.kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if spec.kind == "avgpool":
        return _conv.avgpool_forward(x, spec.kernel)
    raise InputError(f"apply_layer cannot handle {spec.kind}")


def layer_params(params, head):
    """Per-trunk-layer (W, b) or None, followed by the head's (W, b)."""
    it = iter(params.layers)
    per = [next(it) if s.has_params else None for s in params.arch]
    return per + [params.heads[head]]


def forward(params, x, head=0, gates=None):
    """Run the network on a batch.

    If `gates` is given (one array per relu layer, broadcastable to the layer
    shape) each relu is replaced by multiplication with that fixed gate, which
    turns the network into a gated linear network.
    """
    _check_head(params, head)
    x = as_batch(params, x)
    wbs = layer_params(params, head)
    inputs, used_gates = [x], []
    h, r = x, 0
    for spec, wb in zip(params.arch, wbs):
        if spec.kind == "relu":
            if gates is None:
                g = h > 0
                h = np.maximum(h, 0.0)
            else:
                g = gates[r]
                h = h * g
            used_gates.append(g)
            r += 1
        else:
            h = apply_layer(spec, h, wb)
        inputs.append(h)
    z = apply_layer(params.head_spec, h, wbs[-1])
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite value in forward pass")
    return ForwardTrace(params.arch, inputs, used_gates, z, head)


def backward_full(params, trace, output_grad):
    """Return (parameter gradient, input gradient) of sum(output_grad * z)."""
    g = np.asarray(output_grad, dtype=float)
    if g.shape != trace.z.shape:
        raise InputError(f"output_grad shape {g.shape} does not match z {trace.z.shape}")
    wbs = layer_params(params, trace.head)
    w, _ = wbs[-1]
    h_in = trace.inputs[-1]
    head_grad = (g.T @ h_in, g.sum(axis=0))
    g = g @ w
    layer_grads = []
    r = len(trace.gates)
    for i in range(len(params.arch) - 1, -1, -1):
        spec, x_in = params.arch[i], trace.inputs[i]
        if spec.kind == "dense":
            w, _ = wbs[i]
            layer_grads.append((g.T @ x_in, g.sum(axis=0)))
            g = g @ w
        elif spec.kind == "conv2d":
            w, _ = wbs[i]
            g, dw, db = _conv.conv_backward(x_in, w, g, spec.stride, spec.padding)
            layer_grads.append((dw, db))
        elif spec.kind == "relu":
            r -= 1
            g = g * trace.gates[r]
        elif spec.kind == "flatten":
            g = g.reshape(x_in.shape)
        else:
            g = _conv.avgpool_backward(g, spec.kernel)
    layer_grads.reverse()
    heads = [(np.zeros_like(a), np.zeros_like(b)) for a, b in params.heads]
    heads[trace.head] = head_grad
    grads = NetworkParams(params.input_shape, params.arch, params.head_spec, layer_grads, heads)
    return grads, g


def backward(params, trace, output_grad):
    """Gradient of sum(output_grad * z) with respect to every parameter."""
    return backward_full(params, trace, output_grad)[0]


def jvp(params, x, direction, head=0):
    """Forward-mode directional derivative of the output along `direction`."""
    params.check_same_arch(direction)
    _check_head(params, head)
    x = as_batch(params, x)
    wbs = layer_params(params, head)
    dwbs = layer_params(direction, head)
    h, dh = x, np.zeros_like(x)
    for spec, wb, dwb in zip(params.arch, wbs, dwbs):
        if spec.kind == "relu":
            gate = h > 0
            h, dh = h * gate, dh * gate
        elif spec.has_params:
            h, dh = (
                apply_layer(spec, h, wb),
                apply_layer(spec, h, dwb) + apply_layer(spec, dh, (wb[0], None)),
            )
        else:
            h, dh = apply_layer(spec, h), apply_layer(spec, dh)
    w, _ = wbs[-1]
    return apply_layer(params.head_spec, h, dwbs[-1]) + dh @ w.T


def per_example_sq_grads(params, trace, output_grad):
    """Sum over the batch of squared per-example gradients of output_grad[i] . z[i]."""
    g = np.asarray(output_grad, dtype=float)
    if g.shape != trace.z.shape:
        raise InputError(f"output_grad shape {g.shape} does not match z {trace.z.shape}")
    wbs = layer_params(params, trace.head)
    w, _ = wbs[-1]
    h_in = trace.inputs[-1]
    head_sq = ((g**2).T @ (h_in**2), (g**2).sum(axis=0))
    g = g @ w
    layer_sq = []
    r = len(trace.gates)
    for i in range(len(params.arch) - 1, -1, -1):
        spec, x_in = params.arch[i], trace.inputs[i]
        if spec.kind == "dense":
            w, _ = wbs[i]
            layer_sq.append(((g**2).T @ (x_in**2), (g**2).sum(axis=0)))
            g = g @ w
        elif spec.kind == "conv2d":
            w, _ = wbs[i]
            cols = _conv.im2col(x_in, spec.kernel, spec.stride, spec.padding)
            gm = g.transpose(0, 2, 3, 1)
            dw = np.einsum("nhwo,nhwp->nop", gm, cols)
            db = gm.sum(axis=(1, 2))
            layer_sq.append(((dw**2).sum(axis=0).reshape(w.shape), (db**2).sum(axis=0)))
            g = _conv.col2im(gm @ w.reshape(w.shape[0], -1), x_in.shape, spec.kernel,
                             spec.stride, spec.padding)
        elif spec.kind == "relu":
            r -= 1
            g = g * trace.gates[r]
        elif spec.kind == "flatten":
            g = g.reshape(x_in.shape)
        else:
            g = _conv.avgpool_backward(g, spec.kernel)
    layer_sq.reverse()
    heads = [(np.zeros_like(a), np.zeros_like(b)) for a, b in params.heads]
    heads[trace.head] = head_sq
    return NetworkParams(params.input_shape, params.arch, params.head_spec, layer_sq, heads)
