"""Parameter containers and the small layer zoo used by the detector."""
import numpy as np

from . import ops
from .tensor import Tensor, default_dtype


class Parameter(Tensor):
    """Trainable leaf tensor that remembers which initializer produced it."""

    def __init__(self, data, init="given"):
        super().__init__(data, requires_grad=True)
        self.init = init


def trunc_normal(rng, shape, std=0.02):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return Parameter(out * std, init=f"trunc_normal(std={std})")


def xavier_uniform(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(rng.uniform(-bound, bound, shape), init="xavier_uniform")


def zeros(shape):
    return Parameter(np.zeros(shape), init="zeros")


def ones(shape):
    return Parameter(np.ones(shape), init="ones")


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix=""):
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_params(self):
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        if strict:
            missing = set(params) - set(state)
            unexpected = set(state) - set(params)
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, value in state.items():
            if name not in params:
                continue
            p = params[name]
            value = np.asarray(value)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True, std=0.02):
        self.weight = trunc_normal(rng, (out_dim, in_dim), std)
        self.bias = zeros((out_dim,)) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-6):
        self.weight = ones((dim,))
        self.bias = zeros((dim,))
        self.eps = eps

    def forward(self, x):
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=0, bias=True):
        fan_in, fan_out = cin * kernel * kernel, cout * kernel * kernel
        self.weight = xavier_uniform(rng, (cout, cin, kernel, kernel), fan_in, fan_out)
        self.bias = zeros((cout,)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=2, groups=1, bias=True):
        fan_in = (cin // groups) * kernel * kernel
        fan_out = (cout // groups) * kernel * kernel
        self.weight = xavier_uniform(rng, (cin, cout // groups, kernel, kernel), fan_in, fan_out)
        self.bias = zeros((cout,)) if bias else None
        self.stride = stride
        self.groups = groups

    def forward(self, x):
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride, 0, self.groups)


class Attention(Module):
    def __init__(self, dim, num_heads, rng):
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x):
        B, N, D = x.shape
        h = self.num_heads
        qkv = self.qkv(x).reshape(B, N, 3, h, D // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = ops.softmax(ops.matmul(q * self.scale, k.transpose(0, 1, 3, 2)), axis=-1)
        out = ops.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, N, D)
        return self.proj(out)


class Mlp(Module):
    def __init__(self, dim, hidden, rng):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(ops.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, dim, num_heads, mlp_ratio, rng, drop_path=0.0):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, num_heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)
        self.drop_path = drop_path
        self.rng = rng

    def forward(self, x):
        x = x + ops.drop_path(self.attn(self.norm1(x)), self.drop_path, self.training, self.rng)
        x = x + ops.drop_path(self.mlp(self.norm2(x)), self.drop_path, self.training, self.rng)
        return x


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))
