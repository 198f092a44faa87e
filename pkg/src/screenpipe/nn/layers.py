"""Layer objects with parameters, trainable flags and train/eval modes."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from . import functional as F
from .tensor import Parameter


def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Layer:
    """Base class. Subclasses set ``kind`` and implement :meth:`forward`."""

    kind = "layer"

    def __init__(self):
        self.training = True

    def __call__(self, *args):
        return self.forward(*args)

    def forward(self, x):
        raise NotImplementedError

    # parameters owned directly by this layer
    def own_parameters(self):
        return []

    # non-trainable state arrays (e.g. running statistics) that snapshots keep
    def own_buffers(self):
        return []

    def children(self):
        return []

    def layers(self):
        """All layers in the tree, depth-first, including ``self``."""
        out = [self]
        for child in self.children():
            out.extend(child.layers())
        return out

    def parameters(self):
        return [p for layer in self.layers() for p in layer.own_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def train(self, mode=True):
        for layer in self.layers():
            layer.training = mode
        return self

    def eval(self):
        return self.train(False)

    def freeze(self):
        for p in self.parameters():
            p.trainable = False
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.trainable = True
        return self

    @property
    def frozen(self):
        params = self.parameters()
        return bool(params) and not any(p.trainable for p in params)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def __repr__(self):
        return f"{type(self).__name__}()"


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(he_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in), name="conv.w")
        self.bias = Parameter(np.zeros(out_ch), name="conv.b")

    def own_parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def __repr__(self):
        k, c, kh, _ = self.weight.shape
        return f"Conv2d({c}->{k}, k={kh}, s={self.stride}, p={self.padding})"


class ConvTranspose2d(Layer):
    kind = "conv2d-transpose"

    def __init__(self, in_ch, out_ch, kernel=4, stride=2, padding=1, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kernel * kernel // (stride * stride)
        self.weight = Parameter(he_normal(rng, (in_ch, out_ch, kernel, kernel), fan_in), name="convT.w")
        self.bias = Parameter(np.zeros(out_ch), name="convT.b")

    def own_parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        return F.conv2d_transpose(x, self.weight, self.bias, self.stride, self.padding)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, rng=None, zero_init=False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        w = np.zeros((in_features, out_features)) if zero_init else he_normal(
            rng, (in_features, out_features), in_features
        )
        self.weight = Parameter(w, name="dense.w")
        self.bias = Parameter(np.zeros(out_features), name="dense.b")

    def own_parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        return F.dense(x, self.weight, self.bias)

    def __repr__(self):
        return f"Dense({self.weight.shape[0]}->{self.weight.shape[1]})"


class MaxPool2x2(Layer):
    kind = "maxpool2x2"

    def forward(self, x):
        return F.maxpool2x2(x)


class Upsample2x(Layer):
    kind = "upsample2x"

    def forward(self, x):
        return F.upsample2x(x)


class Concat(Layer):
    kind = "concat"

    def forward(self, *xs):
        return F.concat(xs, axis=1)


class _Elementwise(Layer):
    def __repr__(self):
        return f"{type(self).__name__}()"


class ReLU(_Elementwise):
    kind = "relu"

    def forward(self, x):
        return F.relu(x)


class LeakyReLU(_Elementwise):
    kind = "leaky-relu"

    def __init__(self, slope=0.2):
        super().__init__()
        self.slope = slope

    def forward(self, x):
        return F.leaky_relu(x, self.slope)


class Sigmoid(_Elementwise):
    kind = "sigmoid"

    def forward(self, x):
        return F.sigmoid(x)


class Tanh(_Elementwise):
    kind = "tanh"

    def forward(self, x):
        return F.tanh(x)


class Softmax(_Elementwise):
    kind = "softmax"

    def forward(self, x):
        return F.softmax(x, axis=1)


class Dropout(Layer):
    """Inverted dropout. Each training call draws a fresh mask seed from a
    generator seeded at construction, so a run is reproducible end to end."""

    kind = "dropout"

    def __init__(self, rate, seed=0):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def reseed(self, seed):
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            return x
        return F.dropout(x, self.rate, int(self._rng.integers(2**63)), training=True)


class BatchNorm2d(Layer):
    kind = "batchnorm2d"

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels), name="bn.gamma")
        self.beta = Parameter(np.zeros(channels), name="bn.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def own_parameters(self):
        return [self.gamma, self.beta]

    def own_buffers(self):
        return [self.running_mean, self.running_var]

    def forward(self, x):
        return F.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class GlobalAvgPool(Layer):
    kind = "global-avg-pool"

    def forward(self, x):
        return F.global_avg_pool(x)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        return F.flatten(x)


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, *shape):
        super().__init__()
        self.shape = shape

    def forward(self, x):
        return x.reshape((x.shape[0],) + self.shape)


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, *layers):
        super().__init__()
        self.items = list(layers)

    def children(self):
        return list(self.items)

    def forward(self, x):
        for layer in self.items:
            x = layer(x)
        return x

    def __getitem__(self, i):
        return self.items[i]

    def __len__(self):
        return len(self.items)

    def __repr__(self):
        inner = "\n".join(f"  {layer!r}" for layer in self.items)
        return f"Sequential(\n{inner}\n)"
