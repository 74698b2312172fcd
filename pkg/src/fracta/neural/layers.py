"""Minimal layers with hand-written backward passes.

Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``self.grads`` during ``backward``.
Calling ``backward`` returns the gradient with respect to the layer input.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Layer:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def zero_grad(self):
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


def _he_uniform(rng, fan_in, shape, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Layer):
    def __init__(self, n_in, n_out, rng, dtype=np.float64):
        super().__init__()
        self.params["weight"] = _he_uniform(rng, n_in, (n_in, n_out), dtype)
        bound = 1.0 / np.sqrt(n_in)
        self.params["bias"] = rng.uniform(-bound, bound, size=n_out).astype(dtype)
        self.zero_grad()

    def forward(self, x, train=False):
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, grad):
        self.grads["weight"] += self._x.T @ grad
        self.grads["bias"] += grad.sum(axis=0)
        return grad @ self.params["weight"].T


class LeakyReLU(Layer):
    def __init__(self, slope=0.01):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=False):
        self._positive = x > 0
        return np.where(self._positive, x, self.slope * x)

    def backward(self, grad):
        return np.where(self._positive, grad, self.slope * grad)


class BatchNorm(Layer):
    """Batch normalization over axis 0.

    Training mode normalizes with batch statistics and updates the running
    estimates as ``running = momentum * running + (1 - momentum) * batch``.
    Otherwise the running estimates are used as fixed constants.
    """

    def __init__(self, width, momentum=0.9, eps=1e-5, dtype=np.float64):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(width, dtype=dtype)
        self.params["beta"] = np.zeros(width, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(width, dtype=dtype)
        self.buffers["running_var"] = np.ones(width, dtype=dtype)
        self.update_running = True
        self.zero_grad()

    def forward(self, x, train=False):
        self._train = train
        if train:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            if self.update_running:
                m = self.momentum
                self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mean
                self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        self._inv_std = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x - mean) * self._inv_std
        return self._xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, grad):
        self.grads["gamma"] += (grad * self._xhat).sum(axis=0)
        self.grads["beta"] += grad.sum(axis=0)
        g = grad * self.params["gamma"]
        if not self._train:
            return g * self._inv_std
        n = len(g)
        return (self._inv_std / n) * (
            n * g - g.sum(axis=0) - self._xhat * (g * self._xhat).sum(axis=0)
        )


class Conv2d(Layer):
    """3x3 convolution, padding 1, on (batch, channels, height, width) inputs."""

    def __init__(self, c_in, c_out, rng, stride=2, dtype=np.float64):
        super().__init__()
        self.stride = stride
        self.params["weight"] = _he_uniform(rng, 9 * c_in, (c_out, c_in, 3, 3), dtype)
        bound = 1.0 / np.sqrt(9 * c_in)
        self.params["bias"] = rng.uniform(-bound, bound, size=c_out).astype(dtype)
        self.zero_grad()

    def forward(self, x, train=False):
        b, c, h, w = x.shape
        s = self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::s, ::s]
        ho, wo = win.shape[2], win.shape[3]
        # (b, ho, wo, c, 3, 3) -> rows of c*9
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * 9)
        self._cols = cols
        self._shape = (b, c, h, w, ho, wo)
        wmat = self.params["weight"].reshape(len(self.params["bias"]), -1)
        out = cols @ wmat.T + self.params["bias"]
        return out.reshape(b, ho, wo, -1).transpose(0, 3, 1, 2)

    def backward(self, grad):
        b, c, h, w, ho, wo = self._shape
        s = self.stride
        c_out = grad.shape[1]
        g = grad.transpose(0, 2, 3, 1).reshape(-1, c_out)
        self.grads["weight"] += (g.T @ self._cols).reshape(self.params["weight"].shape)
        self.grads["bias"] += g.sum(axis=0)
        dcols = (g @ self.params["weight"].reshape(c_out, -1)).reshape(b, ho, wo, c, 3, 3)
        dxp = np.zeros((b, c, h + 2, w + 2), dtype=grad.dtype)
        for ki in range(3):
            for kj in range(3):
                dxp[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += dcols[..., ki, kj].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1]


class GlobalAvgPool(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        b, c, h, w = self._shape
        return np.broadcast_to(grad[:, :, None, None] / (h * w), self._shape).copy()


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def children(self):
        return self.layers


class ResidualBlock(Layer):
    """Pre-activation block: x + fc2(act(bn2(fc1(act(bn1(x))))))."""

    def __init__(self, width, rng, slope=0.01, momentum=0.9, dtype=np.float64):
        super().__init__()
        self.branch = Sequential(
            BatchNorm(width, momentum, dtype=dtype), LeakyReLU(slope), Linear(width, width, rng, dtype),
            BatchNorm(width, momentum, dtype=dtype), LeakyReLU(slope), Linear(width, width, rng, dtype),
        )

    def forward(self, x, train=False):
        return x + self.branch.forward(x, train)

    def backward(self, grad):
        return grad + self.branch.backward(grad)

    def children(self):
        return [self.branch]


def walk(layer):
    """Depth-first list of leaf layers, in a fixed order."""
    kids = getattr(layer, "children", None)
    if kids is None:
        return [layer]
    out = []
    for child in kids():
        out.extend(walk(child))
    return out


class Adam:
    def __init__(self, lr=2e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = None
        self.v = None

    def init_state(self, params):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        if self.m is None:
            self.init_state(params)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
