"""Small fully connected networks with a hand-written reverse pass."""
from __future__ import annotations

import numpy as np

ACTIVATIONS = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "relu": (lambda x: np.maximum(x, 0.0), lambda y: (y > 0).astype(np.float64)),
    "identity": (lambda x: x, lambda y: np.ones_like(y)),
}


class Mlp:
    """Dense network ``sizes[0] -> ... -> sizes[-1]``.

    The last layer is linear.  For every layer index in ``skips`` the
    network input is concatenated to that layer's input.  Parameters live
    in ``self.params`` as ``[W0, b0, W1, b1, ...]`` with ``W`` shaped
    ``(out, in)``.
    """

    def __init__(self, sizes, activation="tanh", skips=(), params=None, rng=None,
                 zero_last=True, init_scale=1.0):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.sizes = [int(s) for s in sizes]
        self.activation = activation
        self.skips = tuple(int(s) for s in skips)
        n_layers = len(self.sizes) - 1
        if n_layers < 1:
            raise ValueError("need at least one layer")
        if any(not 0 < s < n_layers for s in self.skips):
            raise ValueError("skip indices must address hidden layers")
        if params is None:
            rng = np.random.default_rng(0) if rng is None else rng
            params = []
            for i in range(n_layers):
                d_in, d_out = self.layer_dims(i)
                if i == n_layers - 1 and zero_last:
                    W = np.zeros((d_out, d_in))
                else:
                    W = rng.normal(0.0, init_scale / np.sqrt(d_in), size=(d_out, d_in))
                params += [W, np.zeros(d_out)]
        self.params = [np.array(p, dtype=np.float64) for p in params]
        for i in range(n_layers):
            if self.params[2 * i].shape != self.layer_dims(i)[::-1] or self.params[2 * i + 1].shape != (self.layer_dims(i)[1],):
                raise ValueError(f"layer {i} parameter shapes do not match sizes {self.sizes}")

    def layer_dims(self, i):
        d_in = self.sizes[i] + (self.sizes[0] if i in self.skips else 0)
        return d_in, self.sizes[i + 1]

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def out_dim(self):
        return self.sizes[-1]

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, self.activation, self.skips, params=[p.copy() for p in self.params])

    def zero_(self) -> "Mlp":
        for p in self.params:
            p[...] = 0.0
        return self

    def forward(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.in_dim:
            raise ValueError(f"input dim {X.shape[-1]} != {self.in_dim}")
        act = ACTIVATIONS[self.activation][0]
        inputs, outs = [], []
        h = X
        for i in range(self.n_layers):
            a = np.concatenate([h, X], axis=-1) if i in self.skips else h
            W, b = self.params[2 * i], self.params[2 * i + 1]
            h = a @ W.T + b
            if i < self.n_layers - 1:
                h = act(h)
            inputs.append(a)
            outs.append(h)
        return h, (X, inputs, outs)

    def __call__(self, X):
        return self.forward(X)[0]

    def backward(self, cache, g_out):
        """Gradients of ``sum(g_out * forward(X))`` w.r.t. params and ``X``."""
        X, inputs, outs = cache
        dact = ACTIVATIONS[self.activation][1]
        grads = [None] * len(self.params)
        g = np.asarray(g_out, dtype=np.float64)
        gX = np.zeros_like(X)
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                g = g * dact(outs[i])
            a = inputs[i]
            W = self.params[2 * i]
            g2 = g.reshape(-1, g.shape[-1])
            grads[2 * i] = g2.T @ a.reshape(-1, a.shape[-1])
            grads[2 * i + 1] = g2.sum(axis=0)
            ga = g @ W
            if i in self.skips:
                d = self.sizes[i]
                gX += ga[..., d:]
                ga = ga[..., :d]
            g = ga
        gX += g
        return grads, gX
