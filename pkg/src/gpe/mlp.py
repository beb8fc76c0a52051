"""Dense layer stacks with manual backpropagation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

ACTIVATIONS = ("relu", "none")


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    @property
    def shape(self):
        return self.weight.shape


class MLP:
    def __init__(self, layers):
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if b.weight.shape[1] != a.weight.shape[0]:
                raise ConfigError(f"layer widths do not chain: {a.weight.shape} -> {b.weight.shape}")
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.weight.shape[0],):
                raise ConfigError("bias length must equal layer output width")

    @classmethod
    def create(cls, widths, rng, final_activation="none", zero_last=False):
        """He-uniform initialised stack with ReLU on all but the last layer."""
        layers = []
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = np.sqrt(6.0 / n_in)
            w = rng.uniform(-bound, bound, size=(n_out, n_in))
            b = np.zeros(n_out)
            last = i == len(widths) - 2
            if last and zero_last:
                w = np.zeros_like(w)
            layers.append(Layer(w, b, final_activation if last else "relu"))
        return cls(layers)

    @property
    def widths(self):
        return [self.layers[0].weight.shape[1]] + [layer.weight.shape[0] for layer in self.layers]

    @property
    def n_params(self):
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def copy(self):
        return MLP([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def params(self, prefix):
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.weight"] = layer.weight
            out[f"{prefix}.{i}.bias"] = layer.bias
        return out

    def __call__(self, x):
        for layer in self.layers:
            x = x @ layer.weight.T + layer.bias
            if layer.activation == "relu":
                x = np.maximum(x, 0.0)
        return x

    def forward(self, x, upto=None):
        """Forward pass keeping each layer's input for :meth:`backward`.

        ``upto`` stops after that many layers.
        """
        inputs = []
        layers = self.layers if upto is None else self.layers[:upto]
        for layer in layers:
            inputs.append(x)
            x = x @ layer.weight.T + layer.bias
            if layer.activation == "relu":
                x = np.maximum(x, 0.0)
        return x, inputs

    def backward(self, inputs, out, dout, prefix, grads, first=0):
        """Accumulate parameter gradients into ``grads``; return d(input).

        ``inputs`` and ``out`` come from :meth:`forward`; ``first`` is the
        index of the layer that received ``inputs[0]`` (for partial stacks).
        """
        n = len(inputs)
        for j in range(n - 1, -1, -1):
            layer = self.layers[first + j]
            y = out if j == n - 1 else inputs[j + 1]
            if layer.activation == "relu":
                dout = dout * (y > 0)
            x = inputs[j]
            grads[f"{prefix}.{first + j}.weight"] = dout.T @ x
            grads[f"{prefix}.{first + j}.bias"] = dout.sum(axis=0)
            dout = dout @ layer.weight
        return dout
