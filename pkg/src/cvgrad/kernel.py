"""Small ReLU feature maps R^2 -> R^2 with hand-written reverse mode.

Flat parameter layout (used for checkpoints and as the hyperparameter
vector): W1 row-major, b1, W2 row-major, b2, and so on layer by layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

ARCHITECTURES = {
    "one_layer": (2, 64, 2),
    "two_layer": (2, 64, 64, 2),
}


@dataclass(frozen=True)
class KernelParams:
    layers: tuple  # ((W, b), ...) with W of shape (out, in)

    @property
    def dims(self) -> tuple:
        return (self.layers[0][0].shape[-1],) + tuple(W.shape[-2] for W, _ in self.layers)

    @property
    def n_params(self) -> int:
        return sum(W.shape[-1] * W.shape[-2] + b.shape[-1] for W, b in self.layers)

    def to_vector(self) -> np.ndarray:
        """Flatten; leading batch axes (from a batched backward pass) are kept."""
        lead = self.layers[0][1].shape[:-1]
        parts = []
        for W, b in self.layers:
            parts.append(W.reshape(lead + (-1,)))
            parts.append(b.reshape(lead + (-1,)))
        return np.concatenate(parts, axis=-1)

    @classmethod
    def from_vector(cls, vec, dims) -> KernelParams:
        vec = np.asarray(vec, dtype=float)
        expected = sum(o * i + o for i, o in zip(dims, dims[1:]))
        if vec.shape != (expected,):
            raise ValueError(f"expected {expected} parameters for dims {dims}, got {vec.shape}")
        layers, pos = [], 0
        for fan_in, fan_out in zip(dims, dims[1:]):
            W = vec[pos:pos + fan_in * fan_out].reshape(fan_out, fan_in)
            pos += fan_in * fan_out
            b = vec[pos:pos + fan_out]
            pos += fan_out
            layers.append((W.copy(), b.copy()))
        return cls(tuple(layers))


@dataclass(frozen=True)
class Tape:
    activations: tuple   # input to each layer
    preacts: tuple       # W a + b of each layer


def relu(z):
    return np.maximum(z, 0.0)


def init_kernel(arch: str = "one_layer", seed=None) -> KernelParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    dims = ARCHITECTURES[arch]
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims, dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append((rng.uniform(-bound, bound, (fan_out, fan_in)), np.zeros(fan_out)))
    return KernelParams(tuple(layers))


def kernel_forward(kp: KernelParams, X) -> tuple[np.ndarray, Tape]:
    a = np.asarray(X, dtype=float)
    if a.ndim != 2 or a.shape[1] != kp.dims[0]:
        raise ValueError(f"input of shape {a.shape} does not match kernel input dim {kp.dims[0]}")
    acts, pres = [], []
    last = len(kp.layers) - 1
    for i, (W, b) in enumerate(kp.layers):
        acts.append(a)
        z = a @ W.T + b
        pres.append(z)
        a = z if i == last else relu(z)
    return a, Tape(tuple(acts), tuple(pres))


def kernel_backward(kp: KernelParams, tape: Tape, dL_dV) -> KernelParams:
    """Gradient of a loss with respect to every weight, given dL/dV.

    ``dL_dV`` may carry leading batch axes, e.g. (K, N, 2) for one cotangent
    per fold; the returned arrays then have the same leading axes. The ReLU
    derivative at exactly zero is taken to be zero.
    """
    delta = np.asarray(dL_dV, dtype=float)
    N, out = tape.preacts[-1].shape
    if delta.shape[-2:] != (N, out):
        raise ValueError(f"cotangent shape {delta.shape} does not match output {(N, out)}")
    grads = []
    for i in range(len(kp.layers) - 1, -1, -1):
        W, _ = kp.layers[i]
        a = tape.activations[i]
        grads.append((np.einsum("...no,ni->...oi", delta, a), delta.sum(axis=-2)))
        if i:
            delta = (delta @ W) * (tape.preacts[i - 1] > 0)
    return KernelParams(tuple(reversed(grads)))


def save_kernel(path, kp: KernelParams) -> None:
    dims = ",".join(str(d) for d in kp.dims)
    lines = [f"# dims={dims}"] + [repr(float(x)) for x in kp.to_vector()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_kernel(path) -> KernelParams:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# dims="):
        raise ValueError(f"{path}: missing '# dims=' header")
    dims = tuple(int(d) for d in lines[0][len("# dims="):].split(","))
    return KernelParams.from_vector([float(x) for x in lines[1:] if x.strip()], dims)
