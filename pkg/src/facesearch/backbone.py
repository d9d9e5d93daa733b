"""Configurable MLP embedding network with an exact FLOPs cost model.

A base architecture (hidden-layer count L, hidden width H) is scaled by a
depth expansion ratio and a width expansion ratio; both products are rounded
half-up.  Hidden layers use ReLU, the output layer is linear, parameters are
f64.  Forward/backward are written out explicitly so gradients are exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

_MAGIC = b"FSNW"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class BaseArch:
    input_dim: int
    base_depth: int  # hidden layers in the unscaled network
    base_width: int
    embed_dim: int

    def __post_init__(self) -> None:
        if self.base_depth < 1 or self.base_width < 2 or self.embed_dim < 2:
            raise ValueError("base_depth >= 1, base_width >= 2, embed_dim >= 2 required")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")


@dataclass(frozen=True)
class NetworkConfig:
    layer_dims: tuple[int, ...]
    depth_ratio: float
    width_ratio: float


@dataclass
class Network:
    weights: list[np.ndarray]  # (fan_in, fan_out) per affine layer
    biases: list[np.ndarray]
    config: NetworkConfig


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def expand(base: BaseArch, depth_ratio: float, width_ratio: float) -> NetworkConfig:
    depth = round_half_up(depth_ratio * base.base_depth)
    width = round_half_up(width_ratio * base.base_width)
    if depth < 1:
        raise ValueError(f"depth ratio {depth_ratio} yields {depth} hidden layers")
    if width < 2:
        raise ValueError(f"width ratio {width_ratio} yields hidden width {width}")
    dims = (base.input_dim,) + (width,) * depth + (base.embed_dim,)
    return NetworkConfig(layer_dims=dims, depth_ratio=depth_ratio, width_ratio=width_ratio)


def instantiate(
    base: BaseArch, depth_ratio: float, width_ratio: float, seed
) -> Network:
    """He-uniform weights, zero biases; deterministic under seed."""
    cfg = expand(base, depth_ratio, width_ratio)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(cfg.layer_dims, cfg.layer_dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Network(weights=weights, biases=biases, config=cfg)


def flops(cfg: NetworkConfig) -> int:
    """2 * fan_in * fan_out per affine layer; biases and activations excluded."""
    return int(sum(2 * a * b for a, b in zip(cfg.layer_dims, cfg.layer_dims[1:])))


def forward(net: Network, batch: np.ndarray) -> tuple[np.ndarray, dict]:
    """Affine+ReLU stack; returns raw (unnormalized) embeddings and a cache."""
    if batch.ndim != 2 or batch.shape[1] != net.config.layer_dims[0]:
        raise ValueError(
            f"batch of width {batch.shape[-1]} does not match input_dim "
            f"{net.config.layer_dims[0]}"
        )
    inputs = [batch]
    preacts = []
    a = batch
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w + b
        preacts.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        if i != last:
            inputs.append(a)
    cache = {"inputs": inputs, "preacts": preacts, "n": batch.shape[0]}
    return a, cache


def backward(
    net: Network, cache: dict, grad_embeddings: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Exact parameter gradients given d(loss)/d(embeddings)."""
    inputs, preacts = cache["inputs"], cache["preacts"]
    if len(inputs) != len(net.weights) or grad_embeddings.shape != preacts[-1].shape:
        raise ValueError("cache does not match this network/upstream gradient")
    grad_w = [np.empty(0)] * len(net.weights)
    grad_b = [np.empty(0)] * len(net.weights)
    g = grad_embeddings
    for i in range(len(net.weights) - 1, -1, -1):
        grad_w[i] = inputs[i].T @ g
        grad_b[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ net.weights[i].T) * (preacts[i - 1] > 0.0)
    return grad_w, grad_b


def save_network(net: Network, path: str) -> None:
    dims = net.config.layer_dims
    header = _MAGIC + struct.pack("<IQ", _FORMAT_VERSION, len(dims))
    header += struct.pack(f"<{len(dims)}Q", *dims)
    header += struct.pack("<dd", net.config.depth_ratio, net.config.width_ratio)
    with open(path, "wb") as fh:
        fh.write(header)
        for w, b in zip(net.weights, net.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_network(path: str) -> Network:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a network checkpoint (bad magic)")
    version, ndims = struct.unpack("<IQ", blob[4:16])
    if version != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    dims = struct.unpack(f"<{ndims}Q", blob[off : off + 8 * ndims])
    off += 8 * ndims
    depth_ratio, width_ratio = struct.unpack("<dd", blob[off : off + 16])
    off += 16
    weights, biases = [], []
    for fan_in, fan_out in zip(dims, dims[1:]):
        w = np.frombuffer(blob, dtype="<f8", count=fan_in * fan_out, offset=off)
        off += w.nbytes
        b = np.frombuffer(blob, dtype="<f8", count=fan_out, offset=off)
        off += b.nbytes
        weights.append(w.reshape(fan_in, fan_out).copy())
        biases.append(b.copy())
    cfg = NetworkConfig(
        layer_dims=tuple(int(d) for d in dims),
        depth_ratio=depth_ratio,
        width_ratio=width_ratio,
    )
    return Network(weights=weights, biases=biases, config=cfg)
