"""Synthetic matrices and checkpoints with known spectral structure.

Random numbers come from Philox4x64-10 (the counter-based generator of
Salmon et al., exposed by numpy as ``numpy.random.Philox``) keyed with
``(seed, stream)``. Block j (j = 1, 2, ...) is Philox applied to the 256-bit
counter j, and its four 64-bit words are emitted in order. Raw words are
turned into standard normals with the Box-Muller transform::

    u1 = ((a >> 11) + 1) * 2**-53        in (0, 1]
    u2 = (b >> 11) * 2**-53              in [0, 1)
    z0 = sqrt(-2 ln u1) * cos(2 pi u2)
    z1 = sqrt(-2 ln u1) * sin(2 pi u2)

consuming consecutive word pairs (a, b) and emitting z0, z1 in that order.
Both steps are fully specified, so streams are reproducible on any platform
and from any language with a Philox implementation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import TensorRecord, write_fixture

__all__ = [
    "standard_normal",
    "gen_noise",
    "SpikedSpec",
    "gen_spiked",
    "gram_eigen_oracle",
    "GroupSpec",
    "gen_mini_checkpoint",
]

NOISE_STREAM = 0
LEFT_STREAM = 1
RIGHT_STREAM = 2

_MASK64 = (1 << 64) - 1


def standard_normal(count: int, seed: int, stream: int = 0) -> np.ndarray:
    """``count`` N(0, 1) draws from the (seed, stream) Philox sequence."""
    if count < 0:
        raise ValueError("count must be non-negative")
    bitgen = np.random.Philox(key=np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64))
    pairs = (count + 1) // 2
    raw = bitgen.random_raw(2 * pairs).reshape(pairs, 2)
    scale = 2.0**-53
    u1 = ((raw[:, 0] >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * scale
    u2 = (raw[:, 1] >> np.uint64(11)).astype(np.float64) * scale
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    out = np.empty((pairs, 2))
    out[:, 0] = radius * np.cos(angle)
    out[:, 1] = radius * np.sin(angle)
    return out.ravel()[:count]


def gen_noise(rows: int, cols: int, sigma: float, seed: int) -> np.ndarray:
    """rows x cols matrix of iid N(0, sigma^2), filled row-major."""
    if rows < 1 or cols < 1:
        raise ValueError("dimensions must be >= 1")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return sigma * standard_normal(rows * cols, seed, NOISE_STREAM).reshape(rows, cols)


@dataclass(frozen=True)
class SpikedSpec:
    rows: int
    cols: int
    noise_sigma: float
    spikes: tuple[float, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "spikes", tuple(float(a) for a in self.spikes))
        if len(self.spikes) > min(self.rows, self.cols):
            raise ValueError(
                f"{len(self.spikes)} spikes do not fit a {self.rows}x{self.cols} matrix"
            )
        if any(a <= 0 for a in self.spikes):
            raise ValueError("spike amplitudes must be positive")


def _orthonormal(dim: int, k: int, seed: int, stream: int) -> np.ndarray:
    g = standard_normal(dim * k, seed, stream).reshape(dim, k)
    q, r = np.linalg.qr(g)
    # fix column signs so the basis is a function of the draws, not of LAPACK
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def gen_spiked(spec: SpikedSpec) -> np.ndarray:
    """sum_i a_i u_i v_i^T + noise, with orthonormal {u_i}, {v_i}."""
    w = gen_noise(spec.rows, spec.cols, spec.noise_sigma, spec.seed)
    k = len(spec.spikes)
    if k:
        u = _orthonormal(spec.rows, k, spec.seed, LEFT_STREAM)
        v = _orthonormal(spec.cols, k, spec.seed, RIGHT_STREAM)
        w = w + (u * np.asarray(spec.spikes)) @ v.T
    return w


def gram_eigen_oracle(matrix) -> np.ndarray:
    """Eigenvalues of the smaller Gram matrix (W^T W or W W^T), descending.

    These are the squared singular values of W, obtained without an SVD.
    """
    w = np.asarray(matrix, dtype=np.float64)
    gram = w.T @ w if w.shape[0] >= w.shape[1] else w @ w.T
    eig = np.linalg.eigh(gram)[0]
    return np.clip(eig[::-1], 0.0, None)


@dataclass(frozen=True)
class GroupSpec:
    """One module type repeated across layers, e.g. ``self_attn.q_proj``.

    ``spikes`` maps a layer index to that layer's spike amplitudes. With
    ``vary_seed=False`` every layer gets the same draws, hence identical bytes.
    """

    name: str
    rows: int
    cols: int
    noise_sigma: float = 0.02
    spikes: Callable[[int], Sequence[float]] = field(default=lambda layer: ())
    seed: int = 0
    vary_seed: bool = True
    dtype: str = "float32"


def _layer_seed(spec: GroupSpec, group_index: int, layer: int) -> int:
    base = (spec.seed << 32) ^ (group_index << 20)
    return base ^ layer if spec.vary_seed else base


def gen_mini_checkpoint(
    layers: int,
    groups: Sequence[GroupSpec],
    path: str | os.PathLike,
    scale: float = 1.0,
) -> list[TensorRecord]:
    """Write a small transformer-shaped checkpoint and return its tensors.

    Names follow ``model.layers.{i}.{group}.weight``. Each layer also gets a
    1-D ``input_layernorm`` decoy, and there is a final 1-D ``model.norm``.
    ``scale`` multiplies every 2-D weight (useful for invariance checks).
    """
    if layers < 1:
        raise ValueError("need at least one layer")
    records = []
    for gi, g in enumerate(groups):
        for layer in range(layers):
            spec = SpikedSpec(g.rows, g.cols, g.noise_sigma, tuple(g.spikes(layer)), _layer_seed(g, gi, layer))
            w = scale * gen_spiked(spec)
            records.append(TensorRecord.from_array(f"model.layers.{layer}.{g.name}.weight", w, g.dtype))
    hidden = groups[0].cols if groups else 8
    for layer in range(layers):
        records.append(
            TensorRecord.from_array(f"model.layers.{layer}.input_layernorm.weight", np.ones(hidden))
        )
    records.append(TensorRecord.from_array("model.norm.weight", np.ones(hidden)))
    write_fixture(records, path)
    return records
