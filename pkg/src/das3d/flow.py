"""Affine-coupling normalizing flow over 3D normalized errors.

Direction convention: ``forward`` maps a base sample z to data x,
``inverse`` maps x back to z. Both return the log|det| of their own
Jacobian, so the two sum to zero at corresponding points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numgrid as ng
from .numgrid import NonFiniteError, Tensor

BASES = ("gaussian", "laplace")
LOG_2PI = math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)


def base_log_prob(z, kind: str = "gaussian") -> Tensor:
    """Independent standard base density, summed over the last axis."""
    z = ng.as_tensor(z)
    if kind == "gaussian":
        per_dim = (z * z) * -0.5 - 0.5 * LOG_2PI
    elif kind == "laplace":
        per_dim = ng.tabs(z) * -1.0 - LOG_2
    else:
        raise ValueError(f"unknown base distribution {kind!r}")
    return per_dim.sum(axis=-1)


def base_sample(n: int, dim: int, kind: str, rng: np.random.Generator) -> np.ndarray:
    if kind == "gaussian":
        return rng.standard_normal((n, dim))
    if kind == "laplace":
        return rng.laplace(0.0, 1.0, (n, dim))
    raise ValueError(f"unknown base distribution {kind!r}")


class MLP:
    """One hidden tanh layer."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int):
        self.w1 = Tensor(np.zeros((n_in, n_hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros(n_hidden), requires_grad=True)
        self.w2 = Tensor(np.zeros((n_hidden, n_out)), requires_grad=True)
        self.b2 = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x) -> Tensor:
        h = ng.tanh(ng.matmul(x, self.w1) + self.b1)
        return ng.matmul(h, self.w2) + self.b2

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def randomize(self, rng: np.random.Generator, scale: float, out_scale: float | None = None):
        n_in, n_hidden = self.w1.shape
        self.w1.data = rng.normal(0.0, scale / math.sqrt(n_in), self.w1.shape)
        self.b1.data = rng.normal(0.0, scale, self.b1.shape)
        out_scale = scale if out_scale is None else out_scale
        self.w2.data = rng.normal(0.0, out_scale / math.sqrt(n_hidden), self.w2.shape)
        self.b2.data = rng.normal(0.0, out_scale * 0.1, self.b2.shape)

    def to_list(self) -> list:
        return [p.data.tolist() for p in self.parameters()]

    def load_list(self, values: list) -> None:
        for p, v in zip(self.parameters(), values):
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"weight shape {arr.shape} != {p.shape}")
            p.data = arr


class CouplingLayer:
    def __init__(self, mask, hidden: int = 16, s_max: float = 2.0):
        mask = tuple(bool(m) for m in mask)
        self.mask = mask
        self.cond = np.array([i for i, m in enumerate(mask) if m])
        self.trans = np.array([i for i, m in enumerate(mask) if not m])
        if len(self.cond) == 0 or len(self.trans) == 0:
            raise ValueError("coupling mask must split the dimensions")
        self.perm = np.argsort(np.concatenate([self.cond, self.trans]))
        self.s_max = float(s_max)
        self.scale_net = MLP(len(self.cond), hidden, len(self.trans))
        self.translate_net = MLP(len(self.cond), hidden, len(self.trans))

    def _st(self, cond):
        s = ng.tanh(self.scale_net(cond)) * self.s_max
        t = self.translate_net(cond)
        return s, t

    def _merge(self, cond, trans) -> Tensor:
        return ng.concat([cond, trans], axis=-1)[..., self.perm]

    def forward(self, z):
        cond, trans = z[..., self.cond], z[..., self.trans]
        s, t = self._st(cond)
        out = trans * ng.exp(s) + t
        return self._merge(cond, out), s.sum(axis=-1)

    def inverse(self, x):
        cond, trans = x[..., self.cond], x[..., self.trans]
        s, t = self._st(cond)
        out = (trans - t) * ng.exp(s * -1.0)
        return self._merge(cond, out), s.sum(axis=-1) * -1.0

    def parameters(self) -> list[Tensor]:
        return self.scale_net.parameters() + self.translate_net.parameters()


def default_masks(n_layers: int, dim: int = 3) -> list[tuple[bool, ...]]:
    first = tuple(i < dim - 1 for i in range(dim))     # condition on {0, 1}
    second = tuple(not m for m in first)                # condition on {2}
    return [first if i % 2 == 0 else second for i in range(n_layers)]


class FlowModel:
    def __init__(self, n_layers: int = 4, hidden: int = 16, s_max: float = 2.0,
                 base: str = "gaussian", dim: int = 3, masks=None):
        if base not in BASES:
            raise ValueError(f"unknown base distribution {base!r}")
        self.dim = dim
        self.base = base
        self.hidden = hidden
        self.s_max = s_max
        masks = default_masks(n_layers, dim) if masks is None else masks
        self.layers = [CouplingLayer(m, hidden, s_max) for m in masks]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def randomize(self, rng: np.random.Generator, scale: float = 0.5,
                  out_scale: float | None = None) -> "FlowModel":
        """Random weights; ``out_scale=0`` keeps the identity map but breaks the
        zero-weight saddle so that hidden units receive gradient."""
        for layer in self.layers:
            layer.scale_net.randomize(rng, scale, out_scale)
            layer.translate_net.randomize(rng, scale, out_scale)
        return self

    def forward(self, z):
        x = ng.as_tensor(z)
        total = ng.Tensor(np.zeros(x.shape[:-1]))
        for layer in self.layers:
            x, ld = layer.forward(x)
            total = total + ld
        _check_finite(x, total)
        return x, total

    def inverse(self, x):
        z = ng.as_tensor(x)
        total = ng.Tensor(np.zeros(z.shape[:-1]))
        for layer in reversed(self.layers):
            z, ld = layer.inverse(z)
            total = total + ld
        _check_finite(z, total)
        return z, total

    def log_prob(self, x) -> Tensor:
        z, ld = self.inverse(x)
        return base_log_prob(z, self.base) + ld

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        z = base_sample(n, self.dim, self.base, rng)
        return self.forward(z)[0].data

    def to_dict(self) -> dict:
        return {
            "base": self.base,
            "dim": self.dim,
            "hidden": self.hidden,
            "s_max": self.s_max,
            "layers": [{"mask": [int(m) for m in layer.mask],
                        "scale_weights": layer.scale_net.to_list(),
                        "translate_weights": layer.translate_net.to_list()}
                       for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FlowModel":
        masks = [tuple(bool(m) for m in layer["mask"]) for layer in d["layers"]]
        model = cls(len(masks), int(d.get("hidden", 16)), float(d.get("s_max", 2.0)),
                    d.get("base", "gaussian"), int(d.get("dim", 3)), masks)
        for layer, spec in zip(model.layers, d["layers"]):
            layer.scale_net.load_list(spec["scale_weights"])
            layer.translate_net.load_list(spec["translate_weights"])
        return model


def _check_finite(x: Tensor, ld: Tensor) -> None:
    if not (np.all(np.isfinite(x.data)) and np.all(np.isfinite(ld.data))):
        raise NonFiniteError("flow produced a non-finite value")


def flow_transform(v, direction: str, model: FlowModel):
    """Apply the flow to v; returns (output, log_det) as tensors."""
    if direction == "forward":
        return model.forward(v)
    if direction == "inverse":
        return model.inverse(v)
    raise ValueError(f"direction must be 'forward' or 'inverse', not {direction!r}")


def log_prob(x, model: FlowModel) -> Tensor:
    return model.log_prob(x)


def sample(n: int, model: FlowModel, rng: np.random.Generator) -> np.ndarray:
    return model.sample(n, rng)


def excess_kurtosis(samples: np.ndarray, n_batches: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension excess kurtosis and its batch-means standard error."""
    x = np.asarray(samples, dtype=np.float64)

    def kurt(a):
        c = a - a.mean(axis=0)
        m2 = (c ** 2).mean(axis=0)
        return (c ** 4).mean(axis=0) / m2 ** 2 - 3.0

    batches = np.array_split(x, n_batches)
    per_batch = np.array([kurt(b) for b in batches])
    se = per_batch.std(axis=0, ddof=1) / math.sqrt(n_batches)
    return kurt(x), se


@dataclass
class DensityGrid:
    axis: np.ndarray
    density: np.ndarray   # joint density on the full grid, shape (n, n, n)
    step: float


def density_grid(model: FlowModel, lo: float = -6.0, hi: float = 6.0,
                 step: float = 0.25, chunk: int = 40000) -> DensityGrid:
    axis = np.arange(lo, hi + step / 2, step)
    zz = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    out = np.empty(len(zz))
    for i in range(0, len(zz), chunk):
        out[i:i + chunk] = np.exp(model.log_prob(zz[i:i + chunk]).data)
    n = len(axis)
    return DensityGrid(axis, out.reshape(n, n, n), step)


def integrate_density(model: FlowModel, lo: float = -6.0, hi: float = 6.0,
                      step: float = 0.25) -> float:
    """Trapezoidal integral of exp(log_prob) over the cube [lo, hi]^3."""
    g = density_grid(model, lo, hi, step)
    w = np.full(len(g.axis), step)
    w[0] = w[-1] = step / 2
    return float(np.einsum("i,j,k,ijk->", w, w, w, g.density))
