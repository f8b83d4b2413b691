"""Recursive and multi-source refinement of joint-offset maps.

A stack of n update layers defines dense maps U^1..U^n from the raw map
U^0 via

    U^{j}[q] = U^{j-1}[q] + local^{j-1}(q + U^{j-1}[q].xy)

where ``local`` is a bilinear lookup into U^{j-1} (recursive mode) or a
probability-weighted ensemble of displaced lookups (multi-source mode).
Those maps are never materialized: the stack is evaluated lazily at the
integer pixels that the final lookups actually reach, so the result is
identical to dense evaluation at a fraction of the cost.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numgrid as ng
from .flow import MLP
from .numgrid import NonFiniteError, Tensor

MODES = ("recursive", "multi_source")


@dataclass(frozen=True)
class UpdateConfig:
    n_layers: int = 3
    mode: str = "recursive"
    M: int = 4
    sampler_hidden: int = 16
    share: bool = False

    def __post_init__(self):
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UpdateConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown update config keys: {sorted(unknown)}")
        return cls(**d)


# Offsets mix level cells (xy) and mm (depth); the sampler sees them rescaled.
SAMPLER_INPUT_SCALE = np.array([0.25, 0.25, 0.005])


class SampleSourceGen:
    """Maps the current 3D offset estimate to M displacements and probabilities."""

    def __init__(self, M: int = 4, hidden: int = 16, radius: float = 1.0,
                 rng: np.random.Generator | None = None):
        self.M = M
        self.mlp = MLP(3, hidden, 3 * M)
        rng = np.random.default_rng(0) if rng is None else rng
        self.mlp.w1.data = rng.normal(0.0, 0.5, self.mlp.w1.shape)
        if M == 1:
            base = np.zeros((1, 2))
        else:
            ang = 2 * math.pi * np.arange(M) / M
            base = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
            base[np.abs(base) < 1e-12] = 0.0
        bias = np.zeros(3 * M)
        bias[: 2 * M] = base.reshape(-1)
        self.mlp.b2.data = bias

    def __call__(self, offsets):
        """offsets (N, 3) -> displacements (N, M, 2), probabilities (N, M)."""
        out = self.mlp(ng.as_tensor(offsets) * SAMPLER_INPUT_SCALE)
        n = out.shape[0]
        disp = out[:, : 2 * self.M].reshape((n, self.M, 2))
        probs = ng.softmax(out[:, 2 * self.M:], axis=-1)
        return disp, probs

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()

    def to_dict(self) -> dict:
        return {"M": self.M, "weights": self.mlp.to_list()}

    @classmethod
    def from_dict(cls, d: dict) -> "SampleSourceGen":
        gen = cls(int(d["M"]), len(d["weights"][1]))
        gen.mlp.load_list(d["weights"])
        return gen


def _as_5d(U) -> Tensor:
    """Normalize a joint-offset map to (B, H, W, K, 3)."""
    U = ng.as_tensor(U.values if isinstance(U, ng.DenseMap) else U)
    if U.ndim == 3:
        H, W, C = U.shape
        return U.reshape((1, H, W, C // 3, 3))
    if U.ndim == 4:
        return U.reshape((1,) + U.shape)
    if U.ndim == 5:
        return U
    raise ng.ShapeError(f"cannot interpret joint map of shape {U.shape}")


class _LazyStack:
    """Evaluates U^j at integer pixels (b, r, c, k) with memo-free dedup."""

    def __init__(self, U: Tensor, gens: list):
        self.U = U
        self.gens = gens
        _, self.H, self.W, self.K, _ = U.shape

    def value(self, j: int, b, r, c, k) -> Tensor:
        if j == 0:
            return self.U[b, r, c, k]
        H, W, K = self.H, self.W, self.K
        lin = ((b * H + r) * W + c) * K + k
        uniq, inv = np.unique(lin, return_inverse=True)
        if len(uniq) < len(lin):
            ub, rest = np.divmod(uniq, H * W * K)
            ur, rest = np.divmod(rest, W * K)
            uc, uk = np.divmod(rest, K)
            return self.value(j, ub, ur, uc, uk)[inv]
        prev = self.value(j - 1, b, r, c, k)
        if not np.all(np.isfinite(prev.data)):
            i = int(np.argwhere(~np.isfinite(prev.data))[0, 0])
            raise NonFiniteError(
                f"non-finite offset at scene {b[i]} pixel (row={r[i]}, col={c[i]}) joint {k[i]}")
        pix = np.stack([c, r], axis=1).astype(np.float64)
        t = prev[:, :2] + pix
        gen = self.gens[j - 1]
        if gen is None:
            local = self.sample(j - 1, b, k, t)
        else:
            disp, probs = gen(prev)
            n, M = probs.shape
            pts = (ng.reshape(t, (n, 1, 2)) + disp).reshape((n * M, 2))
            sampled = self.sample(j - 1, np.repeat(b, M), np.repeat(k, M), pts)
            lifted = ng.concat([disp, Tensor(np.zeros((n, M, 1)))], axis=-1)
            terms = (lifted + sampled.reshape((n, M, 3))) * ng.reshape(probs, (n, M, 1))
            local = terms.sum(axis=1)
        return prev + local

    def sample(self, j: int, b, k, points: Tensor) -> Tensor:
        (x0, x1, y0, y1), (wx, wy) = ng.bilinear_corners(points, self.H, self.W)
        n = len(b)
        rows = np.concatenate([y0, y0, y1, y1])
        cols = np.concatenate([x0, x1, x0, x1])
        vals = self.value(j, np.tile(b, 4), rows, cols, np.tile(k, 4))
        return ng.bilinear_combine(vals[:n], vals[n:2 * n], vals[2 * n:3 * n], vals[3 * n:],
                                   wx, wy)


class UpdateStack:
    """n update layers over the joint-offset maps, with optional samplers."""

    def __init__(self, cfg: UpdateConfig = UpdateConfig(), rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(0) if rng is None else rng
        if cfg.mode == "recursive" or cfg.n_layers == 0:
            self.gens = [None] * cfg.n_layers
        elif cfg.share:
            g = SampleSourceGen(cfg.M, cfg.sampler_hidden, rng=rng)
            self.gens = [g] * cfg.n_layers
        else:
            self.gens = [SampleSourceGen(cfg.M, cfg.sampler_hidden, rng=rng)
                         for _ in range(cfg.n_layers)]

    def parameters(self) -> list[Tensor]:
        seen, params = set(), []
        for g in self.gens:
            if g is not None and id(g) not in seen:
                seen.add(id(g))
                params.extend(g.parameters())
        return params

    def __call__(self, U, pixels) -> Tensor:
        """Refined offsets for all joints at query pixels.

        ``pixels`` is (rows, cols) for a single map or (scenes, rows, cols)
        for a batched (B, H, W, K, 3) map. Returns (N, K, 3).
        """
        U = _as_5d(U)
        if len(pixels) == 2:
            rows, cols = pixels
            scenes = np.zeros(len(np.atleast_1d(rows)), dtype=np.int64)
        else:
            scenes, rows, cols = pixels
        scenes, rows, cols = (np.atleast_1d(np.asarray(a, dtype=np.int64))
                              for a in (scenes, rows, cols))
        K = U.shape[3]
        n = len(rows)
        b = np.repeat(scenes, K)
        r = np.repeat(rows, K)
        c = np.repeat(cols, K)
        k = np.tile(np.arange(K), n)
        out = _LazyStack(U, self.gens).value(self.cfg.n_layers, b, r, c, k)
        return out.reshape((n, K, 3))

    def to_dict(self) -> dict:
        return {"config": self.cfg.to_dict(),
                "samplers": [None if g is None else g.to_dict() for g in self.gens]}

    @classmethod
    def from_dict(cls, d: dict) -> "UpdateStack":
        stack = cls(UpdateConfig.from_dict(d["config"]))
        stack.gens = [None if g is None else SampleSourceGen.from_dict(g) for g in d["samplers"]]
        return stack


def recursive_update_step(U, pixels) -> Tensor:
    """One recursive layer at query pixels; returns (N, K, 3)."""
    return UpdateStack(UpdateConfig(n_layers=1, mode="recursive"))(U, pixels)


def multi_source_update_step(U, pixels, gen: SampleSourceGen) -> Tensor:
    stack = UpdateStack(UpdateConfig(n_layers=1, mode="multi_source", M=gen.M))
    stack.gens = [gen]
    return stack(U, pixels)


def stack_updates(U, pixels, cfg: UpdateConfig = UpdateConfig(),
                  stack: UpdateStack | None = None) -> Tensor:
    stack = UpdateStack(cfg) if stack is None else stack
    return stack(U, pixels)
