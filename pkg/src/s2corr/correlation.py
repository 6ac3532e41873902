"""Initial text-image correlation map and its lift into the embedding volume."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import DimensionError, as_tensor, l2_normalize_rows, matmul

DEFAULT_D_F = 128


@dataclass
class FeatureGrid:
    height: int
    width: int
    values: np.ndarray  # (H*W, d), row-major over the grid

    def __post_init__(self):
        self.values = as_tensor(self.values)
        if self.values.ndim != 2 or self.values.shape[0] != self.height * self.width:
            raise DimensionError(
                f"visual features {self.values.shape} do not match grid {self.height}x{self.width}"
            )

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class TextEmbeddings:
    values: np.ndarray  # (N_C, d)
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = as_tensor(self.values)
        if self.values.ndim != 2:
            raise DimensionError(f"text embeddings must be 2-D, got {self.values.shape}")
        if not self.class_names:
            self.class_names = [f"class_{j}" for j in range(self.values.shape[0])]
        if len(self.class_names) != self.values.shape[0]:
            raise DimensionError(
                f"{len(self.class_names)} class names for {self.values.shape[0]} embeddings"
            )
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("class names must be unique")

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class CorrelationMap:
    height: int
    width: int
    values: np.ndarray  # (H*W, N_C)

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]


@dataclass
class CorrelationVolume:
    height: int
    width: int
    values: np.ndarray  # (H*W, N_C, d_f)

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]

    @property
    def d_f(self) -> int:
        return self.values.shape[2]


@dataclass
class LiftParams:
    P: np.ndarray  # (d_f, N_C)

    @classmethod
    def init(cls, d_f: int, num_classes: int, rng: np.random.Generator, dtype=np.float64):
        bound = 1.0 / np.sqrt(d_f)
        return cls(rng.uniform(-bound, bound, size=(d_f, num_classes)).astype(dtype))


def initial_correlation(fv: FeatureGrid, ft: TextEmbeddings, eps: float = 1e-8) -> CorrelationMap:
    """Cosine similarity between every grid token and every class embedding."""
    if fv.dim != ft.dim:
        raise DimensionError(f"visual dim {fv.dim} != text dim {ft.dim}")
    v = l2_normalize_rows(fv.values, eps)
    t = l2_normalize_rows(ft.values, eps)
    return CorrelationMap(fv.height, fv.width, matmul(v, np.ascontiguousarray(t.T)))


def lift(c: CorrelationMap, p: LiftParams) -> CorrelationVolume:
    """E[i, j, :] = C[i, j] * P[:, j]."""
    if p.P.ndim != 2 or p.P.shape[1] != c.num_classes:
        raise DimensionError(f"projection {p.P.shape} does not have {c.num_classes} columns")
    return CorrelationVolume(c.height, c.width, c.values[:, :, None] * p.P.T[None, :, :])


def lift_backward(c: CorrelationMap, p: LiftParams, d_volume: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``lift`` w.r.t. (C, P) given the upstream volume gradient."""
    d_c = np.sum(d_volume * p.P.T[None, :, :], axis=2)
    d_p = np.sum(d_volume * c.values[:, :, None], axis=0).T
    return d_c, np.ascontiguousarray(d_p)
