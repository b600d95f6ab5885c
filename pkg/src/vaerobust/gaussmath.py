"""Diagonal Gaussian algebra in log-variance form.

All functions accept batched parameters of shape ``(..., M)`` and reduce over
the last axis only, so a batch of posteriors yields a batch of divergences.
"""
from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

LV_MIN = -10.0
LV_MAX = 10.0
LOG_2PI = math.log(2.0 * math.pi)


class DiagGaussian:
    """N(mean, diag(exp(log_var))); log_var is clamped to [LV_MIN, LV_MAX]."""

    __slots__ = ("mean", "log_var")

    def __init__(self, mean, log_var):
        mean, log_var = dc.as_tensor(mean), dc.as_tensor(log_var)
        if mean.shape != log_var.shape or mean.ndim == 0 or mean.shape[-1] < 1:
            raise ValueError(f"DiagGaussian: mean {mean.shape} and log_var {log_var.shape} must match, M >= 1")
        if not (np.isfinite(mean.data).all() and np.isfinite(log_var.data).all()):
            raise ValueError("DiagGaussian: non-finite parameters")
        self.mean = mean
        self.log_var = dc.clip(log_var, LV_MIN, LV_MAX)

    @classmethod
    def standard(cls, shape) -> "DiagGaussian":
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        return cls(np.zeros(shape), np.zeros(shape))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var.data)

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.data, self.log_var.data)

    def __repr__(self) -> str:
        return f"DiagGaussian(shape={self.mean.shape})"


def _check_pair(p: DiagGaussian, q: DiagGaussian) -> None:
    if p.mean.shape[-1] != q.mean.shape[-1]:
        raise ValueError(f"dimension mismatch: {p.mean.shape[-1]} vs {q.mean.shape[-1]}")


def kl_diag(p: DiagGaussian, q: DiagGaussian) -> Tensor:
    """KL(p || q), summed over the latent axis."""
    _check_pair(p, q)
    diff = q.mean - p.mean
    terms = (
        dc.exp(p.log_var - q.log_var)
        + diff * diff * dc.exp(-q.log_var)
        - 1.0
        + q.log_var
        - p.log_var
    )
    return 0.5 * dc.sum(terms, axis=-1)


def skl(p: DiagGaussian, q: DiagGaussian) -> Tensor:
    """Symmetric KL: half of each one-sided divergence."""
    return 0.5 * kl_diag(p, q) + 0.5 * kl_diag(q, p)


def sample(p: DiagGaussian, noise) -> Tensor:
    """Reparameterized draw mean + sigma * noise."""
    noise = np.asarray(noise, dtype=float)
    if noise.shape != p.mean.shape:
        raise ValueError(f"sample: noise shape {noise.shape} != {p.mean.shape}")
    return p.mean + dc.exp(0.5 * p.log_var) * noise


def log_prob(p: DiagGaussian, z) -> Tensor:
    z = dc.as_tensor(z)
    if z.shape[-1] != p.dim:
        raise ValueError(f"log_prob: point length {z.shape[-1]} != {p.dim}")
    diff = z - p.mean
    return -0.5 * dc.sum(LOG_2PI + p.log_var + diff * diff * dc.exp(-p.log_var), axis=-1)


def entropy(p: DiagGaussian) -> np.ndarray:
    return 0.5 * np.sum(1.0 + LOG_2PI + p.log_var.data, axis=-1)
