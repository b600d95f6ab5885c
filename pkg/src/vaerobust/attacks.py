"""Adversarial perturbations against VAE encoders.

Supervised attacks pull the posterior of ``x_ref + eps`` onto the posterior of
a target by projected descent on the symmetric KL. Unsupervised attacks push
the posterior mean as far as possible from its clean value, using the
first-order model ``||J eps||^2`` of the mean shift.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .gaussmath import skl
from .seeding import derive_seed

MODES = ("supervised", "unsupervised")
NORMS = ("l2", "linf")


class AttackError(RuntimeError):
    """Raised when the attack objective becomes non-finite; carries the trace so far."""

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


class DegenerateEncoderError(AttackError):
    pass


@dataclass
class AttackConfig:
    mode: str = "supervised"
    norm: str = "l2"
    budget: float = 1.0
    steps: int = 500
    step_size: float = 1e-2
    optimizer: str = "adam"  # adam | sgd
    init_scale: float = 0.1
    seed: int = 0
    k_A: Optional[int] = None
    power_iters: int = 50
    power_tol: float = 1e-10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if not self.budget > 0:
            raise ValueError("budget must be positive")
        if self.steps < 1 or self.power_iters < 1:
            raise ValueError("steps and power_iters must be >= 1")
        if self.k_A is not None and self.k_A < 1:
            raise ValueError("k_A must be >= 1")


@dataclass
class AttackResult:
    epsilon: np.ndarray
    x_adv: np.ndarray
    x_ref: np.ndarray
    trace: np.ndarray
    final_objective: float
    converged: bool
    mode: str
    seed: int
    steps: int
    x_target: Optional[np.ndarray] = None
    ref_id: Optional[int] = None
    target_id: Optional[int] = None
    init: Optional[int] = None
    k_A: Optional[int] = None
    sigma_max_sq: Optional[float] = None
    ok: bool = field(default=True, init=False)


@dataclass
class AttackFailure:
    ref_id: Optional[int]
    target_id: Optional[int]
    init: Optional[int]
    seed: int
    mode: str
    error: str
    k_A: Optional[int] = None
    ok: bool = field(default=False, init=False)


def norm_of(eps: np.ndarray, norm: str) -> float:
    flat = np.ravel(eps)
    return float(np.max(np.abs(flat))) if norm == "linf" else float(np.linalg.norm(flat))


def project(eps: np.ndarray, norm: str, budget: float) -> np.ndarray:
    """Euclidean projection onto the norm ball of radius ``budget``."""
    if norm == "linf":
        return np.clip(eps, -budget, budget)
    n = np.linalg.norm(eps)
    return eps * (budget / n) if n > budget else eps


def clip_to_pixels(x_ref: np.ndarray, eps: np.ndarray) -> np.ndarray:
    return np.clip(x_ref + eps, 0.0, 1.0) - x_ref


def _check_shape(model, x):
    shape = tuple(getattr(model, "input_shape", np.shape(x)))
    if np.shape(x) != shape:
        raise ValueError(f"input shape {np.shape(x)} does not match model input {shape}")


def _converged(trace: Sequence[float], tol: float = 1e-4) -> bool:
    tail = np.asarray(trace[-max(2, len(trace) // 10):])
    return bool(np.ptp(tail) <= tol * (1.0 + abs(tail[-1])))


def _descend(objective: Callable[[Tensor, int], Tensor], x_ref: np.ndarray, cfg: AttackConfig,
             eps0: np.ndarray, maximize: bool = False):
    """Projected first-order optimization over eps; returns (best eps, trace, best value)."""
    eps = eps0.copy()
    opt = dc.Adam([eps], lr=cfg.step_size) if cfg.optimizer == "adam" else None
    sign = -1.0 if maximize else 1.0
    trace: List[float] = []
    best_val, best_eps = math.inf, eps.copy()
    for step in range(cfg.steps + 1):
        e = Tensor(eps, requires_grad=True)
        obj = objective(e, step)
        val = float(obj)
        if not math.isfinite(val):
            raise AttackError(f"non-finite objective at step {step}", trace)
        trace.append(val)
        if sign * val < best_val:
            best_val, best_eps = sign * val, eps.copy()
        if step == cfg.steps:
            break
        dc.backward(obj)
        g = np.zeros_like(eps) if e.grad is None else sign * e.grad
        if opt is not None:
            opt.step([g])
        else:
            eps -= cfg.step_size * g
        eps[...] = clip_to_pixels(x_ref, project(eps, cfg.norm, cfg.budget))
        assert norm_of(eps, cfg.norm) <= cfg.budget * (1 + 1e-12), "projection violated"
    return best_eps, np.asarray(trace), sign * best_val


def _finish(cfg, x_ref, eps, trace, value, converged, **extra) -> AttackResult:
    return AttackResult(epsilon=eps, x_adv=x_ref + eps, x_ref=x_ref, trace=trace,
                        final_objective=float(value), converged=converged, mode=cfg.mode,
                        seed=cfg.seed, steps=len(trace) - 1, **extra)


def supervised_objective(model, x_ref, x_target) -> Callable[[Tensor, int], Tensor]:
    q_t = model.encode(x_target).detach()
    x_ref_t = Tensor(x_ref)

    def objective(e, step):
        return skl(model.encode(x_ref_t + e), q_t)

    return objective


def supervised_attack(model, x_ref, x_target, cfg: AttackConfig) -> AttackResult:
    """Minimize SKL[q(z | x_ref + eps), q(z | x_target)] over the norm ball."""
    x_ref, x_target = np.asarray(x_ref, float), np.asarray(x_target, float)
    _check_shape(model, x_ref)
    _check_shape(model, x_target)
    eps, trace, value = _descend(supervised_objective(model, x_ref, x_target), x_ref, cfg,
                                 np.zeros_like(x_ref))
    return _finish(cfg, x_ref, eps, trace, value, _converged(trace), x_target=x_target)


def hierarchical_skl(model, x_a, x_b, k_A: int, seed, P=None) -> Tensor:
    """Sum of per-level SKLs over the top ``k_A`` levels.

    Both posteriors at level l condition on the same z_{>l}, sampled from the
    top-down pass of ``x_a`` with noise seeded by ``seed``.
    """
    L = model.levels
    if not 1 <= k_A <= L:
        raise ValueError(f"k_A must lie in [1, {L}], got {k_A}")
    stop = L - k_A + 1
    rec_a, _ = model.top_down(x_a, P=P, seed=seed, stop=stop)
    cond = {l: rec_a[l][2] for l in rec_a}
    rec_b, _ = model.top_down(x_b, P=P, seed=seed, stop=stop, cond=cond)
    total = None
    for l in range(L, stop - 1, -1):
        term = dc.sum(skl(rec_a[l][0], rec_b[l][0]))
        total = term if total is None else total + term
    return total


def hierarchical_supervised_attack(model, x_ref, x_target, cfg: AttackConfig) -> AttackResult:
    """Supervised attack restricted to the top ``cfg.k_A`` latent levels."""
    x_ref, x_target = np.asarray(x_ref, float), np.asarray(x_target, float)
    _check_shape(model, x_ref)
    _check_shape(model, x_target)
    k_A = model.levels if cfg.k_A is None else cfg.k_A
    x_ref_t = Tensor(x_ref)

    def objective(e, step):
        return hierarchical_skl(model, x_ref_t + e, x_target, k_A, (cfg.seed, 7, step))

    eps, trace, value = _descend(objective, x_ref, cfg, np.zeros_like(x_ref))
    return _finish(cfg, x_ref, eps, trace, value, _converged(trace), x_target=x_target, k_A=k_A)


def jacobian_mu(model, x) -> np.ndarray:
    """Jacobian of the posterior mean at ``x`` as an (M, D) matrix."""
    x = np.asarray(x, float)
    m = model.encode(x).dim
    xb = Tensor(np.broadcast_to(x, (m,) + x.shape).copy(), requires_grad=True)
    mean = model.encode(xb).mean
    dc.backward(dc.sum(mean * np.eye(m)))
    return xb.grad.reshape(m, -1)


def delta_tilde(model, x_ref, eps) -> Tensor:
    """Exact squared shift of the posterior mean, ||mu(x + eps) - mu(x)||^2."""
    mu0 = model.encode(np.asarray(x_ref, float)).mean.data
    diff = model.encode(Tensor(x_ref) + dc.as_tensor(eps)).mean - mu0
    return dc.sum(diff * diff)


def _random_direction(rng, shape, norm):
    u = rng.standard_normal(shape)
    return u / norm_of(u, norm)


def unsupervised_attack(model, x_ref, cfg: AttackConfig) -> AttackResult:
    """Maximize ||J eps||^2 over the norm ball, J the posterior-mean Jacobian at ``x_ref``.

    For the L2 ball the maximizer is the top right-singular vector of J, found
    by power iteration on J^T J from a seeded start. The L-inf ball uses
    projected ascent.
    """
    x_ref = np.asarray(x_ref, float)
    _check_shape(model, x_ref)
    J = jacobian_mu(model, x_ref)
    if np.linalg.norm(J) < 1e-12:
        raise DegenerateEncoderError("encoder mean Jacobian is numerically zero")
    rng = np.random.default_rng(cfg.seed)
    rho = cfg.budget
    if cfg.norm == "l2":
        v = _random_direction(rng, J.shape[1], "l2")
        rayleigh, trace, converged = float(np.sum((J @ v) ** 2)), [], False
        for _ in range(cfg.power_iters):
            w = J.T @ (J @ v)
            v = w / np.linalg.norm(w)
            new = float(np.sum((J @ v) ** 2))
            trace.append(new * rho ** 2)
            change = abs(new - rayleigh) / max(abs(new), 1e-300)
            rayleigh = new
            if change < cfg.power_tol:
                converged = True
                break
        # +v and -v are equally optimal before clipping; keep the one clipping hurts less
        cands = [clip_to_pixels(x_ref, s * rho * v.reshape(x_ref.shape)) for s in (1.0, -1.0)]
        vals = [float(np.sum((J @ c.ravel()) ** 2)) for c in cands]
        best = int(np.argmax(vals))
        eps, value = cands[best], vals[best]
        return _finish(cfg, x_ref, eps, np.asarray(trace), value, converged,
                       sigma_max_sq=rayleigh)
    Jt = Tensor(J.T)
    eps0 = clip_to_pixels(x_ref, cfg.init_scale * rho * _random_direction(rng, x_ref.shape, "linf"))

    def objective(e, step):
        shift = dc.affine(dc.reshape(e, (1, -1)), Jt)
        return dc.sum(shift * shift)

    eps, trace, value = _descend(objective, x_ref, cfg, eps0, maximize=True)
    return _finish(cfg, x_ref, eps, trace, value, _converged(trace))


def run_attack(model, x_ref, x_target, cfg: AttackConfig) -> AttackResult:
    if cfg.mode == "unsupervised":
        return unsupervised_attack(model, x_ref, cfg)
    if x_target is None:
        raise ValueError("supervised attack needs a target")
    if hasattr(model, "levels"):
        return hierarchical_supervised_attack(model, x_ref, x_target, cfg)
    return supervised_attack(model, x_ref, x_target, cfg)


def attack_batch(model, images, plan, cfg: AttackConfig) -> list:
    """Attack every plan item; failures are recorded and the batch continues.

    ``plan`` yields ``(ref_id, target_id, init)`` triples indexing ``images``;
    item i runs with seed ``derive_seed(cfg.seed, "attack", i)``.
    """
    images = np.asarray(getattr(images, "images", images))
    out = []
    for i, (ref_id, target_id, init) in enumerate(plan):
        seed = derive_seed(cfg.seed, "attack", i)
        item_cfg = replace(cfg, seed=seed)
        x_tgt = None if target_id is None else images[target_id]
        try:
            res = run_attack(model, images[ref_id], x_tgt, item_cfg)
        except (AttackError, ValueError, FloatingPointError) as err:
            out.append(AttackFailure(ref_id, target_id, init, seed, cfg.mode, f"{type(err).__name__}: {err}", cfg.k_A))
            continue
        res.ref_id, res.target_id, res.init = ref_id, target_id, init
        out.append(res)
    return out
