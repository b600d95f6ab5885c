"""Encoder/decoder stacks, the (beta-)ELBO, a top-down hierarchical VAE and training."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .gaussmath import LOG_2PI, DiagGaussian, kl_diag, sample

CHECKPOINT_FORMAT = "vaerobust.checkpoint"
CHECKPOINT_VERSION = 1

# Importance-sampled test NLL and KL reported for the full-size convolutional
# model on Fashion-MNIST; kept for documentation, not reproduced at desk scale.
REFERENCE_FMNIST_NLL = {0.5: 234.9, 1: 233.9, 2: 235.5, 4: 239.0, 10: 250.6}
REFERENCE_FMNIST_KL = {0.5: 22.5, 1: 15.1, 2: 10.2, 4: 6.8, 10: 3.9}


# layer specs -------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """One layer of a stack. ``width`` is output channels (conv) or features (affine)."""

    kind: str  # conv | transposed-conv | affine | activation | reshape | crop
    width: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    fn: str = ""
    shape: Tuple[int, ...] = ()

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**{**d, "shape": tuple(d.get("shape", ()))})


def conv(width, kernel, stride=1, padding=0) -> LayerSpec:
    return LayerSpec("conv", width, kernel, stride, padding)


def deconv(width, kernel, stride=1, padding=0) -> LayerSpec:
    return LayerSpec("transposed-conv", width, kernel, stride, padding)


def affine(width) -> LayerSpec:
    return LayerSpec("affine", width)


def relu() -> LayerSpec:
    return LayerSpec("activation", fn="relu")


def sigmoid() -> LayerSpec:
    return LayerSpec("activation", fn="sigmoid")


def reshape(*shape) -> LayerSpec:
    return LayerSpec("reshape", shape=tuple(shape))


def crop(height, width) -> LayerSpec:
    return LayerSpec("crop", shape=(height, width))


def layer_output_shape(spec: LayerSpec, in_shape: Tuple[int, ...]) -> Tuple[int, ...]:
    k, s, p = spec.kernel, spec.stride, spec.padding
    if spec.kind in ("conv", "transposed-conv"):
        if len(in_shape) != 3:
            raise ValueError(f"{spec.kind} needs (C, H, W) input, got {in_shape}")
        _, h, w = in_shape
        if spec.kind == "conv":
            oh, ow = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        else:
            oh, ow = (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k
        if oh < 1 or ow < 1:
            raise ValueError(f"{spec} produces empty output from {in_shape}")
        return (spec.width, oh, ow)
    if spec.kind == "affine":
        if len(in_shape) != 1:
            raise ValueError(f"affine needs flat input, got {in_shape}; add a reshape layer")
        return (spec.width,)
    if spec.kind == "activation":
        if spec.fn not in ("relu", "sigmoid"):
            raise ValueError(f"unknown activation {spec.fn!r}")
        return in_shape
    if spec.kind == "reshape":
        if math.prod(spec.shape) != math.prod(in_shape):
            raise ValueError(f"cannot reshape {in_shape} to {spec.shape}")
        return spec.shape
    if spec.kind == "crop":
        h, w = spec.shape
        if len(in_shape) != 3 or h > in_shape[1] or w > in_shape[2]:
            raise ValueError(f"cannot crop {in_shape} to {spec.shape}")
        return (in_shape[0], h, w)
    raise ValueError(f"unknown layer kind {spec.kind!r}")


def chain_shapes(specs: Sequence[LayerSpec], in_shape) -> List[Tuple[int, ...]]:
    """Per-layer output shapes; raises on the first inconsistent layer."""
    shapes, shape = [], tuple(in_shape)
    for i, spec in enumerate(specs):
        try:
            shape = layer_output_shape(spec, shape)
        except ValueError as err:
            raise ValueError(f"layer {i}: {err}") from None
        shapes.append(shape)
    return shapes


def init_stack(specs, in_shape, prefix: str, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """He-normal weights, zero biases."""
    params, shape = {}, tuple(in_shape)
    for i, spec in enumerate(specs):
        out = layer_output_shape(spec, shape)
        if spec.kind == "conv":
            fan_in = shape[0] * spec.kernel ** 2
            params[f"{prefix}.{i}.w"] = rng.normal(0, math.sqrt(2 / fan_in), (spec.width, shape[0], spec.kernel, spec.kernel))
            params[f"{prefix}.{i}.b"] = np.zeros(spec.width)
        elif spec.kind == "transposed-conv":
            fan_in = shape[0] * spec.kernel ** 2 / spec.stride ** 2
            params[f"{prefix}.{i}.w"] = rng.normal(0, math.sqrt(2 / fan_in), (shape[0], spec.width, spec.kernel, spec.kernel))
            params[f"{prefix}.{i}.b"] = np.zeros(spec.width)
        elif spec.kind == "affine":
            params[f"{prefix}.{i}.w"] = rng.normal(0, math.sqrt(2 / shape[0]), (shape[0], spec.width))
            params[f"{prefix}.{i}.b"] = np.zeros(spec.width)
        shape = out
    return params


def apply_stack(specs, P: Dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    for i, spec in enumerate(specs):
        key = f"{prefix}.{i}"
        if spec.kind == "conv":
            x = dc.conv2d(x, P[key + ".w"], P[key + ".b"], spec.stride, spec.padding)
        elif spec.kind == "transposed-conv":
            x = dc.conv_transpose2d(x, P[key + ".w"], P[key + ".b"], spec.stride, spec.padding)
        elif spec.kind == "affine":
            x = dc.affine(x, P[key + ".w"], P[key + ".b"])
        elif spec.kind == "activation":
            x = dc.relu(x) if spec.fn == "relu" else dc.sigmoid(x)
        elif spec.kind == "reshape":
            x = dc.reshape(x, (x.shape[0],) + spec.shape)
        elif spec.kind == "crop":
            x = dc.crop2d(x, *spec.shape)
    return x


def _split_sigmoid(decoder: Sequence[LayerSpec]) -> List[LayerSpec]:
    if not decoder or decoder[-1] != sigmoid():
        raise ValueError("decoder must end in a sigmoid activation")
    return list(decoder[:-1])


def _as_batch(x, input_shape) -> Tuple[Tensor, bool]:
    x = dc.as_tensor(x)
    n = len(input_shape)
    if x.shape[-n:] != tuple(input_shape) or x.ndim not in (n, n + 1):
        raise ValueError(f"input shape {x.shape} does not match model input {tuple(input_shape)}")
    if x.ndim == n:
        return dc.reshape(x, (1,) + x.shape), False
    return x, True


def _unbatch(t: Tensor, batched: bool) -> Tensor:
    return t if batched else dc.reshape(t, t.shape[1:])


def _unbatch_gauss(g: DiagGaussian, batched: bool) -> DiagGaussian:
    if batched:
        return g
    return DiagGaussian(_unbatch(g.mean, False), _unbatch(g.log_var, False))


def bernoulli_log_lik(x: Tensor, logits: Tensor) -> Tensor:
    """Per-example sum of x*log(p) + (1-x)*log(1-p) with p = sigmoid(logits)."""
    terms = x * logits - dc.softplus(logits)
    return dc.sum(dc.reshape(terms, (terms.shape[0], -1)), axis=1)


def _noise(seed, shape) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


# single-level VAE ----------------------------------------------------------------

@dataclass
class VaeModel:
    input_shape: Tuple[int, ...]
    encoder: List[LayerSpec]
    mean_head: LayerSpec
    logvar_head: LayerSpec
    decoder: List[LayerSpec]
    latent_dim: int
    beta: float = 1.0
    params: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.check_shapes()

    def check_shapes(self) -> None:
        trunk = chain_shapes(self.encoder, self.input_shape)
        feat = trunk[-1] if trunk else self.input_shape
        for head in (self.mean_head, self.logvar_head):
            out = layer_output_shape(head, feat)
            if math.prod(out) != self.latent_dim:
                raise ValueError(f"encoder head yields {out}, expected {self.latent_dim} latent units")
        dec = chain_shapes(self.decoder, (self.latent_dim,))
        if dec[-1] != self.input_shape:
            raise ValueError(f"decoder yields {dec[-1]}, expected {self.input_shape}")
        _split_sigmoid(self.decoder)

    def init_params(self, seed: int = 0) -> "VaeModel":
        rng = np.random.default_rng(seed)
        trunk = chain_shapes(self.encoder, self.input_shape)
        feat = trunk[-1] if trunk else self.input_shape
        params = init_stack(self.encoder, self.input_shape, "enc", rng)
        for name, head in (("enc_mean", self.mean_head), ("enc_logvar", self.logvar_head)):
            sub = init_stack([head], feat, name, rng)
            params.update({k.replace(f"{name}.0.", f"{name}."): v for k, v in sub.items()})
        params.update(init_stack(self.decoder, (self.latent_dim,), "dec", rng))
        return replace(self, params=params)

    def tensors(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        return {k: Tensor(v, requires_grad) for k, v in self.params.items()}

    def features(self, x: Tensor, P) -> Tensor:
        return apply_stack(self.encoder, P, "enc", x)

    def encode(self, x, P=None) -> DiagGaussian:
        P = P or self.tensors()
        xb, batched = _as_batch(x, self.input_shape)
        h = self.features(xb, P)
        n = xb.shape[0]
        mean = apply_stack([self.mean_head], _head_view(P, "enc_mean"), "h", h)
        log_var = apply_stack([self.logvar_head], _head_view(P, "enc_logvar"), "h", h)
        q = DiagGaussian(dc.reshape(mean, (n, self.latent_dim)), dc.reshape(log_var, (n, self.latent_dim)))
        return _unbatch_gauss(q, batched)

    def decode_logits(self, z, P=None) -> Tensor:
        P = P or self.tensors()
        z = dc.as_tensor(z)
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"latent length {z.shape[-1]} != {self.latent_dim}")
        batched = z.ndim == 2
        zb = z if batched else dc.reshape(z, (1, -1))
        return _unbatch(apply_stack(_split_sigmoid(self.decoder), P, "dec", zb), batched)

    def decode(self, z, P=None) -> Tensor:
        return dc.sigmoid(self.decode_logits(z, P))

    def reconstruct(self, x) -> np.ndarray:
        """Decoder mean at the posterior mean."""
        return self.decode(self.encode(x).mean).data


def _head_view(P, name):
    return {"h.0.w": P[f"{name}.w"], "h.0.b": P[f"{name}.b"]}


def desk_vae(latent_dim: int = 16, beta: float = 1.0, seed: int = 0,
             input_shape=(1, 28, 28), channels=(16, 32)) -> VaeModel:
    """Two stride-2 convolutions with affine heads; mirrored decoder."""
    c, h, w = input_shape
    if h % 4 or w % 4:
        raise ValueError("desk architecture needs spatial sides divisible by 4")
    c1, c2 = channels
    flat = c2 * (h // 4) * (w // 4)
    encoder = [conv(c1, 4, 2, 1), relu(), conv(c2, 4, 2, 1), relu(), reshape(flat)]
    decoder = [affine(flat), reshape(c2, h // 4, w // 4), relu(),
               deconv(c1, 4, 2, 1), relu(), deconv(c, 4, 2, 1), sigmoid()]
    model = VaeModel(input_shape, encoder, affine(latent_dim), affine(latent_dim),
                     decoder, latent_dim, beta)
    return model.init_params(seed)


def fullsize_vae(beta: float = 1.0, seed: int = 0) -> VaeModel:
    """Full-size fully convolutional stack for 28x28 inputs with 128 latent units.

    The listed transposed-convolution decoder produces 32x32 from a 1x1 code;
    a center crop restores 28x28.
    """
    encoder = [conv(32, 3, 1, 1), relu(), conv(64, 5, 2, 0), relu(),
               conv(128, 5, 2, 0), relu(), conv(256, 3, 2, 1), relu()]
    decoder = [reshape(128, 1, 1), deconv(256, 3, 1, 0), relu(), deconv(128, 3, 2, 0), relu(),
               deconv(64, 4, 2, 0), relu(), deconv(1, 4, 2, 1), crop(28, 28), sigmoid()]
    model = VaeModel((1, 28, 28), encoder, conv(128, 3, 2, 1), conv(128, 3, 2, 1),
                     decoder, 128, beta)
    return model.init_params(seed)


def encode(model, x, P=None) -> DiagGaussian:
    return model.encode(x, P)


def decode(model, z, P=None) -> Tensor:
    return model.decode(z, P)


def elbo(model: VaeModel, x, noise_seed=0, P=None, beta: Optional[float] = None, noise=None):
    """Single-sample reparameterized (beta-)ELBO; returns (total, recon_term, kl_term)."""
    beta = model.beta if beta is None else beta
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    P = P or model.tensors()
    xb, batched = _as_batch(x, model.input_shape)
    q = model.encode(xb, P)
    eps = _noise(noise_seed, q.mean.shape) if noise is None else noise
    z = sample(q, eps)
    recon = bernoulli_log_lik(xb, model.decode_logits(z, P))
    kl = kl_diag(q, DiagGaussian.standard(q.mean.shape))
    total = recon - beta * kl
    return _unbatch(total, batched), _unbatch(recon, batched), _unbatch(kl, batched)


def nll_importance(model: VaeModel, x, K: int, seed=0, chunk: int = 256) -> Union[float, np.ndarray]:
    """-log mean_k p(x, z_k) / q(z_k | x) with z_k ~ q(z | x), in log-space."""
    if K < 1:
        raise ValueError("nll_importance needs K >= 1")
    xb, batched = _as_batch(x, model.input_shape)
    q = model.encode(xb)
    n, m = q.mean.shape
    mu, lv = q.mean.data, q.log_var.data
    rng = np.random.default_rng(seed)
    log_w = np.empty((K, n))
    for start in range(0, K, chunk):
        k = min(chunk, K - start)
        eps = rng.standard_normal((k, n, m))
        z = mu + np.exp(0.5 * lv) * eps
        logits = model.decode_logits(z.reshape(k * n, m)).data
        xr = np.broadcast_to(xb.data, (k,) + xb.shape).reshape((k * n,) + xb.shape[1:])
        ll = (xr * logits - np.logaddexp(0.0, logits)).reshape(k, n, -1).sum(axis=2)
        log_pz = -0.5 * np.sum(LOG_2PI + z * z, axis=2)
        log_qz = -0.5 * np.sum(LOG_2PI + lv + eps * eps, axis=2)
        log_w[start:start + k] = ll + log_pz - log_qz
    top = log_w.max(axis=0)
    lme = top + np.log(np.mean(np.exp(log_w - top), axis=0))
    out = -lme
    return out if batched else float(out[0])


# training ------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 5e-4
    decay: float = 0.9
    patience: int = 10
    epochs: int = 500
    batch_size: int = 256
    beta: float = 1.0
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if min(self.lr, self.decay, self.epochs, self.batch_size, self.beta) <= 0 or self.patience < 1:
            raise ValueError(f"TrainConfig values must be positive: {self}")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


class TrainingDiverged(FloatingPointError):
    pass


class _Plateau:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, optimizer: dc.Adam, factor: float, patience: int):
        self.opt, self.factor, self.patience = optimizer, factor, patience
        self.best, self.bad = math.inf, 0

    def step(self, loss: float) -> None:
        if loss < self.best:
            self.best, self.bad = loss, 0
            return
        self.bad += 1
        if self.bad > self.patience:
            self.opt.lr *= self.factor
            self.bad = 0


def split_train_val(n: int, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng((seed, 0)).permutation(n)
    n_val = max(1, int(round(n * fraction)))
    return perm[n_val:], perm[:n_val]


def _objective(model, images, beta, noise_seed, P):
    total, _, _ = model_elbo(model, images, noise_seed, P=P, beta=beta)
    return -dc.mean(total)


def model_elbo(model, x, seed, P=None, beta=None):
    if isinstance(model, HierarchicalVae):
        total, recon, kls = h_elbo(model, x, seed, P=P)
        return total, recon, kls
    return elbo(model, x, seed, P=P, beta=beta)


def evaluate_loss(model, images, beta=1.0, seed=0, batch_size=500) -> float:
    """Mean negative (beta-)ELBO over ``images`` with fixed noise."""
    total = 0.0
    for start in range(0, len(images), batch_size):
        batch = images[start:start + batch_size]
        t, _, _ = model_elbo(model, batch, (seed, start), beta=beta)
        total += -float(np.sum(t.data))
    return total / len(images)


def train(model, data, cfg: TrainConfig, log=None):
    """Fit ``model`` with Adam and a plateau decay; returns (trained model, history)."""
    images = np.asarray(getattr(data, "images", data), dtype=float)
    if len(images) < 2:
        raise ValueError("training needs at least two images")
    tr_idx, va_idx = split_train_val(len(images), cfg.val_fraction, cfg.seed)
    train_x, val_x = images[tr_idx], images[va_idx]
    names = sorted(model.params)
    params = {k: model.params[k].copy() for k in names}
    work = replace(model, params=params)
    if isinstance(work, VaeModel):
        work.beta = cfg.beta
    opt = dc.Adam([params[k] for k in names], lr=cfg.lr)
    sched = _Plateau(opt, cfg.decay, cfg.patience)
    rng = np.random.default_rng((cfg.seed, 1))
    history = {"val_loss_init": evaluate_loss(work, val_x, cfg.beta, cfg.seed),
               "train_loss": [], "val_loss": [], "lr": []}
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_x))
        running = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = train_x[order[start:start + cfg.batch_size]]
            P = {k: Tensor(params[k], True) for k in names}
            loss = _objective(work, batch, cfg.beta, (cfg.seed, 2, epoch, b), P)
            value = float(loss)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            dc.backward(loss)
            opt.step([np.zeros_like(params[k]) if P[k].grad is None else P[k].grad for k in names])
            running += value * len(batch)
        val = evaluate_loss(work, val_x, cfg.beta, cfg.seed)
        history["train_loss"].append(running / len(train_x))
        history["val_loss"].append(val)
        history["lr"].append(opt.lr)
        sched.step(val)
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} train {running / len(train_x):.3f} val {val:.3f}")
    return work, history


# hierarchical VAE ------------------------------------------------------------------

@dataclass
class HierarchicalVae:
    """Top-down latent hierarchy: p(x|z_1) prod_l p(z_l|z_{l+1}), q(z_L|x) prod_l q(z_l|z_{l+1}, x).

    ``latent_dims`` lists M_1 (bottom, generates x) through M_L (top).
    """

    input_shape: Tuple[int, ...]
    encoder: List[LayerSpec]
    latent_dims: Tuple[int, ...]
    decoder: List[LayerSpec]
    td_width: int = 32
    params: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.latent_dims = tuple(self.latent_dims)
        if not self.latent_dims or min(self.latent_dims) < 1:
            raise ValueError("need at least one latent level with positive width")
        trunk = chain_shapes(self.encoder, self.input_shape)
        if len(trunk[-1]) != 1:
            raise ValueError("hierarchical encoder trunk must end flat")
        self.feat_dim = trunk[-1][0]
        if chain_shapes(self.decoder, (self.latent_dims[0],))[-1] != self.input_shape:
            raise ValueError("decoder output does not match input shape")
        _split_sigmoid(self.decoder)

    @property
    def levels(self) -> int:
        return len(self.latent_dims)

    def dim(self, level: int) -> int:
        return self.latent_dims[level - 1]

    def init_params(self, seed: int = 0) -> "HierarchicalVae":
        rng = np.random.default_rng(seed)
        params = init_stack(self.encoder, self.input_shape, "enc", rng)

        def head(name, fan_in, width):
            params[f"{name}.w"] = rng.normal(0, math.sqrt(2 / fan_in), (fan_in, width))
            params[f"{name}.b"] = np.zeros(width)

        top = self.dim(self.levels)
        head("enc_mean", self.feat_dim, top)
        head("enc_logvar", self.feat_dim, top)
        for l in range(self.levels - 1, 0, -1):
            head(f"td{l}", self.dim(l + 1), self.td_width)
            head(f"prior{l}_mean", self.td_width, self.dim(l))
            head(f"prior{l}_logvar", self.td_width, self.dim(l))
            head(f"post{l}_mean", self.feat_dim + self.td_width, self.dim(l))
            head(f"post{l}_logvar", self.feat_dim + self.td_width, self.dim(l))
        params.update(init_stack(self.decoder, (self.dim(1),), "dec", rng))
        return replace(self, params=params)

    def tensors(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        return {k: Tensor(v, requires_grad) for k, v in self.params.items()}

    def features(self, xb: Tensor, P) -> Tensor:
        return apply_stack(self.encoder, P, "enc", xb)

    def _gauss(self, P, name, h) -> DiagGaussian:
        return DiagGaussian(dc.affine(h, P[f"{name}_mean.w"], P[f"{name}_mean.b"]),
                            dc.affine(h, P[f"{name}_logvar.w"], P[f"{name}_logvar.b"]))

    def level_noise(self, seed, n: int) -> Dict[int, np.ndarray]:
        """Standard-normal noise per level, drawn top to bottom.

        A ``list`` holds one seed per level, ordered top (l=L) to bottom (l=1);
        anything else (int or tuple) seeds a single stream.
        """
        if isinstance(seed, list):
            if len(seed) != self.levels:
                raise ValueError(f"need {self.levels} per-level seeds, got {len(seed)}")
            return {l: _noise(s, (n, self.dim(l))) for l, s in zip(range(self.levels, 0, -1), seed)}
        rng = np.random.default_rng(seed)
        return {l: rng.standard_normal((n, self.dim(l))) for l in range(self.levels, 0, -1)}

    def top_down(self, x, P=None, noise=None, seed=0, prior_levels: int = 0,
                 stop: int = 1, cond: Optional[Dict[int, Tensor]] = None, use_mean: bool = False):
        """Ancestral pass from level L down to ``stop``.

        Levels ``l <= prior_levels`` draw z_l from the top-down prior, others
        from the posterior. ``cond`` fixes the conditioning samples instead of
        drawing them. Returns ``(records, batched)`` with
        ``records[l] = (posterior or None, prior, z_l)``.
        """
        P = P or self.tensors()
        xb, batched = _as_batch(x, self.input_shape)
        n = xb.shape[0]
        noise = self.level_noise(seed, n) if noise is None else noise
        feats = self.features(xb, P)
        records: Dict[int, tuple] = {}
        z_above = None
        for l in range(self.levels, stop - 1, -1):
            if l == self.levels:
                prior = DiagGaussian.standard((n, self.dim(l)))
                post = self._gauss(P, "enc", feats) if l > prior_levels else None
            else:
                t = dc.relu(dc.affine(z_above, P[f"td{l}.w"], P[f"td{l}.b"]))
                prior = self._gauss(P, f"prior{l}", t)
                post = self._gauss(P, f"post{l}", dc.concat([feats, t], axis=1)) if l > prior_levels else None
            if cond is not None and l in cond:
                z = dc.as_tensor(cond[l])
            elif post is None:
                z = prior.mean if use_mean else sample(prior, noise[l])
            else:
                z = post.mean if use_mean else sample(post, noise[l])
            records[l] = (post, prior, z)
            z_above = z
        return records, batched

    def encode(self, x, P=None) -> DiagGaussian:
        """Top-level posterior q(z_L | x)."""
        P = P or self.tensors()
        xb, batched = _as_batch(x, self.input_shape)
        return _unbatch_gauss(self._gauss(P, "enc", self.features(xb, P)), batched)

    def decode_logits(self, z1, P=None) -> Tensor:
        P = P or self.tensors()
        z1 = dc.as_tensor(z1)
        if z1.shape[-1] != self.dim(1):
            raise ValueError(f"latent length {z1.shape[-1]} != {self.dim(1)}")
        batched = z1.ndim == 2
        zb = z1 if batched else dc.reshape(z1, (1, -1))
        return _unbatch(apply_stack(_split_sigmoid(self.decoder), P, "dec", zb), batched)

    def decode(self, z1, P=None) -> Tensor:
        return dc.sigmoid(self.decode_logits(z1, P))

    def reconstruct(self, x) -> np.ndarray:
        records, batched = self.top_down(x, use_mean=True)
        out = self.decode(records[1][2]).data
        return out if batched else out[0]


def desk_hvae(latent_dims=(8, 4), seed: int = 0, input_shape=(1, 28, 28),
              channels=(16, 32), td_width: int = 32) -> HierarchicalVae:
    c, h, w = input_shape
    c1, c2 = channels
    flat = c2 * (h // 4) * (w // 4)
    encoder = [conv(c1, 4, 2, 1), relu(), conv(c2, 4, 2, 1), relu(), reshape(flat)]
    decoder = [affine(flat), reshape(c2, h // 4, w // 4), relu(),
               deconv(c1, 4, 2, 1), relu(), deconv(c, 4, 2, 1), sigmoid()]
    return HierarchicalVae(input_shape, encoder, tuple(latent_dims), decoder, td_width).init_params(seed)


def h_encode(model: HierarchicalVae, x, noise_seeds=0, P=None) -> List[Tuple[DiagGaussian, Tensor]]:
    """Posterior and sample per level, ordered top (l=L) to bottom (l=1)."""
    records, batched = model.top_down(x, P=P, seed=noise_seeds)
    out = []
    for l in range(model.levels, 0, -1):
        post, _, z = records[l]
        out.append((_unbatch_gauss(post, batched), _unbatch(z, batched)))
    return out


def _gt_k(model: HierarchicalVae, x, k: int, seed, P=None):
    records, batched = model.top_down(x, P=P, seed=seed, prior_levels=k)
    xb, _ = _as_batch(x, model.input_shape)
    recon = bernoulli_log_lik(xb, model.decode_logits(records[1][2], P))
    total = recon
    kls = {}
    for l in range(model.levels, k, -1):
        post, prior, _ = records[l]
        kls[l] = kl_diag(post, prior)
        total = total - kls[l]
    return (_unbatch(total, batched), _unbatch(recon, batched),
            {l: _unbatch(v, batched) for l, v in kls.items()})


def h_elbo(model: HierarchicalVae, x, seed=0, P=None):
    """Single-sample hierarchical ELBO; returns (total, recon, {level: KL})."""
    return _gt_k(model, x, 0, seed, P)


def elbo_gt_k(model: HierarchicalVae, x, k: int, seed=0, P=None) -> Tensor:
    """ELBO with the bottom ``k`` levels drawn from the prior and their KL terms dropped."""
    if not 0 <= k <= model.levels:
        raise ValueError(f"k must lie in [0, {model.levels}], got {k}")
    return _gt_k(model, x, k, seed, P)[0]


# checkpoints -----------------------------------------------------------------------

def architecture(model) -> dict:
    if isinstance(model, HierarchicalVae):
        return {"type": "hierarchical", "input_shape": list(model.input_shape),
                "encoder": [asdict(s) for s in model.encoder], "latent_dims": list(model.latent_dims),
                "decoder": [asdict(s) for s in model.decoder], "td_width": model.td_width}
    return {"type": "vae", "input_shape": list(model.input_shape),
            "encoder": [asdict(s) for s in model.encoder], "mean_head": asdict(model.mean_head),
            "logvar_head": asdict(model.logvar_head), "decoder": [asdict(s) for s in model.decoder],
            "latent_dim": model.latent_dim, "beta": model.beta}


def from_architecture(arch: dict, params=None):
    specs = lambda key: [LayerSpec.from_dict(d) for d in arch[key]]  # noqa: E731
    if arch["type"] == "hierarchical":
        return HierarchicalVae(tuple(arch["input_shape"]), specs("encoder"), tuple(arch["latent_dims"]),
                               specs("decoder"), arch["td_width"], dict(params or {}))
    return VaeModel(tuple(arch["input_shape"]), specs("encoder"), LayerSpec.from_dict(arch["mean_head"]),
                    LayerSpec.from_dict(arch["logvar_head"]), specs("decoder"), arch["latent_dim"],
                    arch["beta"], dict(params or {}))


def save_checkpoint(path, model, train_config: Optional[TrainConfig] = None, metrics: Optional[dict] = None) -> Path:
    path = Path(path)
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "architecture": architecture(model),
            "train_config": asdict(train_config) if train_config else None,
            "metrics": metrics or {}}
    arrays = {f"param/{k}": v for k, v in sorted(model.params.items())}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path):
    """Returns (model, meta dict)."""
    with np.load(path, allow_pickle=False) as npz:
        if "__meta__" not in npz.files:
            raise ValueError(f"{path}: not a checkpoint (missing metadata)")
        meta = json.loads(str(npz["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unknown format tag {meta.get('format')!r}")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        params = {k[len("param/"):]: npz[k] for k in npz.files if k.startswith("param/")}
    return from_architecture(meta["architecture"], params), meta
