"""Robustness measures: latent SKL (omega), multi-scale SSIM triples, ELBO^{>k} curves."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .attacks import hierarchical_skl
from .gaussmath import skl
from .models import elbo_gt_k

STANDARD_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

# MS-SSIM and omega rows reported for supervised attacks on NVAE (CelebA),
# keyed by the number of attacked top levels; reference values only.
REFERENCE_NVAE_CELEBA = {
    1: {"msssim_ref_adv": 0.99, "msssim_recref_recadv": 0.25, "msssim_rectgt_recadv": 0.51, "omega": 270},
    2: {"msssim_ref_adv": 0.97, "msssim_recref_recadv": 0.25, "msssim_rectgt_recadv": 0.65, "omega": 281},
    4: {"msssim_ref_adv": 0.98, "msssim_recref_recadv": 0.30, "msssim_rectgt_recadv": 0.55, "omega": 328},
    8: {"msssim_ref_adv": 0.99, "msssim_recref_recadv": 0.46, "msssim_rectgt_recadv": 0.42, "omega": 803},
}

CSV_COLUMNS = (
    "run_id", "mode", "beta", "k_A", "ref_id", "target_id", "init", "epsilon_norm", "skl",
    "msssim_ref_adv", "msssim_recref_recadv", "msssim_rectgt_recadv", "final_objective",
    "steps", "seed", "status",
)


@dataclass
class MsssimConfig:
    scales: int = 5
    weights: Tuple[float, ...] = STANDARD_WEIGHTS
    window: int = 11
    sigma: float = 1.5
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if self.scales < 1 or len(w) != self.scales:
            raise ValueError(f"need {self.scales} weights, got {len(w)}")
        if (w <= 0).any():
            raise ValueError("scale weights must be positive")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window size must be a positive odd integer")
        self.weights = tuple(float(v) for v in w / w.sum())

    @classmethod
    def for_shape(cls, height: int, width: int) -> "MsssimConfig":
        """Standard 5-scale setup when it fits, otherwise fewer scales and a smaller window.

        28x28 gives 3 scales with a 7x7 window.
        """
        side = min(height, width)
        if side >= 11 * 16:
            return cls()
        scales = 1
        while scales < 5 and side >= 7 * 2 ** scales:
            scales += 1
        window = min(11, side // 2 ** (scales - 1))
        window -= 1 - window % 2
        if window < 1:
            raise ValueError(f"image side {side} too small for MS-SSIM")
        return cls(scales=scales, weights=STANDARD_WEIGHTS[:scales], window=window)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=float) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation over the last two axes
    rows = sliding_window_view(img, g.size, axis=-1) @ g
    return np.swapaxes(sliding_window_view(np.swapaxes(rows, -1, -2), g.size, axis=-1) @ g, -1, -2)


def ssim_components(a: np.ndarray, b: np.ndarray, cfg: MsssimConfig) -> Tuple[float, float]:
    """Mean contrast-structure term and mean full SSIM at one scale."""
    g = gaussian_window(cfg.window, cfg.sigma)
    mu_a, mu_b = _filter(a, g), _filter(b, g)
    s_aa = _filter(a * a, g) - mu_a * mu_a
    s_bb = _filter(b * b, g) - mu_b * mu_b
    s_ab = _filter(a * b, g) - mu_a * mu_b
    cs = (2 * s_ab + cfg.c2) / (s_aa + s_bb + cfg.c2)
    lum = (2 * mu_a * mu_b + cfg.c1) / (mu_a * mu_a + mu_b * mu_b + cfg.c1)
    return float(cs.mean()), float((lum * cs).mean())


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2] // 2 * 2, img.shape[-1] // 2 * 2
    x = img[..., :h, :w]
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def msssim(a, b, cfg: Optional[MsssimConfig] = None) -> float:
    """Multi-scale SSIM of two images with values in [0, 1]; channels are averaged."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape or a.ndim < 2:
        raise ValueError(f"msssim: shapes {a.shape} and {b.shape} differ or are not images")
    cfg = cfg or MsssimConfig.for_shape(*a.shape[-2:])
    value = 1.0
    for j in range(cfg.scales):
        if min(a.shape[-2:]) < cfg.window:
            raise ValueError(f"msssim: scale {j + 1} has size {a.shape[-2:]}, smaller than window {cfg.window}")
        cs, full = ssim_components(a, b, cfg)
        term = full if j == cfg.scales - 1 else cs
        value *= max(term, 0.0) ** cfg.weights[j]
        if j < cfg.scales - 1:
            a, b = _downsample(a), _downsample(b)
    return float(min(value, 1.0))


# latent-space measure ----------------------------------------------------------------

def _pair_skl(model, res) -> float:
    if hasattr(model, "levels"):
        k_A = res.k_A or model.levels
        return float(hierarchical_skl(model, res.x_adv, res.x_ref, k_A, (res.seed, 7, 0)))
    return float(skl(model.encode(res.x_adv), model.encode(res.x_ref)))


def omega_terms(model, results) -> np.ndarray:
    """Per-pair SKL[q(z | x_adv), q(z | x_ref)] for successful results."""
    return np.array([_pair_skl(model, r) for r in results if getattr(r, "ok", True)])


def omega(model, results, reduce: str = "sum") -> float:
    """Summed (or mean) posterior SKL between adversarial and reference inputs."""
    terms = omega_terms(model, results)
    if terms.size == 0:
        raise ValueError("omega of an empty result list is undefined")
    if reduce == "mean":
        return float(terms.mean())
    return float(np.sum(terms))


def msssim_triple(x_ref, x_adv, x_tgt, recon: Callable[[np.ndarray], np.ndarray],
                  cfg: Optional[MsssimConfig] = None):
    """(MSSSIM[x_r, x_a], MSSSIM[rec x_r, rec x_a], MSSSIM[rec x_t, rec x_a] or None)."""
    rec_adv = recon(x_adv)
    first = msssim(x_ref, x_adv, cfg)
    second = msssim(recon(x_ref), rec_adv, cfg)
    third = None if x_tgt is None else msssim(recon(x_tgt), rec_adv, cfg)
    return first, second, third


def elbo_gt_k_curve(model, inputs: Dict[str, np.ndarray], seeds: Sequence) -> Dict[str, np.ndarray]:
    """Mean -ELBO^{>k} for k = 0..L per labelled input batch."""
    curves = {}
    for label, batch in inputs.items():
        batch = np.asarray(batch, float)
        curve = np.zeros(model.levels + 1)
        for k in range(model.levels + 1):
            vals = [-elbo_gt_k(model, batch, k, seed).data for seed in seeds]
            curve[k] = float(np.mean(vals))
        curves[label] = curve
    return curves


# reports ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    run_id: str
    omega_sum: float
    omega_mean: float
    msssim_ref_adv: float
    msssim_recref_recadv: float
    msssim_rectgt_recadv: Optional[float]
    n_pairs: int
    n_failures: int
    rows: List[dict] = field(default_factory=list)
    curves: Dict[str, List[float]] = field(default_factory=dict)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("rows")
        return d


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def evaluate_attacks(model, results, run_id: str = "run", beta: Optional[float] = None,
                     cfg: Optional[MsssimConfig] = None) -> MetricsReport:
    """Per-pair metric rows and their means, in plan order."""
    recon = model.reconstruct
    rows, skls, triples = [], [], []
    for res in results:
        row = {"run_id": run_id, "mode": res.mode, "beta": beta, "k_A": res.k_A, "ref_id": res.ref_id,
               "target_id": res.target_id, "init": res.init, "seed": res.seed}
        if not res.ok:
            row["status"] = res.error
            rows.append(row)
            continue
        s = _pair_skl(model, res)
        t = msssim_triple(res.x_ref, res.x_adv, res.x_target, recon, cfg)
        skls.append(s)
        triples.append(t)
        row.update(epsilon_norm=float(np.linalg.norm(res.epsilon)), skl=s, msssim_ref_adv=t[0],
                   msssim_recref_recadv=t[1], msssim_rectgt_recadv=t[2],
                   final_objective=res.final_objective, steps=res.steps, status="ok")
        rows.append(row)
    if not skls:
        raise ValueError("no successful attacks to evaluate")
    third = [t[2] for t in triples if t[2] is not None]
    return MetricsReport(
        run_id=run_id,
        omega_sum=float(np.sum(skls)),
        omega_mean=float(np.mean(skls)),
        msssim_ref_adv=float(np.mean([t[0] for t in triples])),
        msssim_recref_recadv=float(np.mean([t[1] for t in triples])),
        msssim_rectgt_recadv=float(np.mean(third)) if third else None,
        n_pairs=len(skls),
        n_failures=len(rows) - len(skls),
        rows=rows,
    )


def write_metrics_csv(report: MetricsReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in report.rows:
            writer.writerow([_fmt(row.get(c)) for c in CSV_COLUMNS])
    return path


def read_metrics_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_summary_json(report: MetricsReport, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    payload = {**report.summary(), **(extra or {})}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def format_table(summaries: Sequence[dict], key: str = "beta") -> str:
    """Text table: one row per run keyed by ``key``."""
    head = f"{key:>6} | {'MSSSIM[xr,xa]':>13} | {'MSSSIM[~xr,~xa]':>15} | {'MSSSIM[~xt,~xa]':>15} | {'Omega sum':>10} | {'Omega mean':>10}"
    lines = [head, "-" * len(head)]
    for s in summaries:
        third = s.get("msssim_rectgt_recadv")
        third = "-" if third is None else f"{third:.3f}"
        lines.append(f"{str(s.get(key, '')):>6} | {s['msssim_ref_adv']:>13.3f} | {s['msssim_recref_recadv']:>15.3f} | "
                     f"{third:>15} | {s['omega_sum']:>10.2f} | {s['omega_mean']:>10.3f}")
    return "\n".join(lines)
