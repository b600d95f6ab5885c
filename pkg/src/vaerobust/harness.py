"""Experiment orchestration: config files, train -> attack -> metrics -> report, image grids."""
from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import attacks as A
from . import data as D
from . import metrics as MX
from . import models as M
from .seeding import derive_seed

STAGES = ("data", "train", "attack", "metrics", "report")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


# configuration --------------------------------------------------------------------

@dataclass
class ModelConfig:
    kind: str = "vae"  # vae | hvae | fullsize
    latent_dim: int = 16
    latent_dims: Tuple[int, ...] = (8, 4)
    beta: float = 1.0


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | idx
    n_train: int = 5000
    n_test: int = 1000
    n_classes: int = 10
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class SelectionConfig:
    n_refs: int = 10
    n_targets: int = 5
    inits: int = 6


@dataclass
class EvalConfig:
    nll_samples: int = 100
    nll_images: int = 200
    curve_seeds: int = 5
    grid_pairs: int = 5


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: M.TrainConfig = field(default_factory=lambda: M.TrainConfig(lr=1e-3, epochs=15, batch_size=64))
    attack: A.AttackConfig = field(default_factory=A.AttackConfig)
    data: DataConfig = field(default_factory=DataConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out: str = "runs/run"
    seed: int = 0
    checkpoint: str = ""
    run_id: str = ""


def _coerce(raw: str, tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if raw.strip().lower() in ("", "none"):
            return None
        return _coerce(raw, next(a for a in args if a is not type(None)))
    if origin in (tuple, Tuple):
        parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(_coerce(p.strip(), args[0]) for p in parts)
    if tp is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    return raw


def _sections(cfg) -> Dict[str, object]:
    return {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)
            if dataclasses.is_dataclass(getattr(cfg, f.name))}


def config_keys(cfg: Optional[ExperimentConfig] = None) -> Dict[str, type]:
    """Every dotted key with its type."""
    cfg = cfg or ExperimentConfig()
    keys = {}
    hints = typing.get_type_hints(type(cfg))
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            sub = typing.get_type_hints(type(value))
            for g in dataclasses.fields(value):
                keys[f"{f.name}.{g.name}"] = sub[g.name]
        else:
            keys[f.name] = hints[f.name]
    return keys


def apply_overrides(cfg: ExperimentConfig, overrides: Dict[str, str]) -> ExperimentConfig:
    """Return a copy of ``cfg`` with dotted ``key -> raw string`` overrides applied."""
    types = config_keys(cfg)
    sections = {k: dataclasses.asdict(v) for k, v in _sections(cfg).items()}
    top = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg) if f.name not in sections}
    for key, raw in overrides.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            value = _coerce(str(raw), types[key])
        except (ValueError, StopIteration) as err:
            raise ConfigError(f"bad value for {key}: {raw!r} ({err})") from None
        if "." in key:
            sec, name = key.split(".", 1)
            sections[sec][name] = value
        else:
            top[key] = value
    try:
        built = {sec: type(getattr(cfg, sec))(**vals) for sec, vals in sections.items()}
    except (ValueError, TypeError) as err:
        raise ConfigError(str(err)) from None
    return ExperimentConfig(**built, **top)


def parse_config_text(text: str) -> Dict[str, str]:
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return pairs


def load_config(path, overrides: Optional[Dict[str, str]] = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    merged = {**parse_config_text(text), **(overrides or {})}
    return apply_overrides(ExperimentConfig(), merged)


def _fmt_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for key in config_keys(cfg):
        if "." in key:
            sec, name = key.split(".", 1)
            value = getattr(getattr(cfg, sec), name)
        else:
            value = getattr(cfg, key)
        lines.append(f"{key} = {_fmt_value(value)}")
    return "\n".join(lines) + "\n"


def stage_seeds(cfg: ExperimentConfig) -> ExperimentConfig:
    """Replace per-stage seeds with values hashed from the master seed."""
    s = cfg.seed
    return replace(cfg, train=replace(cfg.train, seed=derive_seed(s, "train") % 2 ** 32),
                   attack=replace(cfg.attack, seed=derive_seed(s, "attack") % 2 ** 32))


# images ---------------------------------------------------------------------------

def _to_pixels(img) -> np.ndarray:
    img = np.asarray(img, float)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim == 3:
        img = np.moveaxis(img, 0, -1)
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def emit_grid(images, layout: str, path, separator: int = 255) -> Path:
    """Write a grid of equally shaped images as binary PGM (gray) or PPM (color).

    ``images`` is a nested sequence; with ``layout="rows"`` each inner sequence
    is one row, with ``layout="columns"`` each inner sequence is one column.
    Cells are separated by 1-pixel lines and the grid has a 1-pixel border.
    """
    if layout not in ("rows", "columns"):
        raise ValueError("layout must be 'rows' or 'columns'")
    rows = [list(r) for r in images]
    if layout == "columns":
        width = max(len(c) for c in rows)
        rows = [[c[i] if i < len(c) else None for c in rows] for i in range(width)]
    cells = [[None if im is None else _to_pixels(im) for im in row] for row in rows]
    shapes = {c.shape for row in cells for c in row if c is not None}
    if len(shapes) != 1:
        raise ValueError(f"grid cells must share one shape, got {sorted(shapes)}")
    shape = shapes.pop()
    h, w = shape[:2]
    color = len(shape) == 3
    nr, nc = len(cells), max(len(r) for r in cells)
    canvas = np.full((nr * (h + 1) + 1, nc * (w + 1) + 1) + ((3,) if color else ()), separator, np.uint8)
    for i, row in enumerate(cells):
        for j, c in enumerate(row):
            top, left = 1 + i * (h + 1), 1 + j * (w + 1)
            canvas[top:top + h, left:left + w] = 0 if c is None else c
    return write_pnm(canvas, path)


def write_pnm(canvas: np.ndarray, path) -> Path:
    path = Path(path)
    magic = b"P6" if canvas.ndim == 3 else b"P5"
    header = magic + f"\n{canvas.shape[1]} {canvas.shape[0]}\n255\n".encode()
    path.write_bytes(header + np.ascontiguousarray(canvas).tobytes())
    return path


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    magic, w, h, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"{path}: not a binary 8-bit PGM/PPM")
    body = parts[4]
    shape = (h, w, 3) if magic == b"P6" else (h, w)
    if len(body) != int(np.prod(shape)):
        raise ValueError(f"{path}: pixel payload has wrong length")
    return np.frombuffer(body, np.uint8).reshape(shape)


def supervised_rows(results, recon) -> List[list]:
    """Adversarial inputs, their reconstructions, reconstructions of the targets."""
    ok = [r for r in results if r.ok]
    return [[r.x_adv for r in ok], [recon(r.x_adv) for r in ok], [recon(r.x_target) for r in ok]]


def unsupervised_rows(results, recon) -> List[list]:
    ok = [r for r in results if r.ok]
    return [[r.x_adv for r in ok], [recon(r.x_adv) for r in ok]]


# pipeline -----------------------------------------------------------------------------

def build_model(mc: ModelConfig, seed: int):
    if mc.kind == "vae":
        return M.desk_vae(mc.latent_dim, mc.beta, seed=seed)
    if mc.kind == "hvae":
        return M.desk_hvae(mc.latent_dims, seed=seed)
    if mc.kind == "fullsize":
        return M.fullsize_vae(mc.beta, seed=seed)
    raise ConfigError(f"unknown model kind {mc.kind!r}")


def load_data(dc_: DataConfig, seed: int) -> Tuple[D.DatasetSplit, D.DatasetSplit]:
    if dc_.source == "synthetic":
        train = D.make_synthetic("shapes", dc_.n_train, derive_seed(seed, "data", "train") % 2 ** 32,
                                 dc_.n_classes, split="train")
        test = D.make_synthetic("shapes", dc_.n_test, derive_seed(seed, "data", "test") % 2 ** 32,
                                dc_.n_classes, split="test")
        return train, test
    if dc_.source == "idx":
        for p in (dc_.train_images, dc_.train_labels, dc_.test_images, dc_.test_labels):
            if not p or not Path(p).exists():
                raise FileNotFoundError(f"dataset file not found: {p!r}")
        train = D.load_idx(dc_.train_images, dc_.train_labels, "train")
        test = D.load_idx(dc_.test_images, dc_.test_labels, "test")
        if dc_.n_train and dc_.n_train < len(train):
            train = train.subset(np.arange(dc_.n_train))
        if dc_.n_test and dc_.n_test < len(test):
            test = test.subset(np.arange(dc_.n_test))
        return train, test
    raise ConfigError(f"unknown data source {dc_.source!r}")


def evaluate_model(model, test: D.DatasetSplit, ec: EvalConfig, seed: int) -> dict:
    """Test-set negative ELBO, KL and importance-sampled NLL."""
    x = test.images[: ec.nll_images]
    out = {"test_neg_elbo": M.evaluate_loss(model, test.images, 1.0, seed)}
    if isinstance(model, M.VaeModel):
        _, _, kl = M.elbo(model, test.images, (seed, 1))
        out["test_kl"] = float(np.mean(kl.data))
        out["test_nll"] = float(np.mean(M.nll_importance(model, x, ec.nll_samples, seed)))
    else:
        _, _, kls = M.h_elbo(model, test.images, seed)
        out["test_kl"] = float(sum(np.mean(v.data) for v in kls.values()))
    return out


def save_attacks(results, path) -> Path:
    arrays, meta = {}, []
    for i, r in enumerate(results):
        meta.append({k: getattr(r, k) for k in ("ref_id", "target_id", "init", "seed", "mode", "k_A", "ok")}
                    | ({"error": r.error} if not r.ok else
                       {"final_objective": r.final_objective, "converged": r.converged, "steps": r.steps,
                        "sigma_max_sq": r.sigma_max_sq}))
        if r.ok:
            arrays[f"{i}/epsilon"], arrays[f"{i}/x_ref"], arrays[f"{i}/trace"] = r.epsilon, r.x_ref, r.trace
            if r.x_target is not None:
                arrays[f"{i}/x_target"] = r.x_target
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    return Path(path)


def load_attacks(path) -> list:
    out = []
    with np.load(path, allow_pickle=False) as npz:
        for i, m in enumerate(json.loads(str(npz["__meta__"]))):
            if not m["ok"]:
                out.append(A.AttackFailure(m["ref_id"], m["target_id"], m["init"], m["seed"], m["mode"],
                                           m["error"], m["k_A"]))
                continue
            eps, x_ref = npz[f"{i}/epsilon"], npz[f"{i}/x_ref"]
            x_tgt = npz[f"{i}/x_target"] if f"{i}/x_target" in npz.files else None
            out.append(A.AttackResult(eps, x_ref + eps, x_ref, npz[f"{i}/trace"], m["final_objective"],
                                      m["converged"], m["mode"], m["seed"], m["steps"], x_tgt,
                                      m["ref_id"], m["target_id"], m["init"], m["k_A"], m["sigma_max_sq"]))
    return out


def _atomic_write(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def run_experiment(cfg: ExperimentConfig, until: str = "report", reuse: bool = False, log=None) -> Path:
    """Run the pipeline up to stage ``until``; returns the run directory.

    Every stage outcome is written to ``manifest.json``; a failing stage
    raises :class:`StageError` after the manifest is written and later
    stages are skipped. With ``reuse`` an existing checkpoint or attack
    file in the run directory replaces the corresponding stage.
    """
    if until not in STAGES:
        raise ConfigError(f"unknown stage {until!r}")
    cfg = stage_seeds(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    run_id = cfg.run_id or out.name
    (out / "config.txt").write_text(dump_config(cfg))
    wanted = STAGES[: STAGES.index(until) + 1]
    manifest = {"run_id": run_id, "stages": {}}
    say = log or (lambda msg: None)

    def record(stage, status, **info):
        manifest["stages"][stage] = {"status": status, **info}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    ctx: dict = {}
    for stage in STAGES:
        if stage not in wanted:
            record(stage, "skipped")
            continue
        try:
            say(f"[{run_id}] {stage}")
            info = _STAGE_FUNCS[stage](cfg, out, ctx, reuse, say) or {}
        except Exception as err:  # noqa: BLE001 - recorded in manifest
            record(stage, "failed", error=f"{type(err).__name__}: {err}")
            for later in STAGES[STAGES.index(stage) + 1:]:
                record(later, "skipped")
            raise StageError(stage, f"{type(err).__name__}: {err}") from err
        record(stage, "ok", **info)
    return out


def _stage_data(cfg, out, ctx, reuse, say):
    ctx["train"], ctx["test"] = load_data(cfg.data, cfg.seed)
    return {"n_train": len(ctx["train"]), "n_test": len(ctx["test"])}


def _stage_train(cfg, out, ctx, reuse, say):
    ckpt = out / "checkpoint.npz"
    source = Path(cfg.checkpoint) if cfg.checkpoint else (ckpt if reuse and ckpt.exists() else None)
    if source is not None:
        model, meta = M.load_checkpoint(source)
        ctx["model"], ctx["eval"] = model, meta.get("metrics", {})
        if source != ckpt:
            M.save_checkpoint(ckpt, model, None, ctx["eval"])
        return {"checkpoint": str(source), "loaded": True}
    model = build_model(cfg.model, derive_seed(cfg.seed, "init") % 2 ** 32)
    trained, history = M.train(model, ctx["train"], replace(cfg.train, beta=cfg.model.beta), log=say)
    ctx["model"] = trained
    ctx["eval"] = evaluate_model(trained, ctx["test"], cfg.eval, derive_seed(cfg.seed, "eval") % 2 ** 32)
    ctx["eval"]["final_val_loss"] = history["val_loss"][-1]
    ctx["eval"]["val_loss_init"] = history["val_loss_init"]
    M.save_checkpoint(ckpt, trained, cfg.train, ctx["eval"])
    (out / "history.json").write_text(json.dumps(history, indent=2) + "\n")
    return {"checkpoint": str(ckpt)}


def _plan(cfg, test):
    sel = cfg.selection
    seed = derive_seed(cfg.seed, "select") % 2 ** 32
    if cfg.attack.mode == "supervised":
        return D.select_pairs(test, sel.n_refs, n_targets=sel.n_targets, seed=seed)
    return D.select_pairs(test, sel.n_refs, inits=sel.inits, seed=seed)


def _stage_attack(cfg, out, ctx, reuse, say):
    path = out / "attacks.npz"
    if reuse and path.exists():
        ctx["results"] = load_attacks(path)
        return {"loaded": True, "n": len(ctx["results"])}
    plan = _plan(cfg, ctx["test"])
    ctx["results"] = A.attack_batch(ctx["model"], ctx["test"].images, plan, cfg.attack)
    save_attacks(ctx["results"], path)
    failed = sum(not r.ok for r in ctx["results"])
    return {"n": len(ctx["results"]), "failed": failed, "stratification": plan.stratification}


def _stage_metrics(cfg, out, ctx, reuse, say):
    model, results = ctx["model"], ctx["results"]
    beta = cfg.model.beta if cfg.model.kind != "hvae" else None
    rep = MX.evaluate_attacks(model, results, ctx.get("run_id", cfg.run_id or out.name), beta)
    if cfg.model.kind == "hvae":
        ok = [r for r in results if r.ok]
        seeds = [derive_seed(cfg.seed, "curve", i) % 2 ** 32 for i in range(cfg.eval.curve_seeds)]
        inputs = {"reference": np.stack([r.x_ref for r in ok]), "adversarial": np.stack([r.x_adv for r in ok])}
        if cfg.attack.mode == "supervised":
            inputs["target"] = np.stack([r.x_target for r in ok])
        rep.curves = {k: v.tolist() for k, v in MX.elbo_gt_k_curve(model, inputs, seeds).items()}
    ctx["report"] = rep
    extra = {"mode": cfg.attack.mode, "beta": beta, "k_A": cfg.attack.k_A, "model_kind": cfg.model.kind,
             "eval": ctx.get("eval", {})}
    _atomic_write(out / "metrics.csv", lambda p: MX.write_metrics_csv(rep, p))
    _atomic_write(out / "summary.json", lambda p: MX.write_summary_json(rep, p, extra))
    return {"n_pairs": rep.n_pairs, "n_failures": rep.n_failures}


def _stage_report(cfg, out, ctx, reuse, say):
    results = [r for r in ctx["results"] if r.ok][: cfg.eval.grid_pairs]
    if not results:
        return {"grid": None}
    recon = ctx["model"].reconstruct
    rows = supervised_rows(results, recon) if cfg.attack.mode == "supervised" else unsupervised_rows(results, recon)
    grid = emit_grid(rows, "rows", out / "grid.pgm")
    (out / "table.txt").write_text(MX.format_table([json.loads((out / "summary.json").read_text())]) + "\n")
    return {"grid": str(grid)}


_STAGE_FUNCS = {"data": _stage_data, "train": _stage_train, "attack": _stage_attack,
                "metrics": _stage_metrics, "report": _stage_report}


def sweep(cfg: ExperimentConfig, betas: Sequence[float] = (0.5, 1, 2, 4, 10), log=None) -> List[Path]:
    """One run directory per beta under ``cfg.out``; writes a combined summary table."""
    root = Path(cfg.out)
    runs = []
    for b in betas:
        sub = replace(cfg, model=replace(cfg.model, beta=float(b)), out=str(root / f"beta_{b:g}"),
                      run_id=f"beta_{b:g}")
        runs.append(run_experiment(sub, log=log))
    summaries = [json.loads((r / "summary.json").read_text()) for r in runs]
    (root / "sweep_table.txt").write_text(MX.format_table(summaries, "beta") + "\n")
    return runs


# 2-D latent demo ------------------------------------------------------------------

@dataclass
class DemoConfig:
    out: str = "runs/demo2d"
    seed: int = 0
    n_train: int = 2000
    epochs: int = 10
    n_pairs: int = 10
    budget: float = 3.0
    steps: int = 300


_PALETTE = np.array([[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189],
                     [140, 86, 75], [227, 119, 194], [127, 127, 127], [188, 189, 34], [23, 190, 207]], np.uint8)


def _scatter(points, labels, markers, size=256) -> np.ndarray:
    canvas = np.full((size, size, 3), 255, np.uint8)
    allp = np.concatenate([points] + [m[0] for m in markers])
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)

    def pix(p):
        q = (np.asarray(p) - lo) / span * (size - 13) + 6
        return int(round(q[0])), int(round(size - 1 - q[1]))

    def dot(p, color, r):
        x, y = pix(p)
        canvas[max(0, y - r):y + r + 1, max(0, x - r):x + r + 1] = color

    for p, lab in zip(points, labels):
        dot(p, _PALETTE[lab % len(_PALETTE)], 1)
    for pts, color in markers:
        for p in pts:
            dot(p, (0, 0, 0), 4)
            dot(p, color, 3)
    return canvas


def demo2d(cfg: DemoConfig, model=None, log=None) -> dict:
    """Supervised attacks on a 2-D latent VAE; writes a latent scatter and an image strip."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train = D.make_synthetic("shapes", cfg.n_train, derive_seed(cfg.seed, "demo", "train") % 2 ** 32)
    test = D.make_synthetic("shapes", 500, derive_seed(cfg.seed, "demo", "test") % 2 ** 32, split="test")
    if model is None:
        model = M.desk_vae(2, seed=derive_seed(cfg.seed, "demo", "init") % 2 ** 32)
        tc = M.TrainConfig(lr=1e-3, epochs=cfg.epochs, batch_size=64, seed=derive_seed(cfg.seed, "demo", "fit") % 2 ** 32)
        model, _ = M.train(model, train, tc, log=log)
    if getattr(model, "latent_dim", None) != 2:
        raise ValueError(f"demo2d needs a 2-D latent model, got latent_dim={getattr(model, 'latent_dim', None)}")
    rng = np.random.default_rng(derive_seed(cfg.seed, "demo", "pairs") % 2 ** 32)
    refs, tgts = [], []
    while len(refs) < cfg.n_pairs:
        r, t = rng.choice(len(test), 2, replace=False)
        if test.labels[r] != test.labels[t]:
            refs.append(int(r))
            tgts.append(int(t))
    acfg = A.AttackConfig(budget=cfg.budget, steps=cfg.steps, seed=derive_seed(cfg.seed, "demo", "attack") % 2 ** 32)
    results = [A.supervised_attack(model, test.images[r], test.images[t], replace(acfg, seed=acfg.seed + i))
               for i, (r, t) in enumerate(zip(refs, tgts))]
    mu = lambda x: model.encode(x).mean.data  # noqa: E731
    cloud = mu(test.images)
    ref_mu = np.stack([mu(r.x_ref) for r in results])
    tgt_mu = np.stack([mu(r.x_target) for r in results])
    adv_mu = np.stack([mu(r.x_adv) for r in results])
    closer = np.linalg.norm(adv_mu - tgt_mu, axis=1) < np.linalg.norm(ref_mu - tgt_mu, axis=1)
    scatter = write_pnm(_scatter(cloud, test.labels, [(ref_mu, (0, 90, 255)), (tgt_mu, (0, 200, 0)),
                                                       (adv_mu, (230, 0, 0))]), out / "latent_scatter.ppm")
    recon = model.reconstruct
    strip = emit_grid([[r.x_target, r.x_adv, r.x_ref, recon(r.x_target), recon(r.x_adv), recon(r.x_ref)]
                       for r in results], "rows", out / "strip.pgm")
    markers = {"reference": ref_mu.tolist(), "target": tgt_mu.tolist(), "adversarial": adv_mu.tolist(),
               "closer_to_target": closer.tolist(), "fraction_closer": float(closer.mean())}
    (out / "markers.json").write_text(json.dumps(markers, indent=2) + "\n")
    return {"scatter": scatter, "strip": strip, "markers": markers, "results": results}
