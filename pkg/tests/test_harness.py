import json

import numpy as np
import pytest

from vaerobust import cli
from vaerobust import harness as H

TINY = {
    "data.n_train": "60", "data.n_test": "40", "train.epochs": "1", "train.batch_size": "30",
    "model.latent_dim": "4", "attack.steps": "4", "selection.n_refs": "4", "selection.n_targets": "2",
    "eval.nll_samples": "3", "eval.nll_images": "5", "eval.curve_seeds": "1",
}


def tiny_cfg(tmp_path, name="run", **extra):
    return H.apply_overrides(H.ExperimentConfig(), {**TINY, "out": str(tmp_path / name), **extra})


def test_config_text_round_trip(tmp_path):
    cfg = tiny_cfg(tmp_path, **{"attack.k_A": "2", "model.latent_dims": "5,3", "attack.norm": "linf"})
    path = tmp_path / "c.txt"
    path.write_text(H.dump_config(cfg))
    again = H.load_config(path)
    assert again == cfg
    assert again.model.latent_dims == (5, 3) and again.attack.k_A == 2


def test_snapshot_lists_every_key():
    text = H.dump_config(H.ExperimentConfig())
    keys = [line.split(" = ")[0] for line in text.splitlines()]
    assert keys == list(H.config_keys())
    assert "attack.budget" in keys and "seed" in keys


def test_config_errors():
    with pytest.raises(H.ConfigError, match="unknown"):
        H.apply_overrides(H.ExperimentConfig(), {"attack.budgett": "1"})
    with pytest.raises(H.ConfigError):
        H.apply_overrides(H.ExperimentConfig(), {"attack.budget": "-1"})
    with pytest.raises(H.ConfigError):
        H.apply_overrides(H.ExperimentConfig(), {"train.epochs": "many"})
    with pytest.raises(H.ConfigError):
        H.parse_config_text("no equals sign here")


def test_parse_ignores_comments_and_blank_lines():
    assert H.parse_config_text("# hi\n\nseed = 3  # trailing\n") == {"seed": "3"}


def test_stage_seeds_follow_master(tmp_path):
    a = H.stage_seeds(tiny_cfg(tmp_path, seed="1"))
    b = H.stage_seeds(tiny_cfg(tmp_path, seed="2"))
    assert a.train.seed != b.train.seed and a.attack.seed != b.attack.seed
    assert a == H.stage_seeds(tiny_cfg(tmp_path, seed="1"))


def test_full_run_writes_artefacts_and_is_reproducible(tmp_path):
    out1 = H.run_experiment(tiny_cfg(tmp_path, "a"))
    out2 = H.run_experiment(tiny_cfg(tmp_path, "b", run_id="a"))
    for name in ("config.txt", "checkpoint.npz", "metrics.csv", "summary.json", "grid.pgm", "manifest.json"):
        assert (out1 / name).exists()
    assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
    manifest = json.loads((out1 / "manifest.json").read_text())
    assert all(v["status"] == "ok" for v in manifest["stages"].values())
    lines = (out1 / "metrics.csv").read_text().splitlines()
    assert len(lines) == 1 + 4 * 2


def test_different_seed_changes_results(tmp_path):
    a = H.run_experiment(tiny_cfg(tmp_path, "a"), until="metrics")
    b = H.run_experiment(tiny_cfg(tmp_path, "b", seed="5", run_id="a"), until="metrics")
    assert (a / "metrics.csv").read_bytes() != (b / "metrics.csv").read_bytes()


def test_missing_dataset_fails_without_csv(tmp_path):
    cfg = tiny_cfg(tmp_path, **{"data.source": "idx", "data.train_images": str(tmp_path / "nope")})
    with pytest.raises(H.StageError) as err:
        H.run_experiment(cfg)
    assert err.value.stage == "data"
    out = tmp_path / "run"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["stages"]["data"]["status"] == "failed"
    assert "not found" in manifest["stages"]["data"]["error"]
    assert manifest["stages"]["metrics"]["status"] == "skipped"
    assert not (out / "metrics.csv").exists()


def test_reuse_loads_checkpoint_and_attacks(tmp_path):
    cfg = tiny_cfg(tmp_path)
    out = H.run_experiment(cfg, until="attack")
    first = (out / "checkpoint.npz").read_bytes()
    H.run_experiment(cfg, until="metrics", reuse=True)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["stages"]["train"].get("loaded") and manifest["stages"]["attack"].get("loaded")
    assert (out / "checkpoint.npz").read_bytes() == first


def test_attack_file_round_trip(tmp_path):
    out = H.run_experiment(tiny_cfg(tmp_path), until="attack")
    res = H.load_attacks(out / "attacks.npz")
    H.save_attacks(res, tmp_path / "again.npz")
    again = H.load_attacks(tmp_path / "again.npz")
    assert len(again) == 8
    for a, b in zip(res, again):
        assert a.x_adv.tobytes() == b.x_adv.tobytes() and a.ref_id == b.ref_id


def test_unsupervised_and_hierarchical_runs(tmp_path):
    H.run_experiment(tiny_cfg(tmp_path, "u", **{"attack.mode": "unsupervised", "selection.inits": "2"}))
    out = H.run_experiment(tiny_cfg(tmp_path, "h", **{"model.kind": "hvae", "model.latent_dims": "4,2"}))
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["curves"]) == {"reference", "adversarial", "target"}
    assert len(summary["curves"]["reference"]) == 3


def test_emit_grid_layout_and_separators(tmp_path):
    a, b = np.zeros((2, 3)), np.ones((2, 3)) * 0.5
    H.emit_grid([[a, b], [b, a]], "rows", tmp_path / "g.pgm")
    px = H.read_pnm(tmp_path / "g.pgm")
    assert px.shape == (2 * 3 + 1, 2 * 4 + 1)
    assert (px[0] == 255).all() and (px[:, 0] == 255).all() and (px[3] == 255).all()
    assert px[1, 1] == 0 and px[1, 5] == 128
    H.emit_grid([[a, b], [b, a]], "columns", tmp_path / "c.pgm")
    pc = H.read_pnm(tmp_path / "c.pgm")
    assert pc[1, 5] == 128 and pc[4, 1] == 128
    with pytest.raises(ValueError):
        H.emit_grid([[a, np.zeros((3, 3))]], "rows", tmp_path / "bad.pgm")


def test_demo2d_rejects_wrong_latent_size(tmp_path):
    from vaerobust import models as M
    with pytest.raises(ValueError, match="2-D"):
        H.demo2d(H.DemoConfig(out=str(tmp_path)), model=M.desk_vae(3))


def test_demo2d_small(tmp_path):
    out = H.demo2d(H.DemoConfig(out=str(tmp_path), n_train=60, epochs=1, n_pairs=3, steps=5))
    assert H.read_pnm(out["scatter"]).shape == (256, 256, 3)
    assert len(out["markers"]["reference"]) == 3
    assert 0.0 <= out["markers"]["fraction_closer"] <= 1.0


def test_cli_exit_codes(tmp_path, capsys):
    args = sum((["--set", f"{k}={v}"] for k, v in TINY.items()), [])
    assert cli.main(["train", "--out", str(tmp_path / "c"), *args, "--quiet"]) == 0
    assert cli.main(["metrics", "--out", str(tmp_path / "c"), *args, "--quiet"]) == 0
    assert (tmp_path / "c" / "metrics.csv").exists()
    assert cli.main(["train", "--set", "attack.nonsense=1", "--quiet"]) == 1
    assert cli.main(["train", "--out", str(tmp_path / "d"), "--data.source", "idx", "--quiet"]) == 2
    assert cli.main(["table", str(tmp_path / "c"), "--key", "run_id"]) == 0
    assert "Omega" in capsys.readouterr().out
