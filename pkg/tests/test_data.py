import gzip

import numpy as np
import pytest

from vaerobust import data as D


def _fixture(tmp_path, n=4, h=3, w=2, labels=None, gz=False):
    imgs = (np.arange(n * h * w) % 256).astype(np.uint8).reshape(n, h, w)
    labs = np.arange(n, dtype=np.uint8) % 10 if labels is None else np.asarray(labels, np.uint8)
    ip = D.write_idx(tmp_path / "img.idx", imgs, D.IMAGE_MAGIC)
    lp = D.write_idx(tmp_path / "lab.idx", labs, D.LABEL_MAGIC)
    if gz:
        for p in (ip, lp):
            p.write_bytes(gzip.compress(p.read_bytes()))
    return ip, lp, imgs, labs


@pytest.mark.parametrize("gz", [False, True])
def test_idx_round_trip(tmp_path, gz):
    ip, lp, imgs, labs = _fixture(tmp_path, gz=gz)
    split = D.load_idx(ip, lp)
    assert split.images.shape == (4, 1, 3, 2)
    np.testing.assert_array_equal(split.images[:, 0], imgs / 255.0)
    np.testing.assert_array_equal(split.labels, labs)
    assert len(split.provenance["images_sha256"]) == 64


def test_idx_header_bytes_by_hand(tmp_path):
    raw = bytes([0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 128, 1])
    (tmp_path / "i").write_bytes(raw)
    (tmp_path / "l").write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 1, 7]))
    s = D.load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_array_equal(s.images[0, 0], [[0, 1], [128 / 255, 1 / 255]])
    assert s.labels.tolist() == [7]


def test_empty_file_is_truncated(tmp_path):
    ip, lp, *_ = _fixture(tmp_path)
    ip.write_bytes(b"")
    with pytest.raises(D.IdxTruncatedError):
        D.load_idx(ip, lp)


def test_short_payload_is_truncated(tmp_path):
    ip, lp, *_ = _fixture(tmp_path)
    ip.write_bytes(ip.read_bytes()[:-3])
    with pytest.raises(D.IdxTruncatedError):
        D.load_idx(ip, lp)


def test_bad_magic(tmp_path):
    ip, lp, *_ = _fixture(tmp_path)
    with pytest.raises(D.IdxMagicError):
        D.load_idx(lp, ip)


def test_count_mismatch(tmp_path):
    ip, lp, *_ = _fixture(tmp_path, labels=[1, 2, 3])
    with pytest.raises(D.IdxCountMismatchError):
        D.load_idx(ip, lp)


def test_dataset_split_validates_range():
    with pytest.raises(ValueError):
        D.DatasetSplit(np.full((2, 1, 2, 2), 1.5), [0, 1])
    with pytest.raises(ValueError):
        D.DatasetSplit(np.zeros((2, 1, 2, 2)), [0])


def test_synthetic_is_deterministic_and_balanced():
    a = D.make_synthetic("shapes", 250, seed=3)
    b = D.make_synthetic("shapes", 250, seed=3)
    assert a.images.tobytes() == b.images.tobytes()
    assert np.bincount(a.labels).tolist() == [25] * 10
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert not np.array_equal(a.images, D.make_synthetic("shapes", 250, seed=4).images)


def test_synthetic_classes_are_distinct():
    s = D.make_synthetic("shapes", 200, seed=0)
    means = np.stack([s.images[s.labels == c].mean(axis=0).ravel() for c in range(10)])
    dists = np.linalg.norm(means[:, None] - means[None], axis=2)
    assert dists[~np.eye(10, dtype=bool)].min() > 0.5


def test_synthetic_rejects_unknown_kind():
    with pytest.raises(ValueError):
        D.make_synthetic("faces", 10)


def test_select_pairs_stratified_and_disjoint():
    s = D.make_synthetic("points2d", 300, seed=1)
    sel = D.select_pairs(s, 10, n_targets=5, seed=0)
    assert len(sel) == 50 and sel.mode == "supervised"
    assert sorted(np.bincount(s.labels[sel.ref_ids], minlength=10).tolist()) == [1] * 10
    assert not set(sel.ref_ids) & set(sel.target_ids)
    assert len(set(s.labels[sel.target_ids].tolist())) == 5
    assert sel.items() == D.select_pairs(s, 10, n_targets=5, seed=0).items()


def test_select_pairs_unsupervised_plan():
    s = D.make_synthetic("points2d", 100, seed=1)
    sel = D.select_pairs(s, 4, inits=6, seed=2)
    assert len(sel) == 24 and {i for _, t, i in sel} == set(range(6))
    assert all(t is None for _, t, _ in sel)


def test_select_pairs_insufficient_members():
    s = D.make_synthetic("points2d", 20, seed=1)
    with pytest.raises(D.InsufficientClassMembers):
        D.select_pairs(s, 40)
    with pytest.raises(ValueError):
        D.select_pairs(s, 2, n_targets=2, inits=2)
