import numpy as np
import pytest

from salshift.data import (PlantedShiftSpec, augment, channel_stats, crop, gen_planted, hflip, load_cifar10,
                           load_dataset, planted_scores, read_cifar_records, save_dataset, write_cifar_records)
from salshift.shift import shift_forward
from salshift.tensor import Rng


@pytest.mark.parametrize("classes", [2, 4])
def test_planted_oracle_is_perfect_without_noise(classes):
    spec = PlantedShiftSpec(C=8, S=3, classes=classes, seed=3)
    x, y = gen_planted(spec, 500)
    assert x.shape == (500, 8, 3, 3) and x.dtype == np.float32
    pred = shift_forward(x.astype(np.float64), spec.oracle()).reshape(500, classes).argmax(axis=1)
    assert (pred == y).all()


def test_planted_margin_is_enforced():
    spec = PlantedShiftSpec(classes=3, margin=0.8)
    x, _ = gen_planted(spec, 300)
    top2 = np.sort(planted_scores(x, spec), axis=1)[:, -2:]
    assert (top2[:, 1] - top2[:, 0] > 0.8 - 1e-5).all()


def test_planted_two_class_rows_share_positions():
    spec = PlantedShiftSpec(C=8, classes=2, seed=1)
    assert np.array_equal(spec.planted_table[0], spec.planted_table[1])
    assert spec.planted_weights.tolist() == [[1.0] * 8, [-1.0] * 8]


def test_planted_multi_class_positions_differ_per_channel():
    table = PlantedShiftSpec(C=6, classes=5, seed=2).planted_table
    for c in range(6):
        assert len(set(table[:, c])) == 5


def test_planted_determinism_and_seed_sensitivity():
    spec = PlantedShiftSpec()
    a, b = gen_planted(spec, 50), gen_planted(spec, 50)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(gen_planted(spec, 50, seed=9)[0], a[0])
    assert not np.array_equal(gen_planted(PlantedShiftSpec(seed=1), 50)[0], gen_planted(PlantedShiftSpec(seed=2), 50)[0])


def test_planted_labels_are_balanced_enough():
    _, y = gen_planted(PlantedShiftSpec(), 2000)
    assert 0.4 < y.mean() < 0.6


def test_planted_noise_changes_inputs_only():
    clean = gen_planted(PlantedShiftSpec(), 100)
    noisy = gen_planted(PlantedShiftSpec(noise_sigma=0.5), 100)
    assert np.array_equal(clean[1], noisy[1])
    assert not np.array_equal(clean[0], noisy[0])


def test_planted_validation():
    with pytest.raises(ValueError):
        PlantedShiftSpec(classes=1)
    with pytest.raises(ValueError):
        PlantedShiftSpec(classes=10, S=3)
    with pytest.raises(ValueError):
        PlantedShiftSpec(S=2)
    with pytest.raises(ValueError):
        PlantedShiftSpec(planted_table=np.zeros((3, 8), int))


def _write_cifar_dir(root, n_per_file=6, files=2, seed=0):
    rng = Rng(seed)
    labels_all, pixels_all = [], []
    for i in range(files):
        labels = rng.integers(0, 10, n_per_file)
        pixels = rng.integers(0, 256, (n_per_file, 3, 32, 32))
        write_cifar_records(root / f"data_batch_{i + 1}.bin", labels, pixels)
        labels_all.append(labels)
        pixels_all.append(pixels)
    write_cifar_records(root / "test_batch.bin", labels_all[0], pixels_all[0])
    return np.concatenate(labels_all), np.concatenate(pixels_all)


def test_cifar_round_trip(tmp_path):
    labels, pixels = _write_cifar_dir(tmp_path)
    x, y = load_cifar10(str(tmp_path))
    assert x.shape == (12, 3, 32, 32) and x.dtype == np.float32
    assert np.array_equal(y, labels)
    assert np.array_equal(np.round(x * 255).astype(int), pixels)
    lab, pix = read_cifar_records(str(tmp_path / "data_batch_1.bin"))
    assert np.array_equal(pix, pixels[:6])
    xt, yt = load_cifar10(str(tmp_path), train=False)
    assert np.array_equal(yt, labels[:6])


def test_cifar_subsets_and_standardisation(tmp_path):
    _write_cifar_dir(tmp_path)
    x, y = load_cifar10(str(tmp_path), count=5)
    assert len(x) == 5
    xs, _ = load_cifar10(str(tmp_path), count=8, seed=1)
    assert len(xs) == 8
    assert np.array_equal(xs, load_cifar10(str(tmp_path), count=8, seed=1)[0])
    z, _ = load_cifar10(str(tmp_path), normalize="standardize")
    assert np.allclose(z.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    assert np.allclose(z.std(axis=(0, 2, 3)), 1, atol=1e-4)
    empty, ey = load_cifar10(str(tmp_path), count=0)
    assert empty.shape == (0, 3, 32, 32) and ey.shape == (0,)


def test_cifar_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cifar10(str(tmp_path))
    _write_cifar_dir(tmp_path, files=1)
    with pytest.raises(ValueError, match="only 6"):
        load_cifar10(str(tmp_path), count=7)
    with pytest.raises(ValueError, match="normalization"):
        load_cifar10(str(tmp_path), normalize="zscore")
    bad = tmp_path / "truncated.bin"
    bad.write_bytes(b"\x00" * 3000)
    with pytest.raises(ValueError, match="truncated"):
        read_cifar_records(str(bad))
    wrong = tmp_path / "label.bin"
    write_cifar_records(wrong, [12], np.zeros((1, 3, 32, 32)))
    with pytest.raises(ValueError, match="label byte 12"):
        read_cifar_records(str(wrong))


def test_channel_stats():
    x = np.stack([np.zeros((2, 2)), np.ones((2, 2)), np.full((2, 2), 2.0)])[None].astype(np.float32)
    mean, std = channel_stats(x)
    assert mean.tolist() == [0.0, 1.0, 2.0]
    assert (std > 0).all()


def test_flip_and_crop():
    img = np.zeros((1, 1, 4, 4))
    img[..., 0] = 1.0
    assert (hflip(img)[..., -1] == 1).all() and (hflip(img)[..., 0] == 0).all()
    assert np.array_equal(hflip(hflip(img)), img)
    shifted = crop(img, 4, 8, pad=4)  # max horizontal offset: everything moves left by 4
    assert (shifted == 0).all()
    same = crop(img, 4, 4, pad=4)
    assert np.array_equal(same, img)


def test_augment_is_seeded_and_shape_preserving():
    x = Rng(0).normal(size=(5, 3, 8, 8), dtype=np.float32)
    a, b = augment(x, Rng(1)), augment(x, Rng(1))
    assert a.shape == x.shape and a.dtype == x.dtype
    assert np.array_equal(a, b)


def test_dataset_container_round_trip(tmp_path):
    x = Rng(0).normal(size=(4, 2, 3, 3), dtype=np.float32)
    y = np.array([0, 1, 1, 0])
    path = str(tmp_path / "d.bin")
    save_dataset(path, x, y)
    x2, y2 = load_dataset(path)
    assert np.array_equal(x, x2) and np.array_equal(y, y2)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-4])
    with pytest.raises(ValueError, match="expected"):
        load_dataset(path)
    open(path, "wb").write(b"NOTMAGIC" + blob[8:])
    with pytest.raises(ValueError, match="not a salshift dataset"):
        load_dataset(path)
    with pytest.raises(ValueError):
        save_dataset(path, x[0], y)
