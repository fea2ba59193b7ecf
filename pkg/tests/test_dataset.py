import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from conftest import write_png
from platenet import dataset as ds
from platenet.augment import AugmentConfig
from platenet.errors import DatasetError


def make_tree(root, n_ok, n_bad, size=2):
    for name, count in (("ok", n_ok), ("bad", n_bad)):
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            write_png(d / f"{name}_{i:04d}.png", np.full((size, size), (i * 7) % 256))
    return root


def fake_index(n_ok, n_bad):
    entries = [ds.Entry(f"ok/{i:04d}.png", 0) for i in range(n_ok)]
    entries += [ds.Entry(f"bad/{i:04d}.png", 1) for i in range(n_bad)]
    return ds.DatasetIndex(entries)


class TestScan:
    def test_labels_and_order(self, tiny_tree):
        index = ds.scan(tiny_tree)
        assert len(index) == 10
        assert [e.label for e in index.entries] == [0] * 6 + [1] * 4
        names = [e.path.rsplit("/", 1)[1] for e in index.entries]
        assert names[:2] == ["ok_00.png", "ok_01.png"] and names[6] == "bad_00.png"

    def test_counts_from_large_tree(self, tmp_path):
        index = ds.scan(make_tree(tmp_path / "t", 474, 456))
        assert len(index) == 930 and index.counts() == {0: 474, 1: 456}

    def test_only_ok(self, tmp_path):
        index = ds.scan(make_tree(tmp_path / "t", 3, 0))
        assert {e.label for e in index.entries} == {0}

    def test_unsupported_files_skipped(self, tiny_tree, caplog):
        (tiny_tree / "ok" / "notes.txt").write_text("x")
        (tiny_tree / "bad" / "photo.jpg").write_bytes(b"")
        index = ds.scan(tiny_tree)
        assert len(index) == 10 and index.skipped == 2
        assert "skipped 2" in caplog.text

    def test_missing_root(self, tmp_path):
        with pytest.raises(DatasetError, match="not found"):
            ds.scan(tmp_path / "nope")

    def test_empty_tree(self, tmp_path):
        (tmp_path / "ok").mkdir()
        with pytest.raises(DatasetError, match="no images"):
            ds.scan(tmp_path)

    def test_rescan_idempotent(self, tiny_tree):
        assert ds.scan(tiny_tree) == ds.scan(tiny_tree)


class TestSplit:
    @pytest.mark.parametrize("fraction,train,val", [(0.2, 596, 148), (0.15, 632, 112), (0.0, 744, 0)])
    def test_sizes_on_744(self, fraction, train, val):
        index = ds.split(fake_index(372, 372), fraction)
        assert len(index.subset(ds.TRAINING)) == train
        assert len(index.subset(ds.VALIDATION)) == val

    def test_validation_is_per_class_tail(self):
        index = ds.split(fake_index(10, 5), 0.2)
        val = index.subset(ds.VALIDATION)
        assert [e.path for e in val] == ["ok/0008.png", "ok/0009.png", "bad/0004.png"]

    def test_round_half_up_in_exact_arithmetic(self):
        assert ds.validation_count(372, 0.2) == 74  # 74.4
        assert ds.validation_count(10, 0.15) == 2  # 1.5 exactly, would be 1 under half-even
        assert ds.validation_count(372, 0.15) == 56  # 55.8

    def test_empty_training_rejected(self):
        with pytest.raises(DatasetError):
            ds.split(fake_index(1, 1), 0.6)

    def test_fraction_bounds(self):
        with pytest.raises(ValueError):
            ds.split(fake_index(3, 3), 1.0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 60), st.integers(0, 60), st.floats(0, 0.45))
    def test_partition_and_proportion(self, n_ok, n_bad, fraction):
        index = ds.split(fake_index(n_ok, n_bad), fraction)
        train, val = index.subset(ds.TRAINING), index.subset(ds.VALIDATION)
        assert len(train) + len(val) == n_ok + n_bad
        assert not {e.path for e in train} & {e.path for e in val}
        for label, n in ((0, n_ok), (1, n_bad)):
            got = sum(e.label == label for e in val)
            assert abs(got - fraction * n) <= 0.5 + 1e-9


class TestLoadImage:
    def test_grayscale_identity(self, tmp_path, rng):
        pixels = rng.integers(0, 256, (300, 300)).astype(np.uint8)
        out = ds.load_image(write_png(tmp_path / "g.png", pixels))
        assert out.shape == (300, 300, 1) and out.dtype == np.float32
        np.testing.assert_array_equal(out[:, :, 0], pixels)

    def test_white_rgb(self, tmp_path):
        path = write_png(tmp_path / "w.png", np.full((10, 10, 3), 255), mode="RGB")
        assert np.all(ds.load_image(path, (10, 10)) == 255)

    def test_luma_rounding(self, tmp_path):
        px = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255], [10, 20, 30]]], dtype=np.uint8)
        out = ds.load_image(write_png(tmp_path / "c.png", px, mode="RGB"), (1, 4))[0, :, 0]
        # 76.245, 149.685, 29.07, 0.299*10 + 0.587*20 + 0.114*30 = 18.15
        np.testing.assert_array_equal(out, [76, 150, 29, 18])

    def test_checkerboard_decimation(self, tmp_path):
        blocks = (np.indices((300, 300)).sum(axis=0) % 2) * 255
        big = np.kron(blocks, np.ones((2, 2)))
        assert big.shape == (600, 600)
        out = ds.load_image(write_png(tmp_path / "cb.png", big))[:, :, 0]
        np.testing.assert_array_equal(out, blocks)

    def test_pgm(self, tmp_path):
        path = tmp_path / "p.pgm"
        Image.fromarray(np.full((5, 5), 77, np.uint8)).save(path)
        assert np.all(ds.load_image(path, (5, 5)) == 77)

    def test_corrupt_file_names_path(self, tmp_path):
        path = tmp_path / "broken.png"
        path.write_bytes(b"\x89PNG not really")
        with pytest.raises(ds.ImageLoadError, match="broken.png"):
            ds.load_image(path)

    def test_upsample_nearest(self):
        out = ds.resize_nearest(np.array([[1, 2], [3, 4]]), (4, 4))
        np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


class TestBatches:
    def test_596_gives_ten_batches(self, tmp_path):
        index = ds.split(ds.scan(make_tree(tmp_path / "t", 372, 372)), 0.2)
        sizes = [len(b) for b in ds.batches(index, ds.TRAINING, 64, shuffle=True, target_size=(2, 2))]
        assert sizes == [64] * 9 + [20]

    def test_186_unshuffled_in_order(self, tmp_path):
        index = ds.scan(make_tree(tmp_path / "t", 95, 91))
        got = list(ds.batches(index, ds.TRAINING, 64, target_size=(2, 2)))
        assert [len(b) for b in got] == [64, 64, 58]
        assert [p for b in got for p in b.paths] == [e.path for e in index.entries]

    def test_epoch_covers_everything_once(self, tiny_tree):
        index = ds.scan(tiny_tree)
        for epoch in range(3):
            paths = [p for b in ds.batches(index, ds.TRAINING, 3, shuffle=True, epoch=epoch,
                                           target_size=(8, 8)) for p in b.paths]
            assert sorted(paths) == sorted(e.path for e in index.entries)

    def test_epochs_reshuffle(self, tiny_tree):
        index = ds.scan(tiny_tree)
        orders = {tuple(p for b in ds.batches(index, ds.TRAINING, 10, shuffle=True, epoch=e,
                                               target_size=(8, 8)) for p in b.paths) for e in range(4)}
        assert len(orders) > 1

    def test_deterministic_and_worker_independent(self, tiny_tree):
        index = ds.scan(tiny_tree)
        cfg = AugmentConfig()

        def run(workers):
            return [(b.inputs.tobytes(), tuple(b.paths), b.labels.tobytes())
                    for b in ds.batches(index, ds.TRAINING, 4, shuffle=True, augment=cfg, epoch=2,
                                        target_size=(8, 8), workers=workers)]

        assert run(1) == run(1) == run(3)

    def test_thread_env_override(self, tiny_tree, monkeypatch):
        index = ds.scan(tiny_tree)
        plain = [b.inputs.tobytes() for b in ds.batches(index, ds.TRAINING, 4, target_size=(8, 8))]
        monkeypatch.setenv(ds.THREADS_ENV, "4")
        threaded = [b.inputs.tobytes() for b in ds.batches(index, ds.TRAINING, 4, target_size=(8, 8))]
        assert plain == threaded

    def test_passthrough_values(self, tiny_tree):
        batch = next(iter(ds.batches(ds.scan(tiny_tree), ds.TRAINING, 1, target_size=(8, 8))))
        assert batch.inputs.shape == (1, 8, 8, 1)
        assert np.all(batch.inputs == np.float32(140 / 255))
        assert batch.labels.dtype == np.float32

    def test_empty_split(self, tiny_tree):
        with pytest.raises(DatasetError):
            next(ds.batches(ds.scan(tiny_tree), ds.VALIDATION))


def tree_digest(root):
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


class TestSynthesize:
    def test_empty_request(self, tmp_path):
        manifest = ds.synthesize(0, 0, 32, 1, tmp_path)
        assert open(manifest).read() == ""
        for part in ("train", "test"):
            for name in ("ok", "bad"):
                assert (tmp_path / part / name).is_dir()

    def test_layout_and_manifest(self, tmp_path):
        manifest = ds.synthesize(10, 10, 48, 3, tmp_path)
        rows = ds.read_manifest(manifest)
        assert len(rows) == 20
        assert len(list((tmp_path / "train" / "ok").iterdir())) == 8
        assert len(list((tmp_path / "test" / "bad").iterdir())) == 2
        for rel, label, defects in rows:
            assert (tmp_path / rel).is_file()
            assert bool(defects) == bool(label)
            assert set(defects) <= set(ds.DEFECT_TYPES)
            img = np.asarray(Image.open(tmp_path / rel))
            assert img.shape == (48, 48) and img.dtype == np.uint8

    def test_seed_gives_identical_bytes(self, tmp_path):
        ds.synthesize(4, 4, 40, 9, tmp_path / "a")
        ds.synthesize(4, 4, 40, 9, tmp_path / "b")
        ds.synthesize(4, 4, 40, 10, tmp_path / "c")
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b") != tree_digest(tmp_path / "c")

    def test_ok_background_statistics(self):
        img = ds.render_surface(np.random.default_rng(0), (200, 200)).astype(float)
        assert 125 < np.median(img) < 155
        assert (img > np.median(img) + 25).mean() > 0.001  # some grit present

    def test_defects_change_the_image(self):
        for kind in ds.DEFECT_TYPES:
            plain = ds.render_surface(np.random.default_rng(5), (100, 100)).astype(float)
            # the same stream, with one defect drawn after the base and grit
            marked = ds.render_surface(np.random.default_rng(5), (100, 100), (kind,)).astype(float)
            assert np.abs(plain - marked).sum() > 0
        with pytest.raises(ValueError):
            ds.render_surface(np.random.default_rng(0), (10, 10), ("dent",))

    def test_class_mean_separability(self, tmp_path):
        """200 ok + 200 bad at 300x300: class-mean images differ by > 3 levels on average."""
        ds.synthesize(200, 200, 300, 123, tmp_path)
        means = []
        for name in ("ok", "bad"):
            files = sorted(tmp_path.glob(f"*/{name}/*.png"))
            assert len(files) == 200
            acc = np.zeros((300, 300))
            for f in files:
                acc += np.asarray(Image.open(f), dtype=np.float64)
            means.append(acc / len(files))
        assert np.abs(means[0] - means[1]).mean() > 3
