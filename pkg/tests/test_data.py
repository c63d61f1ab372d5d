import gzip

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from nsad.data import (DataError, Dataset, IdxFormatError, batches, count_tied_windows, load_idx, load_mnist,
                       parse_idx, read_idx, stratified_subset, synth_tied, write_idx)
from nsad.precision import Precision


def fixture(tmp_path, n=4, gz=False):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (n, 28, 28), dtype=np.uint8)
    imgs[0, 0, 0] = 255
    labels = np.arange(n, dtype=np.uint8) % 10
    suffix = ".gz" if gz else ""
    write_idx(tmp_path / f"img{suffix}", imgs)
    write_idx(tmp_path / f"lab{suffix}", labels)
    return imgs, labels, tmp_path / f"img{suffix}", tmp_path / f"lab{suffix}"


class TestIdx:
    @pytest.mark.parametrize("gz", [False, True])
    def test_fixture_load(self, tmp_path, gz):
        imgs, labels, ip, lp = fixture(tmp_path, gz=gz)
        ds = load_idx(ip, lp)
        assert ds.images.shape == (4, 1, 28, 28) and ds.images.dtype == np.float32
        assert ds.labels.tolist() == labels.tolist()
        assert ds.images[0, 0, 0, 0] == np.float32(1.0)

    def test_magic_bytes(self, tmp_path):
        _, _, ip, lp = fixture(tmp_path)
        assert ip.read_bytes()[:4] == bytes([0, 0, 8, 3])
        assert lp.read_bytes()[:4] == bytes([0, 0, 8, 1])

    @given(hnp.arrays(st.sampled_from([np.uint8, np.int8, np.int16, np.int32, np.float32, np.float64]),
                      hnp.array_shapes(min_dims=1, max_dims=3, max_side=5)))
    def test_roundtrip(self, arr):
        import tempfile
        from pathlib import Path
        with tempfile.TemporaryDirectory() as d:
            p = Path(d) / "a.idx"
            write_idx(p, arr)
            back = read_idx(p)
            assert back.dtype == arr.dtype.newbyteorder("=") and back.shape == arr.shape
            assert back.tobytes() == arr.astype(back.dtype).tobytes()
            write_idx(p, back)
            assert read_idx(p).tobytes() == back.tobytes()

    def test_gz_bytes_reproducible(self, tmp_path):
        a = np.arange(10, dtype=np.uint8)
        write_idx(tmp_path / "a.gz", a)
        write_idx(tmp_path / "b.gz", a)
        assert (tmp_path / "a.gz").read_bytes() == (tmp_path / "b.gz").read_bytes()
        assert gzip.decompress((tmp_path / "a.gz").read_bytes())[:4] == bytes([0, 0, 8, 1])

    def test_truncated(self, tmp_path):
        _, _, ip, _ = fixture(tmp_path)
        buf = ip.read_bytes()[:-10]
        with pytest.raises(IdxFormatError, match=r"truncated.*need 3136 data bytes, found 3126") as e:
            parse_idx(buf)
        assert e.value.offset == 16 + 3126

    def test_bad_magic(self):
        with pytest.raises(IdxFormatError, match="magic"):
            parse_idx(b"\x01\x00\x08\x01\x00\x00\x00\x00")
        with pytest.raises(IdxFormatError, match="unknown type"):
            parse_idx(b"\x00\x00\x07\x01\x00\x00\x00\x00")
        with pytest.raises(IdxFormatError, match="too short"):
            parse_idx(b"\x00")

    def test_trailing(self):
        with pytest.raises(IdxFormatError, match="trailing"):
            parse_idx(bytes([0, 0, 8, 1, 0, 0, 0, 1, 5, 6]))

    def test_precisions(self, tmp_path):
        _, _, ip, lp = fixture(tmp_path)
        for p in Precision:
            assert load_idx(ip, lp, p).images.dtype == p.dtype

    def test_standardise_knob(self, tmp_path):
        _, _, ip, lp = fixture(tmp_path)
        x = load_idx(ip, lp, Precision.B64, normalize="standard").images
        assert abs(x.mean()) < 1e-12 and abs(x.std() - 1) < 1e-12
        with pytest.raises(ValueError):
            load_idx(ip, lp, normalize="minmax")

    def test_missing_mnist(self, tmp_path):
        with pytest.raises(DataError, match="fetch_mnist"):
            load_mnist("train", tmp_path)


class TestDataset:
    def test_label_checks(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 1, 2, 2)), np.array([0, 10]))
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 1, 2, 2)), np.array([0]))

    @given(st.integers(1, 300), st.integers(0, 100))
    def test_stratified(self, n, seed):
        labels = np.repeat(np.arange(10), [50, 30, 30, 30, 30, 30, 30, 30, 20, 20])
        ds = Dataset(np.zeros((300, 1, 1, 1)), labels)
        sub = stratified_subset(ds, n, seed)
        assert len(sub) == n
        want = n * np.bincount(labels) / 300
        assert np.all(np.abs(np.bincount(sub.labels, minlength=10) - want) <= 1)
        again = stratified_subset(ds, n, seed)
        assert np.array_equal(sub.labels, again.labels)

    def test_batches(self):
        ds = Dataset(np.arange(10.0).reshape(10, 1, 1, 1), np.arange(10) % 3, classes=3)
        bt = batches(ds, 4)
        assert len(bt) == 2 and bt[1][1].tolist() == [1, 2, 0, 1]
        assert len(batches(ds, 4, drop_last=False)) == 3


class TestSynthTied:
    def test_all_tied(self):
        ds = synth_tied(3, 1.0, seed=1)
        assert count_tied_windows(ds.images) == 3 * 196

    def test_none_tied(self):
        ds = synth_tied(3, 0.0, seed=1)
        assert count_tied_windows(ds.images) == 0

    @given(st.floats(0, 1), st.integers(0, 50))
    def test_fraction(self, f, seed):
        ds = synth_tied(2, f, size=12, seed=seed)
        assert count_tied_windows(ds.images) == 2 * int(np.ceil(f * 36))
        assert ds.images.min() >= 0 and ds.images.max() <= 1

    def test_constant_images_all_tied(self):
        assert count_tied_windows(np.full((2, 1, 6, 6), 0.3)) == 18

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            synth_tied(1, 1.5)

    def test_ties_reach_first_pool(self):
        # with a 1x1 unit kernel the first conv passes every flat window through
        from nsad import tensor as T
        from nsad.nonsmooth import PoolGeometry, maxpool_forward
        ds = synth_tied(1, 0.5, size=8, seed=3)
        z = T.conv2d(ds.images, np.ones((1, 1, 1, 1)))
        _, mask = maxpool_forward(z, PoolGeometry())
        assert int(np.sum(mask.sum(-1) > 1)) == count_tied_windows(ds.images)
