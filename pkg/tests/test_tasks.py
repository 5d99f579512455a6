import gzip
import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import eval_legendre

from lssl.tasks import (
    DataFormatError,
    Dataset,
    bandlimited_signal,
    legendre_normalized,
    legs_memory,
    load_idx,
    make_delay_task,
    read_signal_csv,
    reconstruct_history,
    resample_sequence,
    write_dataset_csv,
    write_idx,
)


@pytest.fixture
def idx_pair(tmp_path, rng):
    images = rng.integers(0, 256, size=(7, 4, 3), dtype=np.uint8)
    labels = rng.integers(0, 10, size=7, dtype=np.uint8)
    img, lab = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(img, lab, images, labels)
    return img, lab, images, labels


class TestDataset:
    def test_shapes(self):
        ds = Dataset(np.zeros((3, 5)), np.array([0, 2, 1]), "train", "classify")
        assert (len(ds), ds.length, ds.n_classes) == (3, 5, 3)

    def test_subset(self):
        ds = Dataset(np.arange(12.0).reshape(4, 3), np.array([0, 1, 0, 1]), "train", "classify")
        sub = ds.subset([1, 3], split="val")
        assert sub.split == "val"
        np.testing.assert_array_equal(sub.X, ds.X[[1, 3]])

    def test_rejects_bad_enum(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((1, 2)), np.array([0]), "holdout", "classify")

    def test_rejects_negative_label(self):
        with pytest.raises(DataFormatError):
            Dataset(np.zeros((1, 2)), np.array([-1]), "train", "classify")

    def test_regression_has_no_classes(self):
        with pytest.raises(AttributeError):
            Dataset(np.zeros((1, 2)), np.zeros((1, 2)), "train", "regress").n_classes


class TestIDX:
    def test_roundtrip(self, idx_pair):
        img, lab, images, labels = idx_pair
        ds = load_idx(img, lab)
        assert ds.X.shape == (7, 12)
        np.testing.assert_array_equal(np.rint(ds.X * 255).astype(np.uint8), images.reshape(7, 12))
        np.testing.assert_array_equal(ds.y, labels)
        assert ds.meta["rows"] == 4 and ds.meta["cols"] == 3

    def test_bytes_roundtrip(self, idx_pair, tmp_path):
        img, lab, _, _ = idx_pair
        ds = load_idx(img, lab)
        img2, lab2 = tmp_path / "i2", tmp_path / "l2"
        write_idx(img2, lab2, np.rint(ds.X * 255).reshape(7, 4, 3), ds.y)
        assert img2.read_bytes() == img.read_bytes() and lab2.read_bytes() == lab.read_bytes()

    def test_header_layout(self, idx_pair):
        img, lab, _, labels = idx_pair
        assert struct.unpack(">4I", img.read_bytes()[:16]) == (0x803, 7, 4, 3)
        raw = lab.read_bytes()
        assert struct.unpack(">2I", raw[:8]) == (0x801, 7)
        assert raw[8] == labels[0] == load_idx(img, lab).y[0]

    def test_gzip(self, idx_pair, tmp_path):
        img, lab, images, _ = idx_pair
        gz = tmp_path / "img.idx.gz"
        gz.write_bytes(gzip.compress(img.read_bytes()))
        np.testing.assert_array_equal(load_idx(gz, lab).X, load_idx(img, lab).X)

    def test_limit(self, idx_pair):
        img, lab, _, _ = idx_pair
        assert len(load_idx(img, lab, limit=0)) == 0
        assert len(load_idx(img, lab, limit=3)) == 3

    def test_bad_magic(self, idx_pair):
        img, lab, _, _ = idx_pair
        raw = bytearray(img.read_bytes())
        raw[3] = 0x01
        img.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError):
            load_idx(img, lab)

    def test_truncated(self, idx_pair):
        img, lab, _, _ = idx_pair
        img.write_bytes(img.read_bytes()[:-1])
        with pytest.raises(DataFormatError):
            load_idx(img, lab)

    def test_count_mismatch(self, tmp_path, rng):
        img, lab = tmp_path / "i", tmp_path / "l"
        write_idx(img, lab, np.zeros((3, 2, 2)), np.zeros(3))
        write_idx(tmp_path / "x", lab, np.zeros((2, 2, 2)), np.zeros(2))
        with pytest.raises(DataFormatError):
            load_idx(img, lab)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_idx(tmp_path / "nope", tmp_path / "nope2")


class TestDelay:
    def test_literal_shift(self):
        ds = make_delay_task(30, 7, 5, seed=1)
        for i in range(5):
            for t in range(30):
                assert ds.y[i, t] == (ds.X[i, t - 7] if t >= 7 else 0.0)

    def test_zero_delay(self):
        ds = make_delay_task(10, 0, 3, seed=0)
        np.testing.assert_array_equal(ds.y, ds.X)

    def test_max_delay(self):
        ds = make_delay_task(10, 9, 3, seed=0)
        assert np.all(ds.y[:, :9] == 0) and np.all(ds.y[:, 9] == ds.X[:, 0])

    def test_range_and_determinism(self):
        a, b = make_delay_task(50, 5, 4, seed=3), make_delay_task(50, 5, 4, seed=3)
        assert a.X.tobytes() == b.X.tobytes()
        assert a.X.min() >= -1 and a.X.max() <= 1

    def test_bad_delay(self):
        with pytest.raises(ValueError):
            make_delay_task(10, 10, 1, seed=0)


class TestLegendre:
    def test_matches_scipy(self):
        z = np.linspace(-1, 1, 51)
        ref = np.array([np.sqrt(n + 0.5) * eval_legendre(n, z) for n in range(40)])
        np.testing.assert_allclose(legendre_normalized(40, z), ref, atol=1e-11)

    def test_orthonormal(self):
        z, w = np.polynomial.legendre.leggauss(80)
        P = legendre_normalized(60, z)
        np.testing.assert_allclose((P * w) @ P.T, np.eye(60), atol=1e-12)

    def test_stable_at_high_order(self):
        assert np.all(np.isfinite(legendre_normalized(256, np.linspace(-1, 1, 11))))


class TestMemory:
    def test_constant_signal(self):
        _, _, rep = reconstruct_history(np.ones(200), 0.01, 4)
        assert rep.l2_error < 1e-3

    def test_linear_signal_exact_up_to_discretization(self):
        t = np.arange(1, 1001) / 1000
        _, _, rep = reconstruct_history(t, 1e-3, 8)
        assert rep.l2_error < 1e-3

    def test_white_noise_improves(self, rng):
        u = rng.normal(size=500)
        e4 = reconstruct_history(u, 0.01, 4)[2].l2_error
        e64 = reconstruct_history(u, 0.01, 64)[2].l2_error
        assert e64 < e4

    def test_bandlimited_monotone(self):
        u = bandlimited_signal()
        errs = [reconstruct_history(u, 1e-3, N)[2].l2_error for N in (4, 8, 16, 32, 64)]
        assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:])), errs
        assert errs[-1] < 0.1 * errs[0]

    def test_dt_invariant(self, rng):
        u = rng.normal(size=100)
        np.testing.assert_array_equal(reconstruct_history(u, 0.1, 8)[0],
                                      reconstruct_history(u, 3.0, 8)[0])

    def test_batched_columns(self, rng):
        U = rng.normal(size=(50, 3))
        X = legs_memory(U, 6)
        for j in range(3):
            np.testing.assert_allclose(X[:, j], legs_memory(U[:, j], 6), atol=1e-14)

    def test_report(self):
        _, rec, rep = reconstruct_history(np.ones(10), 0.1, 3, signal_id="ones")
        assert rec.shape == (10,) and rep.N == 3 and rep.signal_id == "ones" and rep.l2_error >= 0

    @pytest.mark.parametrize("N,u", [(0, np.ones(5)), (3, np.ones(1))])
    def test_domain(self, N, u):
        with pytest.raises(ValueError):
            reconstruct_history(u, 0.1, N)


class TestResample:
    def test_identity(self, rng):
        u = rng.normal(size=9)
        np.testing.assert_array_equal(resample_sequence(u, 1), u)

    def test_decimate(self):
        np.testing.assert_array_equal(resample_sequence(np.array([1.0, 2.0, 3.0, 4.0]), 0.5), [1, 3])

    def test_upsample_midpoints(self):
        np.testing.assert_array_equal(resample_sequence(np.array([0.0, 2.0]), 2), [0, 1, 2, 2])

    @given(L=st.integers(1, 300), seed=st.integers(0, 2**31))
    def test_roundtrip(self, L, seed):
        u = np.random.default_rng(seed).normal(size=L)
        np.testing.assert_array_equal(resample_sequence(resample_sequence(u, 2), 0.5), u)

    def test_rational_factor(self):
        assert resample_sequence(np.arange(6.0), Fraction(1, 2)).shape == (3,)

    def test_unsupported(self):
        with pytest.raises(ValueError):
            resample_sequence(np.ones(4), 3)


class TestCSV:
    def test_classify_rows(self, tmp_path):
        ds = Dataset(np.array([[0.5, 0.25]]), np.array([3]), "train", "classify")
        path = tmp_path / "d.csv"
        write_dataset_csv(path, ds)
        assert path.read_text().strip() == "3,0.5,0.25"

    def test_regress_rows(self, tmp_path):
        ds = make_delay_task(4, 1, 2, seed=0)
        path = tmp_path / "d.csv"
        write_dataset_csv(path, ds)
        rows = np.loadtxt(path, delimiter=",")
        np.testing.assert_array_equal(rows, np.hstack([ds.X, ds.y]))

    def test_read_signal(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("1.0,2.5\n-3\n")
        np.testing.assert_array_equal(read_signal_csv(path), [1.0, 2.5, -3.0])

    @pytest.mark.parametrize("text", ["1.0,abc\n", "4.0\n"])
    def test_read_signal_errors(self, tmp_path, text):
        path = tmp_path / "s.csv"
        path.write_text(text)
        with pytest.raises(DataFormatError):
            read_signal_csv(path)
