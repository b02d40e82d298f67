import numpy as np
import pytest

from fedmpdd.federation import RoundRecord
from fedmpdd.reporting import MetricsWriter, fmt, read_metrics, read_pgm, to_gray8, write_pgm


def rec(k, acc=None):
    return RoundRecord(k, 0.1 + 1 / 3 * k, acc, 16, 16 * (k + 1), 2.0 / 7)


class TestMetrics:
    def test_round_trip_exact(self, tmp_path):
        records = [rec(0), rec(1, 0.123456789012345678), rec(2)]
        with MetricsWriter(tmp_path / "m.csv") as w:
            for r in records:
                w(r)
        assert read_metrics(tmp_path / "m.csv") == records

    def test_rows_flushed_before_close(self, tmp_path):
        w = MetricsWriter(tmp_path / "m.csv")
        w(rec(0))
        assert (tmp_path / "m.csv").read_text().count("\n") == 2
        w.close()

    def test_lf_and_digits(self, tmp_path):
        with MetricsWriter(tmp_path / "m.csv") as w:
            w(rec(1))
        raw = (tmp_path / "m.csv").read_bytes()
        assert b"\r" not in raw
        assert fmt(0.1) == "0.10000000000000001"

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("a,b\n")
        with pytest.raises(ValueError):
            read_metrics(tmp_path / "m.csv")


class TestPgm:
    def test_round_trip(self, tmp_path):
        img = np.linspace(0, 1, 12).reshape(3, 4)
        write_pgm(tmp_path / "x.pgm", img)
        assert np.array_equal(read_pgm(tmp_path / "x.pgm"), to_gray8(img))
        assert (tmp_path / "x.pgm").read_bytes().startswith(b"P5\n4 3\n255\n")

    def test_clips(self):
        assert to_gray8(np.array([-1.0, 0.5, 2.0])).tolist() == [0, 128, 255]

    def test_rejects_other_formats(self, tmp_path):
        (tmp_path / "x.pgm").write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(ValueError):
            read_pgm(tmp_path / "x.pgm")
