import numpy as np
import pytest

from latent_cascade.reporting import (
    format_value,
    histogram_svg,
    read_csv,
    read_key_values,
    render_histogram_png,
    write_csv,
    write_histogram_csv,
    write_key_values,
    write_lines,
)


def test_floats_round_trip_exactly(tmp_path):
    values = [0.1, 1.0 / 3.0, 2.0 ** -40, 12345.678901234567]
    path = write_csv(str(tmp_path / "sub" / "x.csv"), ["v"], [[v] for v in values])
    header, rows = read_csv(path)
    assert header == ["v"]
    assert [float(r[0]) for r in rows] == values


@pytest.mark.parametrize("value, text", [
    (True, "True"),
    (None, "None"),
    (3, "3"),
    (0.5, "0.5"),
    (np.float64(0.25), "0.25"),
])
def test_format_value(value, text):
    assert format_value(value) == text


def test_key_values_keep_order(tmp_path):
    path = write_key_values(str(tmp_path / "kv.txt"), {"b": 1, "a": "x: y", "c": 0.5})
    with open(path, encoding="utf-8") as f:
        assert [line.split(":")[0] for line in f] == ["b", "a", "c"]
    assert read_key_values(path) == {"b": "1", "a": "x: y", "c": "0.5"}


def test_write_lines(tmp_path):
    path = write_lines(str(tmp_path / "s.txt"), ["CCO", "", "C"])
    assert open(path, encoding="utf-8").read() == "CCO\n\nC\n"


def test_histogram_csv(tmp_path):
    path = write_histogram_csv(str(tmp_path / "h.csv"), [0.0, 0.5, 1.0], [3, 4])
    header, rows = read_csv(path)
    assert header == ["bin_left", "bin_right", "count"]
    assert rows == [["0", "0.5", "3"], ["0.5", "1", "4"]]


def test_histogram_svg_has_one_bar_per_bin():
    svg = histogram_svg([0.0, 1.0, 2.0, 3.0], [1, 0, 5], "norms")
    assert svg.startswith("<svg")
    assert svg.count('fill="steelblue"') == 3
    assert "norms" in svg


def test_histogram_png():
    pytest.importorskip("PIL")
    data = render_histogram_png([0.0, 1.0, 2.0], [2, 1], "norms", width=200, height=100)
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
