import numpy as np
import pytest

from ntklab.io import (
    read_matrix_bin,
    read_pgm,
    read_table_csv,
    sha256_file,
    svg_image_montage,
    svg_line_plot,
    write_json,
    write_matrix_bin,
    write_pgm,
    write_table_csv,
)


def test_matrix_bin_round_trip(tmp_path):
    M = np.random.default_rng(0).standard_normal((3, 5))
    path = write_matrix_bin(tmp_path / "m.bin", M)
    raw = path.read_bytes()
    assert raw[:8] == np.array([3, 5], dtype="<u4").tobytes() and len(raw) == 8 + 8 * 15
    np.testing.assert_array_equal(read_matrix_bin(path), M)
    (tmp_path / "bad.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        read_matrix_bin(tmp_path / "bad.bin")


def test_table_csv_round_trip(tmp_path):
    cols = {"t": np.array([0.0, 0.1, 1 / 3]), "name": ["a", "b", "c"]}
    write_table_csv(tmp_path / "t.csv", cols)
    back = read_table_csv(tmp_path / "t.csv")
    np.testing.assert_array_equal(back["t"], cols["t"])
    assert back["name"] == ["a", "b", "c"]
    with pytest.raises(ValueError):
        write_table_csv(tmp_path / "x.csv", {"a": [1, 2], "b": [1]})


def test_json_and_hash(tmp_path):
    p = write_json(tmp_path / "a.json", {"x": np.float64(1.5), "v": np.arange(3)})
    assert '"v": [\n    0,' in p.read_text()
    assert len(sha256_file(p)) == 64


def test_pgm_and_svg(tmp_path):
    img = np.linspace(-1, 1, 12).reshape(3, 4)
    write_pgm(tmp_path / "a.pgm", img)
    back = read_pgm(tmp_path / "a.pgm")
    assert back.shape == (3, 4) and back.min() == 0 and back.max() == 255
    svg_line_plot(tmp_path / "p.svg", {"loss": ([1, 2, 3], [1.0, 0.5, 0.25])}, logy=True)
    svg_image_montage(tmp_path / "m.svg", [img, img], ["a", "b"])
    assert (tmp_path / "p.svg").read_text().startswith("<svg")
    assert "<svg" in (tmp_path / "m.svg").read_text()
