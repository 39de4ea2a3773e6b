"""Synthetic documents: glyph separation, balanced composition, rendering
geometry, determinism, and the on-disk format."""

import struct
from itertools import combinations

import numpy as np
import pytest

from qid.errors import ConfigError, ContractError, FormatError
from qid.synthdoc import (
    CELL_SIDE,
    GLYPH_INK,
    IMAGE_SIDE,
    encode_query_cell,
    generate_dataset,
    glyph_bitmaps,
    read_dataset,
    write_dataset,
)


# ---------------------------------------------------------------------------
# glyphs and query encoding
# ---------------------------------------------------------------------------


def test_glyphs_are_pairwise_distant():
    glyphs = glyph_bitmaps(8)
    assert glyphs.shape == (8, 8, 8)
    assert set(np.unique(glyphs)) <= {0, 1}
    for a, b in combinations(range(8), 2):
        hamming = int(np.sum(glyphs[a] != glyphs[b]))
        assert hamming >= 16, f"glyphs {a},{b} differ in only {hamming} px"


def test_glyph_count_bounds():
    assert glyph_bitmaps(1).shape == (1, 8, 8)
    with pytest.raises(ConfigError):
        glyph_bitmaps(0)
    with pytest.raises(ConfigError):
        glyph_bitmaps(9)


def test_query_encoding_is_injective_over_the_grid():
    g = 4
    codes = {tuple(encode_query_cell(r, c, g)) for r in range(g) for c in range(g)}
    assert len(codes) == g * g
    assert all(0 <= i < 2 * g for code in codes for i in code)


def test_query_encoding_rejects_out_of_grid_cells():
    with pytest.raises(ContractError):
        encode_query_cell(4, 0, 4)
    with pytest.raises(ContractError):
        encode_query_cell(0, -1, 4)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def test_generation_is_deterministic_and_prefix_stable():
    a = generate_dataset(20, seed=3)
    b = generate_dataset(20, seed=3)
    prefix = generate_dataset(5, seed=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
        assert x.query_ids == y.query_ids and x.answer == y.answer
    for x, y in zip(a[:5], prefix):
        np.testing.assert_array_equal(x.image, y.image)
        assert x.query_ids == y.query_ids


def test_different_seeds_differ():
    a = generate_dataset(5, seed=3)
    b = generate_dataset(5, seed=4)
    assert any(not np.array_equal(x.image, y.image) for x, y in zip(a, b))


def test_balanced_composition_has_exact_class_counts():
    for s in generate_dataset(30, grid_size=4, n_classes=8, seed=1):
        counts = np.bincount(s.cell_contents.ravel(), minlength=8)
        np.testing.assert_array_equal(counts, np.full(8, 2))  # 16 cells / 8 classes


def test_iid_composition_is_not_always_balanced():
    samples = generate_dataset(30, composition="iid", seed=1)
    balanced = [
        np.array_equal(np.bincount(s.cell_contents.ravel(), minlength=8), np.full(8, 2))
        for s in samples
    ]
    assert not all(balanced)


def test_answer_matches_rendered_cell():
    glyphs = glyph_bitmaps(8)
    for s in generate_dataset(25, seed=9, noise=0.0):
        r, c = s.query_cell(4)
        cell_px = s.image[r * 8 : (r + 1) * 8, c * 8 : (c + 1) * 8]
        np.testing.assert_allclose(cell_px, glyphs[s.answer] * GLYPH_INK, atol=1e-6)
        assert s.answer == int(s.cell_contents[r, c])
        assert s.query_patch(4) == r * 4 + c


def test_image_range_and_dtype():
    for s in generate_dataset(10, seed=2, noise=0.1):
        assert s.image.dtype == np.float32
        assert s.image.shape == (IMAGE_SIDE, IMAGE_SIDE)
        assert float(s.image.min()) >= 0.0
        assert float(s.image.max()) <= GLYPH_INK + 0.1 + 1e-6


def test_noise_zero_renders_clean_bitmaps():
    for s in generate_dataset(5, seed=2, noise=0.0):
        assert set(np.unique(s.image)) <= {np.float32(0.0), np.float32(GLYPH_INK)}


def test_answer_marginal_is_roughly_uniform():
    answers = [s.answer for s in generate_dataset(800, seed=5)]
    counts = np.bincount(answers, minlength=8)
    assert counts.min() > 50  # each class well represented at n=800


def test_generation_config_validation():
    with pytest.raises(ConfigError):
        generate_dataset(-1)
    with pytest.raises(ConfigError):
        generate_dataset(4, grid_size=5)  # 5 * 8 != 32
    with pytest.raises(ConfigError):
        generate_dataset(4, composition="sorted")
    with pytest.raises(ConfigError):
        generate_dataset(4, n_classes=7)  # 7 does not divide 16 cells


def test_cell_side_tiles_the_image():
    assert CELL_SIDE * 4 == IMAGE_SIDE


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_roundtrip_preserves_samples(tmp_path):
    path = str(tmp_path / "d.qidd")
    samples = generate_dataset(12, seed=7)
    write_dataset(samples, path)
    back = read_dataset(path)
    assert len(back) == 12
    for s, t in zip(samples, back):
        np.testing.assert_array_equal(s.image, t.image)
        assert s.query_ids == t.query_ids
        assert s.answer == t.answer
        assert t.cell_contents is None


def test_file_size_is_exact(tmp_path):
    path = str(tmp_path / "d.qidd")
    samples = generate_dataset(3, seed=7)
    write_dataset(samples, path)
    per_sample = 1024 * 4 + 2 + 2 * 2 + 2  # image + qlen + two ids + answer
    expected = 4 + 4 + 4 + 3 * per_sample
    import os

    assert os.path.getsize(path) == expected


def test_reader_rejects_malformed_files(tmp_path):
    good = str(tmp_path / "good.qidd")
    write_dataset(generate_dataset(2, seed=1), good)
    blob = open(good, "rb").read()

    bad_magic = str(tmp_path / "m.qidd")
    open(bad_magic, "wb").write(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        read_dataset(bad_magic)

    bad_version = str(tmp_path / "v.qidd")
    open(bad_version, "wb").write(blob[:4] + struct.pack("<I", 99) + blob[8:])
    with pytest.raises(FormatError):
        read_dataset(bad_version)

    truncated = str(tmp_path / "t.qidd")
    open(truncated, "wb").write(blob[:-3])
    with pytest.raises(FormatError):
        read_dataset(truncated)

    trailing = str(tmp_path / "x.qidd")
    open(trailing, "wb").write(blob + b"\x00")
    with pytest.raises(FormatError):
        read_dataset(trailing)


def test_writer_rejects_wrong_image_shape(tmp_path):
    samples = generate_dataset(1, seed=1)
    samples[0].image = samples[0].image[:16]
    with pytest.raises(ContractError):
        write_dataset(samples, str(tmp_path / "bad.qidd"))
