"""
Unit tests for synthetic word rendering and on-disk datasets.
"""

import json
import os
import sys

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from mvlt_str.datagen import (
    INK_THRESHOLD, GlyphFont, ImageDataset, RandomWordSource, WordListSource, glyph_layout,
    load_manifest, make_dataset, read_image, render_word, strip_labels, style_seed, write_image,
)
from mvlt_str.errors import CharsetError, ConfigError, LabelError, ManifestError, ShapeError
from mvlt_str.text import Charset


class TestRenderWord:
    """Test cases for render_word."""

    def test_canvas_shape_and_range(self):
        """Test the image has the canvas shape and values in [0, 1]."""
        sample = render_word("hello", style_seed(0, 0))
        assert sample.pixels.shape == (32, 128, 1)
        assert sample.pixels.min() >= 0.0 and sample.pixels.max() <= 1.0
        assert sample.label == "hello"

    def test_deterministic(self):
        """Test the same word and style seed give identical pixels."""
        a = render_word("abc", 12345)
        b = render_word("abc", 12345)
        assert np.array_equal(a.pixels, b.pixels)

    def test_different_words_differ(self):
        """Test two words under one style render differently."""
        a = render_word("abc", 7, noise_level=0.0)
        b = render_word("abd", 7, noise_level=0.0)
        assert not np.array_equal(a.pixels, b.pixels)

    def test_ink_is_darker_than_threshold(self):
        """Test every word leaves some pixels below the ink threshold."""
        for i in range(20):
            sample = render_word("mw", style_seed(3, i), noise_level=0.0)
            assert np.any(sample.pixels < INK_THRESHOLD)

    def test_single_letter_ink_matches_scaled_glyph(self):
        """Test rendering "a" inks exactly the pixels of one scaled glyph."""
        layout = glyph_layout(1, 32, 128)
        expected = int(GlyphFont().scaled("a", layout.glyph_height, layout.glyph_width).sum())
        for i in range(10):
            sample = render_word("a", style_seed(4, i), noise_level=0.0)
            assert int(np.sum(sample.pixels[..., 0] < INK_THRESHOLD)) == expected

    def test_longest_word_fits(self):
        """Test an 11-character word renders on the toy canvas."""
        sample = render_word("abcdefghijk", style_seed(1, 1))
        assert sample.pixels.shape == (32, 128, 1)

    def test_color_canvas(self):
        """Test three-channel canvases repeat the gray value."""
        sample = render_word("hi", 3, canvas=(16, 64, 3))
        assert sample.pixels.shape == (16, 64, 3)
        assert np.array_equal(sample.pixels[..., 0], sample.pixels[..., 2])

    def test_unknown_character(self):
        """Test characters outside the charset raise CharsetError."""
        with pytest.raises(CharsetError):
            render_word("a-b", 0)

    def test_empty_word(self):
        """Test an empty word is a label error."""
        with pytest.raises(LabelError):
            render_word("", 0)

    def test_noise_level_bound(self):
        """Test noise above the maximum is rejected."""
        with pytest.raises(ConfigError):
            render_word("a", 0, noise_level=0.5)

    def test_word_too_long_for_canvas(self):
        """Test a word that cannot fit even one-pixel glyphs raises."""
        with pytest.raises(LabelError):
            glyph_layout(200, 32, 128)


class TestGlyphFont:
    """Test cases for GlyphFont."""

    def test_covers_default_charset(self):
        """Test every default symbol has a glyph."""
        font = GlyphFont.for_charset(Charset())
        assert font.mask("a").shape == (7, 5)

    def test_missing_glyph(self):
        """Test a charset with an unknown symbol is rejected."""
        with pytest.raises(CharsetError):
            GlyphFont.for_charset(Charset("ab#"))

    def test_scaled_shape(self):
        """Test nearest-neighbour scaling to a cell."""
        assert GlyphFont().scaled("x", 22, 16).shape == (22, 16)


class TestWordSources:
    """Test cases for RandomWordSource and WordListSource."""

    def test_random_words_are_deterministic(self):
        """Test a word depends only on (seed, index)."""
        source = RandomWordSource()
        assert source.word(1, 5) == source.word(1, 5)
        assert 3 <= len(source.word(1, 5)) <= 10

    def test_clamped(self):
        """Test clamping limits word length."""
        source = RandomWordSource(min_len=3, max_len=10).clamped(4)
        assert all(len(source.word(0, i)) <= 4 for i in range(50))

    def test_word_list_permutation(self):
        """Test a word list yields each word once per pass."""
        source = WordListSource(["One", "two", "three"])
        assert sorted(source.word(0, i) for i in range(3)) == ["one", "three", "two"]

    def test_empty_word_list(self):
        """Test an empty list is a config error."""
        with pytest.raises(ConfigError):
            WordListSource(["", "  "])


class TestImageFiles:
    """Test cases for PGM/PPM image I/O."""

    def test_gray_roundtrip_is_quantized(self, tmp_path):
        """Test a gray image reads back at 8-bit precision."""
        pixels = np.random.default_rng(0).uniform(size=(8, 16, 1))
        path = tmp_path / "x.pgm"
        write_image(path, pixels)
        restored = read_image(path)
        assert restored.shape == (8, 16, 1)
        assert np.max(np.abs(restored - pixels)) <= 0.5 / 255 + 1e-12

    def test_color_roundtrip(self, tmp_path):
        """Test a three-channel image keeps its channels."""
        pixels = np.random.default_rng(1).uniform(size=(4, 8, 3))
        path = tmp_path / "x.ppm"
        write_image(path, pixels)
        assert read_image(path).shape == (4, 8, 3)


class TestDatasets:
    """Test cases for make_dataset, manifests and ImageDataset."""

    def test_make_dataset_writes_manifest_and_labels(self, tmp_path):
        """Test a labeled dataset has images, manifest.json and labels.tsv."""
        manifest = make_dataset(5, 1, RandomWordSource(), tmp_path / "d")
        assert len(manifest) == 5
        data = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert data["labeled"] is True
        assert len(data["files"]) == 5
        assert (tmp_path / "d" / "labels.tsv").read_text().count("\n") == 5

    def test_same_seed_same_bytes(self, tmp_path):
        """Test two runs with one seed produce identical files."""
        make_dataset(4, 9, RandomWordSource(), tmp_path / "a")
        make_dataset(4, 9, RandomWordSource(), tmp_path / "b")
        for name in sorted(os.listdir(tmp_path / "a" / "images")):
            assert (tmp_path / "a" / "images" / name).read_bytes() == (tmp_path / "b" / "images" / name).read_bytes()
        assert (tmp_path / "a" / "labels.tsv").read_text() == (tmp_path / "b" / "labels.tsv").read_text()

    def test_workers_do_not_change_output(self, tmp_path):
        """Test a thread pool renders the same dataset as one thread."""
        make_dataset(6, 2, RandomWordSource(), tmp_path / "one", workers=1)
        make_dataset(6, 2, RandomWordSource(), tmp_path / "many", workers=3)
        assert (tmp_path / "one" / "labels.tsv").read_text() == (tmp_path / "many" / "labels.tsv").read_text()
        for name in os.listdir(tmp_path / "one" / "images"):
            assert (tmp_path / "one" / "images" / name).read_bytes() == (tmp_path / "many" / "images" / name).read_bytes()

    def test_start_index_gives_disjoint_samples(self, tmp_path):
        """Test a later index range continues the same sample stream."""
        full = make_dataset(4, 3, RandomWordSource(), tmp_path / "full")
        tail = make_dataset(2, 3, RandomWordSource(), tmp_path / "tail", start_index=2)
        assert full.labels()[2:] == tail.labels()

    def test_unlabeled_dataset_serves_no_labels(self, tmp_path):
        """Test an unlabeled dataset raises when labels are requested."""
        manifest = make_dataset(3, 1, RandomWordSource(), tmp_path / "u", labeled=False)
        assert not (tmp_path / "u" / "labels.tsv").exists()
        with pytest.raises(ManifestError):
            manifest.labels()
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "u", require_labels=True)

    def test_strip_labels(self, tmp_path):
        """Test stripping copies images and drops labels."""
        labeled = make_dataset(3, 1, RandomWordSource(), tmp_path / "l")
        stripped = strip_labels(labeled, tmp_path / "s")
        assert not stripped.labeled
        loaded = load_manifest(tmp_path / "s")
        assert all(label is None for _, label in loaded.entries)
        assert len(os.listdir(tmp_path / "s" / "images")) == 3

    def test_load_manifest_roundtrip(self, tmp_path):
        """Test loading returns the labels that were written."""
        written = make_dataset(4, 5, RandomWordSource(), tmp_path / "d")
        loaded = load_manifest(tmp_path / "d", require_labels=True)
        assert loaded.labels() == written.labels()
        assert loaded.canvas == (32, 128, 1)

    def test_missing_manifest(self, tmp_path):
        """Test a directory without manifest.json raises ManifestError."""
        with pytest.raises(ManifestError, match="no manifest"):
            load_manifest(tmp_path)

    def test_image_dataset_samples(self, tmp_path):
        """Test samples carry pixels, label and id."""
        manifest = make_dataset(2, 1, RandomWordSource(), tmp_path / "d")
        dataset = ImageDataset(load_manifest(tmp_path / "d"), (32, 128, 1))
        sample = dataset.sample(1)
        assert sample.pixels.shape == (32, 128, 1)
        assert sample.label == manifest.labels()[1]
        assert sample.sample_id == "000001"

    def test_image_dataset_canvas_mismatch(self, tmp_path):
        """Test a model canvas different from the dataset's raises ShapeError."""
        make_dataset(1, 1, RandomWordSource(), tmp_path / "d")
        with pytest.raises(ShapeError, match="model expects"):
            ImageDataset(load_manifest(tmp_path / "d"), (32, 64, 1))
