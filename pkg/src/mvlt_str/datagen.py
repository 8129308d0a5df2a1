"""
Deterministic synthetic word images and on-disk datasets.

Every sample is a pure function of ``(seed, index)``: the word comes from the
word source, the style (brightness, ink, shear, placement, noise) from a seed
sequence derived from the same pair. Output is therefore independent of the
number of workers.
"""

import json
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .errors import CharsetError, ConfigError, LabelError, ManifestError, ShapeError, StorageError
from .text import Charset
from .utils import ProgressTracker, write_json
from .vision import ImageSample


logger = logging.getLogger(__name__)

INK_THRESHOLD = 0.45
MAX_NOISE_LEVEL = 0.1
GLYPH_ROWS, GLYPH_COLS = 7, 5

_WORD_STREAM = 1
_STYLE_STREAM = 2

Canvas = Tuple[int, int, int]

_GLYPH_ROWS: Dict[str, Tuple[str, ...]] = {
    "a": (".....", ".....", ".###.", "....#", ".####", "#...#", ".####"),
    "b": ("#....", "#....", "#.##.", "##..#", "#...#", "#...#", "####."),
    "c": (".....", ".....", ".###.", "#....", "#....", "#...#", ".###."),
    "d": ("....#", "....#", ".##.#", "#..##", "#...#", "#...#", ".####"),
    "e": (".....", ".....", ".###.", "#...#", "#####", "#....", ".###."),
    "f": ("..##.", ".#..#", ".#...", "###..", ".#...", ".#...", ".#..."),
    "g": (".....", ".####", "#...#", "#...#", ".####", "....#", ".###."),
    "h": ("#....", "#....", "#.##.", "##..#", "#...#", "#...#", "#...#"),
    "i": ("..#..", ".....", ".##..", "..#..", "..#..", "..#..", ".###."),
    "j": ("...#.", ".....", "..##.", "...#.", "...#.", "#..#.", ".##.."),
    "k": ("#....", "#....", "#..#.", "#.#..", "##...", "#.#..", "#..#."),
    "l": (".##..", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "m": (".....", ".....", "##.#.", "#.#.#", "#.#.#", "#...#", "#...#"),
    "n": (".....", ".....", "#.##.", "##..#", "#...#", "#...#", "#...#"),
    "o": (".....", ".....", ".###.", "#...#", "#...#", "#...#", ".###."),
    "p": (".....", "####.", "#...#", "#...#", "####.", "#....", "#...."),
    "q": (".....", ".####", "#...#", "#...#", ".####", "....#", "....#"),
    "r": (".....", ".....", "#.##.", "##..#", "#....", "#....", "#...."),
    "s": (".....", ".....", ".####", "#....", ".###.", "....#", "####."),
    "t": (".#...", ".#...", "###..", ".#...", ".#...", ".#..#", "..##."),
    "u": (".....", ".....", "#...#", "#...#", "#...#", "#..##", ".##.#"),
    "v": (".....", ".....", "#...#", "#...#", "#...#", ".#.#.", "..#.."),
    "w": (".....", ".....", "#...#", "#...#", "#.#.#", "#.#.#", ".#.#."),
    "x": (".....", ".....", "#...#", ".#.#.", "..#..", ".#.#.", "#...#"),
    "y": (".....", "#...#", "#...#", "#...#", ".####", "....#", ".###."),
    "z": (".....", ".....", "#####", "...#.", "..#..", ".#...", "#####"),
    "0": (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    "1": ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    "2": (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    "3": ("#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."),
    "4": ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    "5": ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    "6": ("..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."),
    "7": ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    "8": (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    "9": (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
}


class GlyphFont:
    """Binary 5×7 bitmaps, scaled by nearest neighbour."""

    def __init__(self, glyphs: Optional[Dict[str, np.ndarray]] = None):
        if glyphs is None:
            glyphs = {
                ch: np.array([[c == "#" for c in row] for row in rows], dtype=bool)
                for ch, rows in _GLYPH_ROWS.items()
            }
        self.glyphs = glyphs

    @classmethod
    def for_charset(cls, charset: Charset) -> "GlyphFont":
        font = cls()
        missing = [ch for ch in charset.symbols if ch not in font.glyphs]
        if missing:
            raise CharsetError(f"no glyph for characters {''.join(missing)!r}")
        return font

    def mask(self, ch: str) -> np.ndarray:
        try:
            return self.glyphs[ch]
        except KeyError:
            raise CharsetError(f"no glyph for character {ch!r}") from None

    def scaled(self, ch: str, height: int, width: int) -> np.ndarray:
        base = self.mask(ch)
        rows = (np.arange(height) * base.shape[0]) // height
        cols = (np.arange(width) * base.shape[1]) // width
        return base[rows][:, cols]


@dataclass(frozen=True)
class GlyphLayout:
    glyph_height: int
    glyph_width: int
    spacing: int
    margin: int

    def text_width(self, n_chars: int) -> int:
        return n_chars * (self.glyph_width + self.spacing) - self.spacing


def glyph_layout(n_chars: int, height: int, width: int) -> GlyphLayout:
    """Glyph cell geometry for a word of ``n_chars`` on an H×W canvas."""
    margin = max(1, width // 32)
    glyph_h = max(1, min(int(height * 0.7), height - 2))
    glyph_w = max(1, int(round(glyph_h * GLYPH_COLS / GLYPH_ROWS)))
    spacing = max(1, glyph_w // 5)
    available = width - 2 * margin
    if n_chars * (glyph_w + spacing) - spacing > available:
        glyph_w = (available + spacing) // n_chars - spacing
        if glyph_w < 1:
            spacing = 0
            glyph_w = available // n_chars
        if glyph_w < 1:
            raise LabelError(f"a word of {n_chars} characters does not fit a {width}px wide canvas")
    return GlyphLayout(glyph_h, glyph_w, spacing, margin)


def style_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index, _STYLE_STREAM]).generate_state(1)[0])


def render_word(word: str, style_seed: int, canvas: Canvas = (32, 128, 1),
                charset: Optional[Charset] = None, noise_level: float = 0.05,
                font: Optional[GlyphFont] = None, sample_id: str = "") -> ImageSample:
    """
    Draw ``word`` as dark glyphs on a light background.

    Background brightness, ink level, shear, placement and additive noise are
    all drawn from ``style_seed``; the same pair of arguments gives the same
    pixels.
    """
    charset = charset or Charset()
    word = charset.normalize(word)
    if not word:
        raise LabelError("cannot render an empty word")
    if not 0.0 <= noise_level <= MAX_NOISE_LEVEL:
        raise ConfigError(f"noise_level must lie in [0, {MAX_NOISE_LEVEL}], got {noise_level}")
    font = font or GlyphFont()
    height, width, channels = canvas
    layout = glyph_layout(len(word), height, width)

    rng = np.random.default_rng(style_seed)
    background = rng.uniform(0.6, 0.85)
    ink = rng.uniform(0.05, 0.3)
    shear = rng.uniform(-0.2, 0.2)

    text_w = layout.text_width(len(word))
    max_shift = int(np.ceil(abs(shear) * layout.glyph_height / 2))
    free = width - 2 * layout.margin - text_w - 2 * max_shift
    if free < 0:
        shear, max_shift = 0.0, 0
        free = width - 2 * layout.margin - text_w
    x0 = layout.margin + max_shift + int(rng.integers(0, free + 1))
    y0 = int(rng.integers(0, height - layout.glyph_height + 1))

    ink_mask = np.zeros((height, width), dtype=bool)
    for k, ch in enumerate(word):
        left = x0 + k * (layout.glyph_width + layout.spacing)
        ink_mask[y0:y0 + layout.glyph_height, left:left + layout.glyph_width] |= font.scaled(
            ch, layout.glyph_height, layout.glyph_width
        )
    if shear:
        centre = (layout.glyph_height - 1) / 2
        for r in range(layout.glyph_height):
            # bounded by max_shift, so ink never wraps around the canvas edge
            ink_mask[y0 + r] = np.roll(ink_mask[y0 + r], int(round(shear * (r - centre))))

    gray = np.where(ink_mask, ink, background)
    gray = gray + rng.uniform(-noise_level, noise_level, size=(height, width))
    pixels = np.repeat(np.clip(gray, 0.0, 1.0)[..., None], channels, axis=2)
    return ImageSample(pixels, word, sample_id)


class RandomWordSource:
    """Uniform random lengths and characters, a pure function of (seed, index)."""

    def __init__(self, charset: Optional[Charset] = None, min_len: int = 3, max_len: int = 10):
        if not 1 <= min_len <= max_len:
            raise ConfigError(f"invalid word length range [{min_len}, {max_len}]")
        self.charset = charset or Charset()
        self.min_len = min_len
        self.max_len = max_len

    def clamped(self, longest: int) -> "RandomWordSource":
        """A copy whose lengths never exceed ``longest``."""
        top = max(1, min(self.max_len, longest))
        return RandomWordSource(self.charset, min(self.min_len, top), top)

    def word(self, seed: int, index: int) -> str:
        rng = np.random.default_rng([seed, index, _WORD_STREAM])
        length = int(rng.integers(self.min_len, self.max_len + 1))
        chars = rng.integers(0, len(self.charset.symbols), size=length)
        return "".join(self.charset.symbols[c] for c in chars)


class WordListSource:
    """Words from a fixed list, visited in a seed-dependent permutation."""

    def __init__(self, words: Sequence[str]):
        words = [w.strip().lower() for w in words if w.strip()]
        if not words:
            raise ConfigError("word list is empty")
        self.words = words

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "WordListSource":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise StorageError(f"cannot read word list: {e}", str(path)) from e
        return cls(text.splitlines())

    def word(self, seed: int, index: int) -> str:
        order = np.random.default_rng([seed, _WORD_STREAM]).permutation(len(self.words))
        return self.words[int(order[index % len(self.words)])]


def image_extension(channels: int) -> str:
    return ".pgm" if channels == 1 else ".ppm"


def write_image(path: Union[str, Path], pixels: np.ndarray) -> None:
    """Quantize to 8 bits and write binary PGM (one channel) or PPM (three)."""
    levels = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    if levels.ndim == 3 and levels.shape[2] == 1:
        levels = levels[..., 0]
    try:
        Image.fromarray(levels).save(path, format="PPM")
    except (OSError, ValueError) as e:
        raise StorageError(f"cannot write image: {e}", str(path)) from e


def read_image(path: Union[str, Path]) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            levels = np.asarray(img, dtype=np.float64)
    except OSError as e:
        raise StorageError(f"cannot read image: {e}", str(path)) from e
    if levels.ndim == 2:
        levels = levels[..., None]
    return levels / 255.0


@dataclass
class DatasetManifest:
    """Image files and, for labeled sets only, their words."""

    root: Path
    entries: List[Tuple[str, Optional[str]]]
    labeled: bool
    seed: int = 0
    canvas: Canvas = (32, 128, 1)
    info: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if not self.labeled and any(label is not None for _, label in self.entries):
            raise ManifestError(f"unlabeled manifest at {self.root} carries labels")

    def __len__(self) -> int:
        return len(self.entries)

    def image_path(self, i: int) -> Path:
        return self.root / "images" / self.entries[i][0]

    def labels(self) -> List[str]:
        if not self.labeled:
            raise ManifestError(f"dataset at {self.root} is unlabeled; labels cannot be served")
        return [label for _, label in self.entries]


def _write_manifest_files(manifest: DatasetManifest, extra: Dict[str, object]) -> None:
    height, width, channels = manifest.canvas
    data = {
        "n": len(manifest),
        "seed": manifest.seed,
        "labeled": manifest.labeled,
        "height": height,
        "width": width,
        "channels": channels,
        "files": [name for name, _ in manifest.entries],
    }
    data.update(extra)
    write_json(manifest.root / "manifest.json", data)
    if manifest.labeled:
        rows = "".join(f"{name}\t{label}\n" for name, label in manifest.entries)
        path = manifest.root / "labels.tsv"
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as f:
                f.write(rows)
        except OSError as e:
            raise StorageError(f"cannot write labels: {e}", str(path)) from e


def make_dataset(n: int, seed: int, word_source: Union[RandomWordSource, WordListSource],
                 out_dir: Union[str, Path], labeled: bool = True, canvas: Canvas = (32, 128, 1),
                 charset: Optional[Charset] = None, start_index: int = 0,
                 noise_level: float = 0.05, workers: int = 1) -> DatasetManifest:
    """Render ``n`` samples (indices ``start_index .. start_index+n-1``) into ``out_dir``."""
    if n <= 0:
        raise ConfigError(f"dataset size must be positive, got {n}")
    charset = charset or Charset()
    font = GlyphFont.for_charset(charset)
    root = Path(out_dir)
    images_dir = root / "images"
    try:
        images_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"cannot create dataset directory: {e}", str(images_dir)) from e

    ext = image_extension(canvas[2])
    progress = ProgressTracker(total=n, description="Rendering samples")

    def build(i: int) -> Tuple[str, str]:
        index = start_index + i
        word = word_source.word(seed, index)
        sample = render_word(word, style_seed(seed, index), canvas, charset, noise_level, font,
                             sample_id=f"{index:06d}")
        file_name = f"{sample.sample_id}{ext}"
        write_image(images_dir / file_name, sample.pixels)
        progress.update()
        return file_name, sample.label

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rendered = list(pool.map(build, range(n)))
    else:
        rendered = [build(i) for i in range(n)]
    progress.finish()

    entries = [(name, word if labeled else None) for name, word in rendered]
    manifest = DatasetManifest(root, entries, labeled, seed, canvas)
    _write_manifest_files(manifest, {"start_index": start_index, "noise_level": noise_level})
    logger.info(f"✓ Wrote {n} {'labeled' if labeled else 'unlabeled'} samples to {root}")
    return manifest


def strip_labels(manifest: DatasetManifest, out_dir: Union[str, Path]) -> DatasetManifest:
    """Copy the images of a labeled set into ``out_dir`` without its labels."""
    if not manifest.labeled:
        logger.warning(f"Dataset at {manifest.root} is already unlabeled; nothing to strip")
        return manifest
    root = Path(out_dir)
    images_dir = root / "images"
    try:
        images_dir.mkdir(parents=True, exist_ok=True)
        for i, (name, _) in enumerate(manifest.entries):
            shutil.copyfile(manifest.image_path(i), images_dir / name)
    except OSError as e:
        raise StorageError(f"cannot copy images: {e}", str(root)) from e
    stripped = DatasetManifest(root, [(name, None) for name, _ in manifest.entries], False,
                               manifest.seed, manifest.canvas)
    _write_manifest_files(stripped, {"stripped_from": str(manifest.root)})
    logger.info(f"✓ Stripped labels from {len(stripped)} samples into {root}")
    return stripped


def load_manifest(root: Union[str, Path], require_labels: bool = False) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ManifestError(f"no manifest.json in {root}") from None
    except (OSError, ValueError) as e:
        raise ManifestError(f"unreadable manifest {path}: {e}") from e

    try:
        files = list(data["files"])
        labeled = bool(data["labeled"])
        canvas = (int(data["height"]), int(data["width"]), int(data["channels"]))
        seed = int(data.get("seed", 0))
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"manifest {path} is missing field {e}") from e

    if require_labels and not labeled:
        raise ManifestError(f"dataset at {root} is unlabeled; labels cannot be served")

    labels: List[Optional[str]] = [None] * len(files)
    if labeled:
        tsv = root / "labels.tsv"
        try:
            lines = tsv.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise ManifestError(f"labeled dataset is missing labels.tsv: {e}") from e
        rows = [line.split("\t") for line in lines if line]
        if len(rows) != len(files) or any(len(row) != 2 for row in rows):
            raise ManifestError(f"labels.tsv in {root} does not match the {len(files)} manifest files")
        by_file = dict(rows)
        try:
            labels = [by_file[name] for name in files]
        except KeyError as e:
            raise ManifestError(f"labels.tsv has no row for {e}") from e

    info = {k: v for k, v in data.items() if k not in ("files",)}
    return DatasetManifest(root, list(zip(files, labels)), labeled, seed, canvas, info)


class ImageDataset:
    """Random access to a manifest's images, decoded once and cached."""

    def __init__(self, manifest: DatasetManifest, expected_canvas: Optional[Canvas] = None):
        if len(manifest) == 0:
            raise ManifestError(f"dataset at {manifest.root} is empty")
        if expected_canvas is not None and tuple(manifest.canvas) != tuple(expected_canvas):
            raise ShapeError(
                f"dataset at {manifest.root} holds {manifest.canvas} images, model expects {tuple(expected_canvas)}"
            )
        self.manifest = manifest
        self._cache: Dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.manifest)

    @property
    def labeled(self) -> bool:
        return self.manifest.labeled

    def sample(self, i: int) -> ImageSample:
        if i not in self._cache:
            pixels = read_image(self.manifest.image_path(i))
            if pixels.shape != tuple(self.manifest.canvas):
                raise ShapeError(
                    f"image {self.manifest.image_path(i)} has shape {pixels.shape}, expected {self.manifest.canvas}"
                )
            self._cache[i] = pixels
        name, label = self.manifest.entries[i]
        return ImageSample(self._cache[i], label, Path(name).stem)
