"""Synthetic word images, charset encoding and on-disk datasets.

Words are drawn with a built-in 5x7 bitmap font and randomised per style seed
(glyph scale, slant, stroke width, spacing, fore/background levels). Datasets
are stored as binary PGM/PPM files plus a ``labels.tsv`` index.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import CharsetError, IngestionError, LabelError

log = logging.getLogger(__name__)

SYMBOLS = "0123456789abcdefghijklmnopqrstuvwxyz"
PAD_INDEX = 36
NUM_CLASSES = 37


class Charset:
    """36 symbols (digits first, then letters) plus the pad token at index 36."""

    def __init__(self, symbols: str = SYMBOLS):
        self.symbols = symbols
        self.pad = len(symbols)
        self.num_classes = len(symbols) + 1
        self._index = {c: i for i, c in enumerate(symbols)}

    def index(self, ch: str) -> int:
        try:
            return self._index[ch]
        except KeyError:
            raise CharsetError(f"character {ch!r} not in charset") from None

    def symbol(self, idx: int) -> str:
        if idx == self.pad:
            return ""
        return self.symbols[idx]

    def validate(self, text: str) -> str:
        text = text.lower()
        for ch in text:
            self.index(ch)
        return text


CHARSET = Charset()


@dataclass
class TokenSequence:
    indices: np.ndarray
    true_length: int


def encode(label: str, max_len: int, charset: Charset = CHARSET) -> TokenSequence:
    """Label -> fixed-length index vector padded with the pad class."""
    label = charset.validate(label)
    if len(label) > max_len - 1:
        raise LabelError(f"label {label!r} longer than T-1 = {max_len - 1}")
    idx = np.full(max_len, charset.pad, dtype=np.int64)
    idx[: len(label)] = [charset.index(c) for c in label]
    return TokenSequence(idx, len(label))


def decode(indices, charset: Charset = CHARSET) -> str:
    """Indices -> string, stopping at the first pad."""
    if isinstance(indices, TokenSequence):
        indices = indices.indices
    out = []
    for i in np.asarray(indices).tolist():
        if i == charset.pad:
            break
        out.append(charset.symbols[i])
    return "".join(out)


def encode_batch(labels, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    seqs = [encode(lab, max_len) for lab in labels]
    return np.stack([s.indices for s in seqs]), np.array([s.true_length for s in seqs])


# -- bitmap font -------------------------------------------------------------------

_GLYPHS = {
    "0": [" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "],
    "1": ["  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "],
    "2": [" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"],
    "3": ["#####", "   # ", "  #  ", "   # ", "    #", "#   #", " ### "],
    "4": ["   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "],
    "5": ["#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "],
    "6": ["  ## ", " #   ", "#    ", "#### ", "#   #", "#   #", " ### "],
    "7": ["#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "],
    "8": [" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "],
    "9": [" ### ", "#   #", "#   #", " ####", "    #", "   # ", " ##  "],
    "a": ["     ", "     ", " ### ", "    #", " ####", "#   #", " ####"],
    "b": ["#    ", "#    ", "# ## ", "##  #", "#   #", "#   #", "#### "],
    "c": ["     ", "     ", " ### ", "#    ", "#    ", "#   #", " ### "],
    "d": ["    #", "    #", " ## #", "#  ##", "#   #", "#   #", " ####"],
    "e": ["     ", "     ", " ### ", "#   #", "#####", "#    ", " ### "],
    "f": ["  ## ", " #  #", " #   ", "###  ", " #   ", " #   ", " #   "],
    "g": ["     ", " ####", "#   #", "#   #", " ####", "    #", " ### "],
    "h": ["#    ", "#    ", "# ## ", "##  #", "#   #", "#   #", "#   #"],
    "i": ["  #  ", "     ", " ##  ", "  #  ", "  #  ", "  #  ", " ### "],
    "j": ["   # ", "     ", "  ## ", "   # ", "   # ", "#  # ", " ##  "],
    "k": ["#    ", "#    ", "#  # ", "# #  ", "##   ", "# #  ", "#  # "],
    "l": [" ##  ", "  #  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "],
    "m": ["     ", "     ", "## # ", "# # #", "# # #", "#   #", "#   #"],
    "n": ["     ", "     ", "# ## ", "##  #", "#   #", "#   #", "#   #"],
    "o": ["     ", "     ", " ### ", "#   #", "#   #", "#   #", " ### "],
    "p": ["     ", "     ", "#### ", "#   #", "#### ", "#    ", "#    "],
    "q": ["     ", "     ", " ## #", "#  ##", " ####", "    #", "    #"],
    "r": ["     ", "     ", "# ## ", "##  #", "#    ", "#    ", "#    "],
    "s": ["     ", "     ", " ### ", "#    ", " ### ", "    #", "#### "],
    "t": [" #   ", " #   ", "###  ", " #   ", " #   ", " #  #", "  ## "],
    "u": ["     ", "     ", "#   #", "#   #", "#   #", "#  ##", " ## #"],
    "v": ["     ", "     ", "#   #", "#   #", "#   #", " # # ", "  #  "],
    "w": ["     ", "     ", "#   #", "#   #", "# # #", "# # #", " # # "],
    "x": ["     ", "     ", "#   #", " # # ", "  #  ", " # # ", "#   #"],
    "y": ["     ", "     ", "#   #", "#   #", " ####", "    #", " ### "],
    "z": ["     ", "     ", "#####", "   # ", "  #  ", " #   ", "#####"],
}

FONT: dict[str, np.ndarray] = {
    ch: np.array([[c == "#" for c in row] for row in rows], dtype=bool) for ch, rows in _GLYPHS.items()
}
assert set(FONT) == set(SYMBOLS)


@dataclass
class ImageSample:
    pixels: np.ndarray  # H x W x channels, values in [0, 1]
    label: str
    char_boxes: list[tuple[int, int]] | None = field(default=None)


def _text_seed(text: str) -> int:
    return zlib.crc32(text.encode("ascii"))


def render_word(text: str, style_seed: int, channels: int = 1, max_len: int | None = None) -> ImageSample:
    """Draw ``text`` with the bitmap font; output depends only on (text, style_seed)."""
    if not text:
        raise LabelError("cannot render an empty word")
    text = CHARSET.validate(text)
    if max_len is not None and len(text) > max_len - 1:
        raise LabelError(f"word {text!r} does not fit T-1 = {max_len - 1}")
    rng = np.random.default_rng([style_seed & 0xFFFFFFFF, _text_seed(text)])
    px = int(rng.integers(2, 4))            # font pixel width
    py = px + int(rng.integers(0, 2))       # font pixel height
    gap = int(rng.integers(1, 3)) * px // 2 + 1
    bold = rng.random() < 0.4
    slant = rng.uniform(-0.3, 0.3)
    ml, mr = rng.integers(2, 9, size=2)
    mt, mb = rng.integers(2, 7, size=2)

    glyph_w = 5 * px + (1 if bold else 0)
    height = 7 * py
    ink_w = len(text) * glyph_w + (len(text) - 1) * gap
    shear_room = int(np.ceil(abs(slant) * height))
    H = int(height + mt + mb)
    W = int(ink_w + ml + mr + shear_room)
    ink = np.zeros((H, W), dtype=bool)
    boxes = []
    x = int(ml) + (shear_room if slant > 0 else 0)
    for ch in text:
        big = np.kron(FONT[ch], np.ones((py, px), dtype=bool))
        if bold:
            big = np.pad(big, ((0, 0), (0, 1)))
            big[:, 1:] |= big[:, :-1].copy()
        ink[mt:mt + height, x:x + big.shape[1]] |= big
        boxes.append((x, x + big.shape[1]))
        x += glyph_w + gap
    if slant:
        centre = mt + height / 2.0
        sheared = np.zeros_like(ink)
        for r in range(H):
            shift = int(round(slant * (centre - r)))
            sheared[r] = np.roll(ink[r], shift)
        ink = sheared

    bg = rng.uniform(0.0, 0.35, size=channels)
    fg = rng.uniform(0.65, 1.0, size=channels)
    if rng.random() < 0.35:
        bg, fg = 1.0 - bg, 1.0 - fg
    img = np.where(ink[..., None], fg, bg)
    texture = rng.normal(0.0, 0.02, size=img.shape)
    pixels = np.clip(img + texture, 0.0, 1.0).astype(np.float32)
    return ImageSample(pixels, text, boxes)


def augment(sample: ImageSample, rng: np.random.Generator, strength: float = 1.0) -> ImageSample:
    """Rotation (<= 10 deg), brightness/contrast jitter and Gaussian noise, scaled by ``strength``."""
    return ImageSample(augment_pixels(sample.pixels, rng, strength), sample.label, sample.char_boxes)


def augment_pixels(pixels: np.ndarray, rng: np.random.Generator, strength: float = 1.0) -> np.ndarray:
    strength = float(np.clip(strength, 0.0, 1.0))
    if strength == 0.0:
        return pixels.copy()
    pix = pixels.astype(np.float64)
    angle = rng.uniform(-10.0, 10.0) * strength
    contrast = 1.0 + rng.uniform(-0.3, 0.3) * strength
    brightness = rng.uniform(-0.15, 0.15) * strength
    sigma = rng.uniform(0.0, 0.06) * strength
    pix = ndimage.rotate(pix, angle, axes=(1, 0), reshape=False, order=1, mode="nearest")
    mean = pix.mean()
    pix = (pix - mean) * contrast + mean + brightness
    pix = pix + rng.normal(0.0, sigma, size=pix.shape)
    return np.clip(pix, 0.0, 1.0).astype(np.float32)


def resize(pixels: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear stretch to exactly ``h x w`` (aspect ratio not preserved)."""
    H, W = pixels.shape[:2]
    if (H, W) == (h, w):
        return pixels.astype(np.float32, copy=True)
    rows = (np.arange(h) + 0.5) * (H / h) - 0.5
    cols = (np.arange(w) + 0.5) * (W / w) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    out = np.stack(
        [ndimage.map_coordinates(pixels[..., c].astype(np.float64), [rr, cc], order=1, mode="nearest")
         for c in range(pixels.shape[2])],
        axis=-1,
    )
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def to_channels(pixels: np.ndarray, channels: int) -> np.ndarray:
    if pixels.shape[2] == channels:
        return pixels
    if channels == 1:
        return pixels.mean(axis=2, keepdims=True)
    return np.repeat(pixels, channels, axis=2)


# -- datasets ----------------------------------------------------------------------

@dataclass
class Dataset:
    images: np.ndarray  # N x H x W x C float32
    labels: list[str]
    train_idx: np.ndarray
    val_idx: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def split(self, name: str) -> tuple[np.ndarray, list[str]]:
        idx = {"train": self.train_idx, "val": self.val_idx, "all": np.arange(len(self))}[name]
        return self.images[idx], [self.labels[i] for i in idx]


def split_indices(n: int, seed: int, val_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 17]).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def build_dataset(word_list, per_word: int, seed: int, img_h: int = 16, img_w: int = 64,
                  channels: int = 1, augment_strength: float = 1.0, val_fraction: float = 0.1,
                  max_len: int | None = None) -> Dataset:
    """Render ``per_word`` augmented images of every word; reproducible from the arguments."""
    images, labels = [], []
    for i, word in enumerate(word_list):
        for j in range(per_word):
            style = int(np.random.default_rng([seed, i, j]).integers(0, 2**31))
            sample = render_word(word, style, channels=channels, max_len=max_len)
            sample = augment(sample, np.random.default_rng([seed, i, j, 1]), augment_strength)
            images.append(resize(sample.pixels, img_h, img_w))
            labels.append(sample.label)
    train_idx, val_idx = split_indices(len(labels), seed, val_fraction)
    return Dataset(np.stack(images), labels, train_idx, val_idx)


def write_pnm(path: Path, pixels: np.ndarray) -> None:
    """Binary PGM (1 channel) or PPM (3 channels), 8-bit."""
    arr = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    h, w, c = arr.shape
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pnm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IngestionError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise IngestionError(f"{path}: unsupported image format {magic!r} (need binary P5/P6)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise IngestionError(f"{path}: malformed header") from None
    c = 1 if magic == b"P5" else 3
    depth = 2 if maxval > 255 else 1
    need = w * h * c * depth
    body = data[pos:pos + need]
    if len(body) != need:
        raise IngestionError(f"{path}: expected {need} bytes of pixel data, found {len(body)}")
    arr = np.frombuffer(body, dtype=">u2" if depth == 2 else np.uint8).reshape(h, w, c)
    return (arr.astype(np.float32) / float(maxval)).astype(np.float32)


def save_dataset(ds: Dataset, directory: str | Path) -> None:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    ext = "pgm" if ds.images.shape[3] == 1 else "ppm"
    lines = []
    for i, (img, label) in enumerate(zip(ds.images, ds.labels)):
        name = f"{i:06d}.{ext}"
        write_pnm(directory / "images" / name, img)
        lines.append(f"{name}\t{label}")
    (directory / "labels.tsv").write_text("\n".join(lines) + "\n")


def load_dataset(directory: str | Path, img_h: int = 16, img_w: int = 64, channels: int = 1,
                 seed: int = 0, val_fraction: float = 0.1, max_len: int | None = None) -> Dataset:
    """Read ``labels.tsv`` + ``images/``; images are stretch-resized to ``img_h x img_w``."""
    directory = Path(directory)
    index = directory / "labels.tsv"
    if not index.exists():
        raise IngestionError(f"{index}: not found")
    images, labels = [], []
    for lineno, raw in enumerate(index.read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1].strip():
            raise IngestionError(f"{index}:{lineno}: expected 'filename<TAB>label'")
        name, label = parts[0], parts[1].strip().lower()
        try:
            CHARSET.validate(label)
        except CharsetError as exc:
            raise IngestionError(f"{index}:{lineno}: {exc}") from None
        if max_len is not None and len(label) > max_len - 1:
            raise IngestionError(f"{index}:{lineno}: label longer than T-1 = {max_len - 1}")
        path = directory / "images" / name
        if not path.exists():
            raise IngestionError(f"{index}:{lineno}: missing image {path}")
        pix = to_channels(read_pnm(path), channels)
        images.append(resize(pix, img_h, img_w))
        labels.append(label)
    if not labels:
        raise IngestionError(f"{index}: no samples")
    train_idx, val_idx = split_indices(len(labels), seed, val_fraction)
    log.info("loaded %d samples from %s", len(labels), directory)
    return Dataset(np.stack(images), labels, train_idx, val_idx)


# -- lexicon -----------------------------------------------------------------------

_WORDS = """
the and for are but not you all any can had her was one our out day get has him his how man new
now old see two way who boy did its let put say she too use time year people back good give
most very after thing only great where much through long little world before house again
water place small found still between never under last might while next sound below saw
something thought both often together point music school always those paper group river
light answer study learn should state animal number family street market winter summer garden
window letter travel mother father sister brother friend dinner coffee bread apple orange
yellow purple silver golden forest island ocean valley desert bridge tower castle palace temple
station office hotel museum library theater cinema doctor nurse police farmer driver pilot
artist singer dancer writer reader player kitchen bedroom garage corner middle center
north south east west spring autumn morning evening night today tomorrow monday friday sunday
january march april june july august october november december red blue green black white brown
pink gray dark bright quiet loud happy angry tired hungry strong weak simple clear heavy
empty full rich poor young early late fast slow warm cold cool hot wet dry clean dirty open
close begin finish start stop play stay walk talk read write sing dance drive ride swim climb
jump build break make take bring carry hold keep leave move turn watch listen speak teach
think know feel want need like love help call show tell ask work rest sleep wake cook wash
eat drink buy sell pay cost price money bank card phone video radio camera screen computer
machine engine motor wheel train plane ship boat truck taxi road map city town village country
planet star moon sun cloud rain snow wind storm fire stone metal glass wood plastic cotton
table chair sofa door floor wall roof stairs lamp clock mirror picture flower tree grass leaf
seed fruit lemon cherry grape melon peach onion potato tomato carrot pepper salt sugar honey
cheese butter milk juice water tea soup rice pasta pizza burger salad cake cookie candy
exit hello thanks sale free parking hotel2 route66 zone3 room101 gate7 level4 area51 bus42
"""


def builtin_lexicon() -> list[str]:
    """Deterministic list of a few hundred unique lowercase words (some with digits)."""
    seen: dict[str, None] = {}
    for w in _WORDS.split():
        if 2 <= len(w) <= 9 and w not in seen:
            seen[w] = None
    return list(seen)
