"""Glyph corpus generation, label codec, manifest loading, raster I/O.

The generator substitutes a real scene-text corpus: strings are drawn from
the charset, rendered from the embedded 5x7 font with a random affine
placement (scale, rotation, translation) and random foreground/background
gray levels, entirely determined by the seed. Images travel as PGM (P5) /
PPM (P6) files plus a TSV manifest.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .font5x7 import GLYPH_H, GLYPH_W, glyph

PRINTABLE = "".join(chr(c) for c in range(33, 127))  # 94 symbols

GENERATOR_VERSION = 1


class DataError(ValueError):
    pass


class Charset:
    """Ordered symbol set; EOS and PAD ids sit just past the symbols."""

    def __init__(self, symbols: str = PRINTABLE):
        if len(symbols) < 1:
            raise DataError("charset is empty")
        if len(set(symbols)) != len(symbols):
            raise DataError("charset has duplicate symbols")
        bad = [c for c in symbols if not 33 <= ord(c) <= 126]
        if bad:
            raise DataError(f"charset symbols outside printable ASCII: {bad!r}")
        self.symbols = symbols
        self._index = {c: i for i, c in enumerate(symbols)}
        self.eos_id = len(symbols)
        self.pad_id = len(symbols) + 1

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, ch: str) -> bool:
        return ch in self._index

    def char_to_id(self, ch: str) -> int:
        try:
            return self._index[ch]
        except KeyError:
            raise DataError(f"symbol {ch!r} not in charset")

    def id_to_char(self, i: int) -> str:
        return self.symbols[i]

    def encode(self, text: str) -> list:
        return [self.char_to_id(c) for c in text]

    def decode(self, ids) -> str:
        """Map char ids back to text, stopping at EOS; PAD is skipped."""
        out = []
        for i in ids:
            if i == self.eos_id:
                break
            if i == self.pad_id:
                continue
            out.append(self.symbols[i])
        return "".join(out)


DEFAULT_CHARSET = Charset()


def encode_label(text: str, charset: Charset, max_len: int) -> np.ndarray:
    """Label -> ids of length max_len+1: chars, EOS, then PAD fill."""
    if len(text) == 0:
        raise DataError("empty label")
    if len(text) > max_len:
        raise DataError(f"label length {len(text)} exceeds max {max_len}")
    ids = np.full(max_len + 1, charset.pad_id, dtype=np.int64)
    ids[: len(text)] = charset.encode(text)
    ids[len(text)] = charset.eos_id
    return ids


@dataclass
class SampleRecord:
    label: str
    image: Optional[np.ndarray] = None   # (H, W) float32 in [0, 1]
    path: Optional[str] = None
    split: str = "train"


# ---------------------------------------------------------------------------
# rendering


def string_mask(text: str) -> np.ndarray:
    """Render a string to a tight boolean bitmap with 1-column gaps."""
    n = len(text)
    mask = np.zeros((GLYPH_H, n * (GLYPH_W + 1) - 1), dtype=bool)
    for i, ch in enumerate(text):
        c0 = i * (GLYPH_W + 1)
        mask[:, c0 : c0 + GLYPH_W] = glyph(ch)
    return mask


def _bilinear_sample(src: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample src (float) at fractional coordinates; zero outside."""
    h, w = src.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0

    def at(yy, xx):
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        out = np.zeros(yy.shape, dtype=src.dtype)
        out[valid] = src[yy[valid], xx[valid]]
        return out

    return (
        at(y0, x0) * (1 - fy) * (1 - fx)
        + at(y0, x0 + 1) * (1 - fy) * fx
        + at(y0 + 1, x0) * fy * (1 - fx)
        + at(y0 + 1, x0 + 1) * fy * fx
    )


def render_sample(rng: np.random.Generator, charset: Charset,
                  len_range: tuple, canvas: int = 64, margin: int = 2,
                  max_angle: float = 25.0, min_contrast: float = 0.3,
                  alphabet: Optional[str] = None) -> SampleRecord:
    """Draw a random string and rasterize it onto a square canvas.

    The draw order from `rng` is fixed (length, symbols, angle, scale,
    position, colors), so a seeded generator reproduces the sample exactly.
    `alphabet` restricts symbol choice to a subset of the charset.
    """
    lo, hi = len_range
    if lo < 1 or hi < lo:
        raise DataError(f"bad length range {len_range}")
    if not 0.0 <= min_contrast < 1.0:
        raise DataError(f"min_contrast {min_contrast} outside [0, 1)")
    pool = alphabet if alphabet is not None else charset.symbols
    for ch in pool:
        if ch not in charset:
            raise DataError(f"alphabet symbol {ch!r} not in charset")

    n = int(rng.integers(lo, hi + 1))
    text = "".join(pool[i] for i in rng.integers(0, len(pool), size=n))
    mask = string_mask(text).astype(np.float64)
    sh, sw = mask.shape

    theta = np.deg2rad(rng.uniform(-max_angle, max_angle))
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    # extents of the rotated bitmap
    rw = sw * abs(cos_t) + sh * abs(sin_t)
    rh = sw * abs(sin_t) + sh * abs(cos_t)
    avail = canvas - 2 * margin
    max_scale = min(avail / rw, avail / rh)
    if max_scale < 1.0:
        raise DataError(
            f"canvas {canvas} too small for {n} symbols at minimum scale"
        )
    scale = rng.uniform(max(1.0, 0.5 * max_scale), max_scale)

    half_w = rw * scale / 2.0
    half_h = rh * scale / 2.0
    cx = rng.uniform(margin + half_w, canvas - margin - half_w)
    cy = rng.uniform(margin + half_h, canvas - margin - half_h)

    # resample the pair: for min_contrast > 0.5 some bg values admit no fg
    bg = rng.uniform(0.0, 1.0)
    fg = rng.uniform(0.0, 1.0)
    while abs(fg - bg) < min_contrast:
        bg = rng.uniform(0.0, 1.0)
        fg = rng.uniform(0.0, 1.0)

    # inverse map: canvas pixel -> source bitmap coordinates
    yy, xx = np.meshgrid(np.arange(canvas, dtype=np.float64),
                         np.arange(canvas, dtype=np.float64), indexing="ij")
    dx = xx - cx
    dy = yy - cy
    sx = (cos_t * dx + sin_t * dy) / scale + (sw - 1) / 2.0
    sy = (-sin_t * dx + cos_t * dy) / scale + (sh - 1) / 2.0
    coverage = _bilinear_sample(mask, sy, sx)

    img = (bg + coverage * (fg - bg)).astype(np.float32)
    return SampleRecord(label=text, image=np.clip(img, 0.0, 1.0))


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Per-sample stream: a stable hash of (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


# ---------------------------------------------------------------------------
# augmentation


def resize_bilinear(img: np.ndarray, out_hw: tuple) -> np.ndarray:
    """Classic bilinear resize (pixel centers aligned at half-integer)."""
    h, w = img.shape[:2]
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return img
    ys = np.clip((np.arange(oh) + 0.5) * h / oh - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) * w / ow - 0.5, 0, w - 1)
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    if img.ndim == 2:
        return _bilinear_sample_clamped(img, grid_y, grid_x)
    return np.stack(
        [_bilinear_sample_clamped(img[..., c], grid_y, grid_x)
         for c in range(img.shape[-1])], axis=-1,
    )


def _bilinear_sample_clamped(src, ys, xs):
    h, w = src.shape
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(src.dtype)
    fx = (xs - x0).astype(src.dtype)
    return (
        src[y0, x0] * (1 - fy) * (1 - fx)
        + src[y0, x1] * (1 - fy) * fx
        + src[y1, x0] * fy * (1 - fx)
        + src[y1, x1] * fy * fx
    )


def rescale_on_canvas(img: np.ndarray, s: float) -> np.ndarray:
    """Resize by factor s, then paste back onto a same-sized canvas.

    Downscales are centered on a background-colored canvas (background is
    the border median, which matches the flat backgrounds the generator
    produces); upscales are center-cropped. Output shape equals input shape.
    """
    h, w = img.shape[:2]
    nh = max(1, int(round(h * s)))
    nw = max(1, int(round(w * s)))
    if (nh, nw) == (h, w):
        return img
    scaled = resize_bilinear(img, (nh, nw))
    y0 = max(0, (nh - h) // 2)
    x0 = max(0, (nw - w) // 2)
    crop = scaled[y0 : y0 + min(nh, h), x0 : x0 + min(nw, w)]
    border = np.concatenate([img[0, :].ravel(), img[-1, :].ravel(),
                             img[:, 0].ravel(), img[:, -1].ravel()])
    out = np.full_like(img, np.median(border))
    yp = (h - crop.shape[0]) // 2
    xp = (w - crop.shape[1]) // 2
    out[yp : yp + crop.shape[0], xp : xp + crop.shape[1]] = crop
    return out


def augment(image: np.ndarray, rng: np.random.Generator,
            blur_sigma: tuple = (0.0, 2.0), noise_std: tuple = (0.0, 0.1),
            out_hw: Optional[tuple] = None,
            scale: tuple = (1.0, 1.0)) -> np.ndarray:
    """Random rescale, Gaussian blur, additive noise, clamp, then resize."""
    img = image.astype(np.float32, copy=True)
    if scale != (1.0, 1.0):
        # drawn only when enabled so existing RNG streams stay put
        img = rescale_on_canvas(img, rng.uniform(*scale))
    sigma = rng.uniform(*blur_sigma)
    if sigma > 1e-6:
        if img.ndim == 2:
            img = gaussian_filter(img, sigma, mode="reflect")
        else:
            img = gaussian_filter(img, (sigma, sigma, 0), mode="reflect")
    std = rng.uniform(*noise_std)
    if std > 0:
        img = img + rng.standard_normal(img.shape).astype(np.float32) * std
    img = np.clip(img, 0.0, 1.0)
    if out_hw is not None:
        img = resize_bilinear(img, out_hw)
    return img.astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# PGM / PPM


def write_pgm(path: str, img: np.ndarray) -> None:
    """Write grayscale image as binary PGM (P5), maxval 255."""
    if img.dtype != np.uint8:
        img = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255
                      ).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def _read_netpbm_tokens(data: bytes, count: int, start: int):
    """Read whitespace/comment-separated ASCII tokens from a netpbm header."""
    tokens = []
    i = start
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < n and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise DataError("truncated netpbm header")
        tokens.append(data[i:j])
        i = j
    return tokens, i + 1  # consume single whitespace after maxval


def read_image(path: str) -> np.ndarray:
    """Read PGM (P5) -> (H, W) or PPM (P6) -> (H, W, 3), float32 in [0,1]."""
    with open(path, "rb") as f:
        data = f.read()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"unsupported image magic {magic!r} in {path}")
    toks, offset = _read_netpbm_tokens(data, 3, 2)
    w, h, maxval = (int(t) for t in toks)
    if maxval != 255:
        raise DataError(f"unsupported maxval {maxval} in {path}")
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    raw = np.frombuffer(data[offset : offset + need], dtype=np.uint8)
    if raw.size != need:
        raise DataError(f"truncated pixel data in {path}")
    img = raw.reshape((h, w) if channels == 1 else (h, w, 3))
    return img.astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# corpus + manifest


def generate_corpus(out_dir: str, count: int, seed: int, charset: Charset,
                    len_range: tuple = (1, 5), canvas: int = 64,
                    alphabet: Optional[str] = None) -> str:
    """Write `count` samples + manifest.tsv + meta.json; returns manifest path.

    Byte-identical for identical arguments: every sample uses its own
    (seed, index)-derived stream.
    """
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i in range(count):
        rec = render_sample(sample_rng(seed, i), charset, len_range,
                            canvas=canvas, alphabet=alphabet)
        name = f"s{i:06d}.pgm"
        write_pgm(os.path.join(out_dir, name), rec.image)
        lines.append(f"{name}\t{rec.label}\n")
    manifest = os.path.join(out_dir, "manifest.tsv")
    with open(manifest, "w", encoding="utf-8") as f:
        f.writelines(lines)
    meta = {
        "generator_version": GENERATOR_VERSION,
        "count": count,
        "seed": seed,
        "canvas": canvas,
        "len_range": list(len_range),
        "charset": charset.symbols,
        "alphabet": alphabet,
    }
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_manifest(path: str, charset: Charset, max_len: int) -> list:
    """Parse `relative/path<TAB>label` lines into records (images not read)."""
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{ln}: expected 'path<TAB>label'")
            rel, label = parts
            if not 1 <= len(label) <= max_len:
                raise DataError(
                    f"{path}:{ln}: label length {len(label)} outside [1, {max_len}]"
                )
            for ch in label:
                if ch not in charset:
                    raise DataError(f"{path}:{ln}: symbol {ch!r} not in charset")
            records.append(SampleRecord(label=label, path=os.path.join(base, rel)))
    if not records:
        raise DataError(f"no samples in manifest {path}")
    return records


def load_images(records: list) -> list:
    """Fill .image for every record (in place); returns the list."""
    for rec in records:
        if rec.image is None:
            rec.image = read_image(rec.path)
    return records
