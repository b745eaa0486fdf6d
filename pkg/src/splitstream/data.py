"""Local datasets held by a client: image folders, the cholesterol CSV, and the
bundled synthetic generators."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError
from .models import CHOLESTEROL_FEATURES
from .rng import Rng


@dataclass
class Sample:
    sample_id: int
    features: np.ndarray
    label: float


# --------------------------------------------------------------------------
# images

_PGM_HEADER = re.compile(rb"P5(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def read_pgm(path) -> np.ndarray:
    """Binary PGM (P5) as a float array scaled to [0, 1], shape H x W."""
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if not m:
        raise DataError(f"{path}: not a binary PGM file")
    width, height, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 65536:
        raise DataError(f"{path}: bad maxval {maxval}")
    dtype = ">u1" if maxval < 256 else ">u2"
    count = width * height
    body = data[m.end() :]
    if len(body) < count * np.dtype(dtype).itemsize:
        raise DataError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(body, dtype=dtype, count=count).reshape(height, width)
    return pixels.astype(np.float64) / maxval


def write_pgm(path, pixels: np.ndarray) -> None:
    """8-bit P5 writer; ``pixels`` must already be integers in 0..255."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(pixels.tobytes())


def _read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(img, dtype=np.float64)
            return arr / (65535.0 if arr.max() > 255 else 255.0)
        return np.asarray(img.convert("L"), dtype=np.float64) / 255.0


def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        if path.suffix.lower() == ".pgm":
            return read_pgm(path)
        return _read_png(path)
    except DataError:
        raise
    except Exception as exc:  # decoder failures of every flavour
        raise DataError(f"{path}: unreadable image ({exc})") from None


def resize_image(img: np.ndarray, out_h: int, out_w: int, align_corners: bool = True) -> np.ndarray:
    """Bilinear resize of an H x W x 1 (or H x W) image.

    ``align_corners=True`` maps the corner pixels onto each other; ``False``
    uses pixel-centre sampling with edge clamping.
    """
    squeeze = img.ndim == 2
    src = img if squeeze else img[..., 0]
    h, w = src.shape
    if min(h, w, out_h, out_w) < 1:
        raise ConfigurationError("image dimensions must be positive")

    def coords(n_in, n_out):
        if align_corners:
            if n_out == 1:
                return np.zeros(1)
            return np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        return np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)

    ys, xs = coords(h, out_h), coords(w, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    s = src.astype(np.float64)
    top = s[y0][:, x0] * (1 - fx) + s[y0][:, x1] * fx
    bottom = s[y1][:, x0] * (1 - fx) + s[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    out = np.clip(out, s.min(), s.max())
    out = out.astype(img.dtype if img.dtype.kind == "f" else np.float64)
    return out if squeeze else out[..., None]


POSITIVE_NAMES = {"1", "pos", "positive", "covid", "abnormal", "fracture"}
NEGATIVE_NAMES = {"0", "neg", "negative", "normal", "noncovid", "non-covid"}


def default_label_rule(name: str) -> int:
    key = name.lower()
    if key in POSITIVE_NAMES:
        return 1
    if key in NEGATIVE_NAMES:
        return 0
    raise ConfigurationError(f"cannot label class directory {name!r}")


def load_image_dataset(root, target_dims: tuple[int, int], label_rule=default_label_rule) -> list[Sample]:
    """Every PGM/PNG under ``root/<class>/``, resized and scaled to [0, 1].

    Samples are ordered by (class directory, file name) and numbered in that order.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"{root} is not a directory")
    out: list[Sample] = []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        label = label_rule(class_dir.name) if callable(label_rule) else label_rule[class_dir.name]
        files = sorted(
            p for p in class_dir.iterdir() if p.is_file() and p.suffix.lower() in (".pgm", ".png")
        )
        if not files:
            raise ConfigurationError(f"class directory {class_dir} holds no images")
        for path in files:
            img = read_image(path)
            if img.ndim == 3:
                img = img.mean(axis=2)
            if img.shape != tuple(target_dims):
                img = resize_image(img, *target_dims)
            out.append(Sample(len(out), img[..., None].astype(np.float32), float(label)))
    if not out:
        raise ConfigurationError(f"{root} holds no class directories")
    return out


# --------------------------------------------------------------------------
# tabular

CSV_HEADER = list(CHOLESTEROL_FEATURES) + ["LDL-C"]


def load_tabular_csv(path) -> list[Sample]:
    """Rows of the cholesterol CSV as un-normalized 7-feature samples.

    Sex is encoded Male -> 1, Female -> 0; the label is the raw LDL-C value.
    """
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ConfigurationError(f"{path}: empty file") from None
        missing = [c for c in CSV_HEADER if c not in header]
        if missing or len(header) != len(CSV_HEADER):
            raise ConfigurationError(f"{path}: header must be {','.join(CSV_HEADER)}; missing {missing}")
        order = [header.index(c) for c in CSV_HEADER]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            row = [row[i].strip() for i in order]
            sex = {"male": 1.0, "female": 0.0}.get(row[1].lower())
            if sex is None:
                raise DataError(f"{path}:{lineno}: Sex must be Male or Female, got {row[1]!r}")
            try:
                nums = [float(v) for v in row[:1] + row[2:]]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric field") from None
            if not np.all(np.isfinite(nums)):
                raise DataError(f"{path}:{lineno}: non-finite field")
            feats = np.array([nums[0], sex] + nums[1:6], dtype=np.float64)
            out.append(Sample(len(out), feats, nums[6]))
    return out


@dataclass
class ZScore:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, samples: list[Sample]) -> "ZScore":
        x = np.stack([s.features for s in samples]).astype(np.float64)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), 1e-8))

    def apply(self, samples: list[Sample]) -> list[Sample]:
        return [
            Sample(s.sample_id, ((s.features - self.mean) / self.std).astype(np.float32), s.label)
            for s in samples
        ]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


# --------------------------------------------------------------------------
# synthetic desk-scale datasets

SYNTH_IMAGE_SIZE = 16

# LDL-C = intercept + sum(coef * predictor) + N(0, noise); predictors in CSV order
LDL_COEFFICIENTS = {
    "intercept": -5.0,
    "Age": 0.10,
    "Sex": -2.0,
    "Height": 0.05,
    "Weight": 0.08,
    "TC": 0.95,
    "HDL-C": -0.90,
    "TG": -0.18,
}
LDL_NOISE = 8.0


def synth_image(rng: Rng, label: int, size: int = SYNTH_IMAGE_SIZE, noise: float = 0.15) -> np.ndarray:
    """Class 0: roughly centred Gaussian blob.  Class 1: vertical stripes."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    amp = rng.uniform(1, 0.25, 0.6)[0]
    if label == 0:
        cy, cx = rng.uniform(2, size / 2 - 2.5, size / 2 + 1.5)
        sigma = rng.uniform(1, 2.0, 4.0)[0]
        img = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    else:
        period = rng.uniform(1, 3.0, 6.0)[0]
        phase = rng.uniform(1, 0, 2 * np.pi)[0]
        img = amp * 0.5 * (1 + np.sin(2 * np.pi * xx / period + phase))
    img = 0.2 + img + rng.normal(size * size, 0.0, noise).reshape(size, size)
    return np.clip(img, 0.0, 1.0)


def generate_classification(n: int = 600, seed: int = 0, noise: float = 0.15) -> list[Sample]:
    root = Rng(seed).child("synthetic-classification")
    labels = root.child("labels").permutation(n) % 2
    out = []
    for i in range(n):
        img = synth_image(root.child("image", i), int(labels[i]), noise=noise)
        out.append(Sample(i, img[..., None].astype(np.float32), float(labels[i])))
    return out


def synth_tabular(n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Predictors in the ranges of routine lipid panels, and an LDL-C target."""
    rng = Rng(seed).child("synthetic-regression")
    age = np.round(rng.uniform(n, 20, 86))
    sex = (rng.uniform(n) < 0.5).astype(np.float64)
    height = np.where(sex == 1, 171.0, 158.0) + rng.normal(n, 0, 6.5)
    weight = np.where(sex == 1, 70.0, 57.0) + 0.6 * (height - np.where(sex == 1, 171.0, 158.0)) + rng.normal(n, 0, 9.0)
    tc = np.clip(rng.normal(n, 190, 35), 90, 340)
    hdl = np.clip(rng.normal(n, 52 - 6 * sex, 12), 18, 110)
    tg = np.clip(np.exp(rng.normal(n, np.log(115), 0.45)), 30, 600)
    x = np.stack([age, sex, np.round(height, 1), np.round(weight, 2), np.round(tc), np.round(hdl), np.round(tg)], axis=1)
    c = LDL_COEFFICIENTS
    ldl = c["intercept"] + sum(c[name] * x[:, i] for i, name in enumerate(CHOLESTEROL_FEATURES))
    ldl = np.maximum(ldl + rng.normal(n, 0, LDL_NOISE), 10.0)
    return x, np.round(ldl, 1)


def generate_regression(n: int = 6000, seed: int = 0) -> list[Sample]:
    x, y = synth_tabular(n, seed)
    return [Sample(i, x[i].copy(), float(y[i])) for i in range(n)]


def write_classification_dir(out, n: int = 600, seed: int = 0) -> Path:
    out = Path(out)
    for sample in generate_classification(n, seed):
        cls = "pos" if sample.label == 1 else "neg"
        (out / cls).mkdir(parents=True, exist_ok=True)
        pixels = np.round(sample.features[..., 0].astype(np.float64) * 255)
        write_pgm(out / cls / f"{sample.sample_id:05d}.pgm", pixels)
    return out


def write_regression_csv(out, n: int = 6000, seed: int = 0) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "cholesterol.csv"
    x, y = synth_tabular(n, seed)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for row, label in zip(x, y):
            w.writerow([
                f"{row[0]:.0f}", "Male" if row[1] == 1 else "Female", f"{row[2]:.1f}",
                f"{row[3]:.2f}", f"{row[4]:.0f}", f"{row[5]:.0f}", f"{row[6]:.0f}", f"{label:.1f}",
            ])
    return path
