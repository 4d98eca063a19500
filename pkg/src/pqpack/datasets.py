"""Seeded synthetic task generators and the IDX image-file loader."""

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    x: np.ndarray  # (N, ...) float32
    y: np.ndarray  # (N,) int64 labels
    num_classes: int
    name: str = ""

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError(
                f"{self.x.shape[0]} samples but {self.y.shape[0]} labels"
            )

    def __len__(self) -> int:
        return self.x.shape[0]

    def split(self, test_fraction: float = 0.1, seed: int = 0):
        """Disjoint train/test split with a seeded shuffle."""
        n = len(self)
        n_test = max(1, int(round(n * test_fraction)))
        order = np.random.default_rng(seed).permutation(n)
        test_idx, train_idx = order[:n_test], order[n_test:]
        return (
            LabeledDataset(self.x[train_idx], self.y[train_idx],
                           self.num_classes, self.name + "/train"),
            LabeledDataset(self.x[test_idx], self.y[test_idx],
                           self.num_classes, self.name + "/test"),
        )


# ----------------------------------------------------------------------
# generators


def make_spirals(n: int, seed: int = 0, noise: float = 0.12,
                 num_classes: int = 3) -> LabeledDataset:
    """Interleaved 2-D spiral arms, one per class."""
    rng = np.random.default_rng(seed)
    per = n // num_classes + 1
    xs, ys = [], []
    for c in range(num_classes):
        t = rng.uniform(0.25, 1.0, per)
        angle = t * 2.5 * np.pi + 2.0 * np.pi * c / num_classes
        r = t * 1.5
        pts = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
        pts += rng.normal(0, noise, pts.shape) * t[:, None]
        xs.append(pts)
        ys.append(np.full(per, c))
    x = np.concatenate(xs)[:n].astype(np.float32)
    y = np.concatenate(ys)[:n].astype(np.int64)
    order = rng.permutation(n)
    return LabeledDataset(x[order], y[order], num_classes, "spirals")


_SEGMENTS = {
    #        top  mid  bot  ul   ur   ll   lr
    0: (1, 0, 1, 1, 1, 1, 1),
    1: (0, 0, 0, 0, 1, 0, 1),
    2: (1, 1, 1, 0, 1, 1, 0),
    3: (1, 1, 1, 0, 1, 0, 1),
    4: (0, 1, 0, 1, 1, 0, 1),
    5: (1, 1, 1, 1, 0, 0, 1),
    6: (1, 1, 1, 1, 0, 1, 1),
    7: (1, 0, 0, 0, 1, 0, 1),
    8: (1, 1, 1, 1, 1, 1, 1),
    9: (1, 1, 1, 1, 1, 0, 1),
}


def _glyph(digit: int) -> np.ndarray:
    top, mid, bot, ul, ur, ll, lr = _SEGMENTS[digit]
    g = np.zeros((8, 8), dtype=np.float32)
    if top:
        g[1, 2:6] = 1
    if mid:
        g[4, 2:6] = 1
    if bot:
        g[6, 2:6] = 1
    if ul:
        g[1:5, 1] = 1
    if ur:
        g[1:5, 6] = 1
    if ll:
        g[4:7, 1] = 1
    if lr:
        g[4:7, 6] = 1
    return g


def make_glyph_digits(n: int, seed: int = 0, noise: float = 0.35) -> LabeledDataset:
    """8x8 two-channel seven-segment digit glyphs with jitter and noise
    (channel 1 is the photographic negative)."""
    rng = np.random.default_rng(seed)
    glyphs = np.stack([_glyph(d) for d in range(10)])
    y = rng.integers(0, 10, n)
    x = np.empty((n, 2, 8, 8), dtype=np.float32)
    for i in range(n):
        g = glyphs[y[i]]
        g = np.roll(g, rng.integers(-1, 2), axis=0)
        g = np.roll(g, rng.integers(-1, 2), axis=1)
        amp = rng.uniform(0.7, 1.3)
        x[i, 0] = amp * g
        x[i, 1] = amp * (1.0 - g)
    x += rng.normal(0, noise, x.shape).astype(np.float32)
    return LabeledDataset(x, y.astype(np.int64), 10, "digits")


def make_textures(n: int, seed: int = 0, noise: float = 0.45) -> LabeledDataset:
    """16x16 grating patches: 4 orientations x 2 spatial frequencies,
    random phase, additive noise; 8 classes."""
    rng = np.random.default_rng(seed)
    orients = np.deg2rad([0, 45, 90, 135])
    freqs = [1.5, 3.0]
    yy, xx = np.mgrid[0:16, 0:16] / 16.0
    y = rng.integers(0, 8, n)
    x = np.empty((n, 1, 16, 16), dtype=np.float32)
    for i in range(n):
        o = orients[y[i] % 4]
        f = freqs[y[i] // 4]
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * f * (xx * np.cos(o) + yy * np.sin(o)) + phase)
        x[i, 0] = rng.uniform(0.8, 1.2) * wave
    x += rng.normal(0, noise, x.shape).astype(np.float32)
    return LabeledDataset(x, y.astype(np.int64), 8, "textures")


def _shape_mask(kind: int) -> np.ndarray:
    g = np.zeros((8, 8), dtype=np.float32)
    yy, xx = np.mgrid[0:8, 0:8]
    if kind == 0:  # disk
        g[(yy - 3.5) ** 2 + (xx - 3.5) ** 2 <= 6.5] = 1
    elif kind == 1:  # cross
        g[3:5, 1:7] = 1
        g[1:7, 3:5] = 1
    elif kind == 2:  # frame
        g[1:7, 1:7] = 1
        g[2:6, 2:6] = 0
    else:  # diagonal stripes
        g[(yy + xx) % 4 < 2] = 1
    return g


def make_shapes(n: int, seed: int = 0, noise: float = 0.35) -> LabeledDataset:
    """8x8 two-channel geometric shapes (disk, cross, frame, stripes)."""
    rng = np.random.default_rng(seed)
    masks = np.stack([_shape_mask(k) for k in range(4)])
    y = rng.integers(0, 4, n)
    x = np.empty((n, 2, 8, 8), dtype=np.float32)
    for i in range(n):
        g = masks[y[i]]
        g = np.roll(g, rng.integers(-1, 2), axis=0)
        g = np.roll(g, rng.integers(-1, 2), axis=1)
        amp = rng.uniform(0.7, 1.3)
        x[i, 0] = amp * g
        x[i, 1] = amp * (1.0 - g)
    x += rng.normal(0, noise, x.shape).astype(np.float32)
    return LabeledDataset(x, y.astype(np.int64), 4, "shapes")


GENERATORS = {
    "spirals": make_spirals,
    "digits": make_glyph_digits,
    "textures": make_textures,
    "shapes": make_shapes,
}


# ----------------------------------------------------------------------
# IDX file format


def _read_exact(path: str, expected_magic: int, ndim: int):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(
            f"{path}: expected 4 magic bytes at offset 0, got {len(raw)}"
        )
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: magic 0x{magic:08x} at offset 0, expected "
            f"0x{expected_magic:08x}"
        )
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(
            f"{path}: expected {header} header bytes, got {len(raw)}"
        )
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) != header + count:
        raise IdxFormatError(
            f"{path}: expected {header + count} bytes for shape {dims}, "
            f"got {len(raw)} (offset {min(len(raw), header)})"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def read_idx_images(path: str) -> np.ndarray:
    """(N, H, W) uint8 pixels from a big-endian IDX3 image file."""
    return _read_exact(path, IDX_IMAGE_MAGIC, 3)


def read_idx_labels(path: str) -> np.ndarray:
    return _read_exact(path, IDX_LABEL_MAGIC, 1)


def load_idx_dataset(images_path: str, labels_path: str,
                     num_classes: int | None = None,
                     name: str = "idx") -> LabeledDataset:
    """Pair an IDX image file with its label file; pixels normalize to
    [0, 1] float32 shaped (N, 1, H, W)."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    if labels.max() >= num_classes:
        raise IdxFormatError(
            f"label {labels.max()} out of range for {num_classes} classes"
        )
    x = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return LabeledDataset(x, labels.astype(np.int64), num_classes, name)


def write_idx_images(path: str, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGE_MAGIC))
        fh.write(struct.pack(">3I", *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path: str, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_LABEL_MAGIC))
        fh.write(struct.pack(">I", labels.shape[0]))
        fh.write(labels.tobytes())
