"""Dataset ingestion and synthesis.

Supports three sources:
  * IDX image/label archives (big-endian, standard magic numbers);
  * EVST event-stream files: binary (t_us, x, y, polarity) records with a
    16-byte header, integrated into per-window count frames;
  * deterministic synthetic datasets ("bars" static images and
    "moving-bar" event streams) for desk-scale experiments.

Event integration bins counts and never discards in-bounds events, so the
total count is conserved under any window length and downsampling target.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

EVST_MAGIC = b"EVST"
EVST_VERSION = 1
_EVST_HEADER = struct.Struct("<4sHHHIH")  # magic, version, width, height, count, reserved
_EVST_RECORD = struct.Struct("<IHHB")  # t_us, x, y, polarity


class DataFormatError(ValueError):
    """Raised for malformed dataset files."""


@dataclass
class EventStream:
    """Raw (t, x, y, polarity) events of one sample, time-sorted."""

    t: np.ndarray  # microseconds, non-decreasing
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray  # polarity in {0, 1}
    sensor_width: int
    sensor_height: int
    label: int | None = None

    def __post_init__(self):
        if len(self.t) and np.any(np.diff(self.t) < 0):
            raise DataFormatError("event timestamps must be non-decreasing")
        if len(self.t) and (
            self.x.min() < 0 or self.x.max() >= self.sensor_width
            or self.y.min() < 0 or self.y.max() >= self.sensor_height
        ):
            raise DataFormatError("event coordinates out of sensor bounds")


@dataclass
class FrameTensor:
    """Per-window event-count frames [T, 2, H, W] (channel = polarity)."""

    frames: np.ndarray
    window_ms: float


@dataclass
class ImageDataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(
                f"image/label count mismatch: {len(self.images)} images vs {len(self.labels)} labels"
            )


# ---------------------------------------------------------------------------
# IDX


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise DataFormatError(f"truncated IDX file while reading {what} ({len(buf)}/{n} bytes)")
    return buf


def load_idx(images_path, labels_path) -> ImageDataset:
    """Read an IDX image archive and its label file into [0,1] floats."""
    with open(images_path, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(f"bad IDX image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(fh, n * rows * cols, "image pixels")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)
    with open(labels_path, "rb") as fh:
        magic, nl = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(f"bad IDX label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(fh, nl, "labels"), dtype=np.uint8).astype(np.int64)
    if n != nl:
        raise DataFormatError(f"image/label count mismatch: {n} images vs {nl} labels")
    return ImageDataset(images.astype(np.float32) / 255.0, labels)


# ---------------------------------------------------------------------------
# EVST event files


def save_evst(path, stream: EventStream):
    with open(path, "wb") as fh:
        fh.write(_EVST_HEADER.pack(EVST_MAGIC, EVST_VERSION, stream.sensor_width, stream.sensor_height,
                                   len(stream.t), 0))
        for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p):
            fh.write(_EVST_RECORD.pack(int(t), int(x), int(y), int(p)))


def load_evst(path) -> EventStream:
    with open(path, "rb") as fh:
        head = fh.read(_EVST_HEADER.size)
        if len(head) != _EVST_HEADER.size:
            raise DataFormatError("truncated EVST header")
        magic, version, width, height, count, _ = _EVST_HEADER.unpack(head)
        if magic != EVST_MAGIC:
            raise DataFormatError(f"bad EVST magic {magic!r}")
        if version != EVST_VERSION:
            raise DataFormatError(f"unsupported EVST version {version}")
        raw = fh.read(count * _EVST_RECORD.size)
        if len(raw) != count * _EVST_RECORD.size:
            raise DataFormatError(f"truncated EVST records ({len(raw)}/{count * _EVST_RECORD.size} bytes)")
    arr = np.frombuffer(raw, dtype=np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")]))
    return EventStream(
        t=arr["t"].astype(np.int64), x=arr["x"].astype(np.int64), y=arr["y"].astype(np.int64),
        p=arr["p"].astype(np.int64), sensor_width=width, sensor_height=height,
    )


def integrate_events(stream: EventStream, window_ms: float, target_hw=None) -> FrameTensor:
    """Bin events into [T, 2, H', W'] count frames in window_ms increments.

    Spatial downsampling sums counts into target bins. An empty stream
    yields a single all-zero frame.
    """
    if window_ms <= 0:
        raise ValueError(f"window_ms must be positive, got {window_ms}")
    H, W = (stream.sensor_height, stream.sensor_width) if target_hw is None else target_hw
    window_us = int(round(window_ms * 1000))
    if len(stream.t) == 0:
        return FrameTensor(np.zeros((1, 2, H, W), dtype=np.float32), window_ms)
    duration = int(stream.t.max()) + 1
    T = max(1, -(-duration // window_us))
    frames = np.zeros((T, 2, H, W), dtype=np.float32)
    ti = stream.t // window_us
    yi = stream.y * H // stream.sensor_height
    xi = stream.x * W // stream.sensor_width
    np.add.at(frames, (ti, stream.p, yi, xi), 1.0)
    return FrameTensor(frames, window_ms)


# ---------------------------------------------------------------------------
# augmentation


def augment_batch(images, rng):
    """Random horizontal flip (p=0.5) and pad-4-reflect random crop."""
    images = np.asarray(images)
    out = np.empty_like(images)
    pad = 4
    for i in range(len(images)):
        img = images[i]
        if rng.random() < 0.5:
            img = img[..., ::-1]
        size = img.shape[-1]
        padded = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(pad, pad), (pad, pad)], mode="reflect")
        oy = rng.integers(0, 2 * pad + 1)
        ox = rng.integers(0, 2 * pad + 1)
        out[i] = padded[..., oy : oy + img.shape[-2], ox : ox + size]
    return out


# ---------------------------------------------------------------------------
# synthetic datasets


def _bar_image(size, angle, offset, thickness=1.0):
    """Unit-height bar through the image at the given angle and offset."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = cx = (size - 1) / 2.0
    # signed distance to the line through (cy+dy, cx+dx) with direction angle
    nx, ny = -np.sin(angle), np.cos(angle)
    d = (xx - cx) * nx + (yy - cy) * ny - offset
    return (np.abs(d) <= thickness / 2.0).astype(np.float32)


def bar_templates(size, num_classes, thickness=1.0, max_offset=2):
    """Noise-free templates per class over a grid of offsets (oracle helper)."""
    angles = [np.pi * k / num_classes for k in range(num_classes)]
    temps = []
    for ang in angles:
        temps.append([_bar_image(size, ang, off, thickness) for off in range(-max_offset, max_offset + 1)])
    return temps


def synth_bars(n, noise=0.1, seed=0, size=8, num_classes=4) -> ImageDataset:
    """Oriented-bar images; class = bar orientation, position jittered."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    angles = [np.pi * k / num_classes for k in range(num_classes)]
    images = np.empty((n, 1, size, size), dtype=np.float32)
    max_offset = 2
    for i in range(n):
        off = rng.integers(-max_offset, max_offset + 1)
        img = _bar_image(size, angles[labels[i]], float(off))
        if noise > 0:
            img = img + rng.normal(0.0, noise, size=img.shape).astype(np.float32)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return ImageDataset(images, labels.astype(np.int64))


MOVING_BAR_DIRECTIONS = ("right", "left", "down", "up")


def synth_moving_bar_stream(direction, seed, sensor=32, window_ms=10.0, windows=8, travel=16,
                            noise_events=0):
    """One moving-bar event stream; direction is encoded only in the motion.

    The bar starts at a random offset and sweeps `travel` pixels over the
    stream duration, so its position in any single window is nearly
    uninformative; event polarity is random, so no edge-polarity cue leaks
    the direction either. A classifier must compare windows to recover the
    class.
    """
    rng = np.random.default_rng(seed)
    window_us = int(round(window_ms * 1000))
    horiz = direction in ("right", "left")
    sign = 1 if direction in ("right", "down") else -1
    start = int(rng.integers(0, sensor - 1 - travel))
    ts, xs, ys, ps = [], [], [], []
    # sub-window motion: several positions per window for a dense sweep
    substeps = 4
    total = windows * substeps
    for k in range(total):
        t = int(k * window_us / substeps) + int(rng.integers(0, max(window_us // substeps, 1)))
        frac = k / (total - 1)
        along = int(round(frac * travel))
        pos = start + along if sign > 0 else start + travel - along
        span = rng.permutation(sensor)[: sensor // 2]  # subsample bar pixels
        for q in span:
            for coord in (pos, pos + 1):
                if 0 <= coord < sensor:
                    xs.append(coord if horiz else q)
                    ys.append(q if horiz else coord)
                    ts.append(min(t, windows * window_us - 1))
                    ps.append(int(rng.integers(0, 2)))
    for _ in range(noise_events):
        ts.append(int(rng.integers(0, windows * window_us)))
        xs.append(int(rng.integers(0, sensor)))
        ys.append(int(rng.integers(0, sensor)))
        ps.append(int(rng.integers(0, 2)))
    order = np.argsort(np.asarray(ts), kind="stable")
    return EventStream(
        t=np.asarray(ts, dtype=np.int64)[order], x=np.asarray(xs, dtype=np.int64)[order],
        y=np.asarray(ys, dtype=np.int64)[order], p=np.asarray(ps, dtype=np.int64)[order],
        sensor_width=sensor, sensor_height=sensor, label=MOVING_BAR_DIRECTIONS.index(direction),
    )


def synth_moving_bars(n, noise=0.0, seed=0, sensor=32, target=8, window_ms=10.0, windows=8):
    """Event dataset of direction-labelled moving bars, pre-integrated.

    Returns (frames [N, windows, 2, target, target], labels). `noise` is the
    expected number of spurious events per stream.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(MOVING_BAR_DIRECTIONS)
    rng.shuffle(labels)
    frames = np.empty((n, windows, 2, target, target), dtype=np.float32)
    for i in range(n):
        stream = synth_moving_bar_stream(
            MOVING_BAR_DIRECTIONS[labels[i]], seed=int(rng.integers(0, 2**31)), sensor=sensor,
            window_ms=window_ms, windows=windows, noise_events=int(round(noise)),
        )
        ft = integrate_events(stream, window_ms, (target, target))
        f = ft.frames[:windows]
        if len(f) < windows:
            f = np.concatenate([f, np.zeros((windows - len(f),) + f.shape[1:], dtype=f.dtype)])
        frames[i] = f
    # normalize counts to a stable drive magnitude
    frames /= max(frames.max(), 1.0)
    return frames, labels.astype(np.int64)


def synth_dataset(kind, n, noise=0.0, seed=0, **kw):
    """Deterministic synthetic dataset; kind is "bars" or "moving-bar"."""
    if kind == "bars":
        ds = synth_bars(n, noise=noise, seed=seed, **kw)
        return ds.images, ds.labels
    if kind == "moving-bar":
        return synth_moving_bars(n, noise=noise, seed=seed, **kw)
    raise ValueError(f"unknown synthetic dataset kind: {kind!r}")


def split_indices(n, test_fraction=0.1, seed=0):
    """Disjoint, exhaustive train/test index split with a seeded shuffle."""
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(order[n_test:]), np.sort(order[:n_test])
