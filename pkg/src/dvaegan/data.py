"""Synthetic paired datasets, the DVGT tensor container, and manifests.

The response simulator produces x = W * phi(y) + noise where phi is a 20x20
block-mean downsample of the stimulus; z-scoring statistics always come from
the training split so the test split sees no leakage. The DVGT container is
bit-exact: magic "DVGT", version byte, dtype byte (0x01 = float32), u8 ndim,
ndim little-endian u32 extents, then the row-major little-endian payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, FormatError, ValidationError
from .model import CognitiveSignal, StimulusImage

STIMULUS_FAMILIES = ("geometric-shapes", "digits-like-strokes")
PHI_GRID = 20  # downsample resolution of the response model's feature map


# ---------------------------------------------------------------------------
# stimulus generation


def _box_blur(img, passes=2):
    out = img
    for _ in range(passes):
        padded = np.pad(out, 1, mode="edge")
        out = (
            padded[:-2, :-2] + padded[:-2, 1:-1] + padded[:-2, 2:]
            + padded[1:-1, :-2] + padded[1:-1, 1:-1] + padded[1:-1, 2:]
            + padded[2:, :-2] + padded[2:, 1:-1] + padded[2:, 2:]
        ) / 9.0
    return out


def _draw_shape(rng, hw):
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    kind = rng.integers(0, 3)
    cx, cy = rng.uniform(0.3 * hw, 0.7 * hw, size=2)
    a = rng.uniform(0.12 * hw, 0.3 * hw)
    b = rng.uniform(0.12 * hw, 0.3 * hw)
    if kind == 0:  # rectangle
        mask = (np.abs(xx - cx) <= a) & (np.abs(yy - cy) <= b)
    elif kind == 1:  # ellipse
        mask = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    else:  # cross
        bar = max(2.0, 0.3 * min(a, b))
        mask = ((np.abs(xx - cx) <= a) & (np.abs(yy - cy) <= bar)) | (
            (np.abs(xx - cx) <= bar) & (np.abs(yy - cy) <= b)
        )
    fg = rng.uniform(0.7, 1.0)
    return _box_blur(mask.astype(np.float64) * fg), int(kind)


def _dist_to_segment(xx, yy, p0, p1):
    d = p1 - p0
    denom = float(d @ d) or 1.0
    t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / denom, 0.0, 1.0)
    return np.hypot(xx - (p0[0] + t * d[0]), yy - (p0[1] + t * d[1]))


def _draw_strokes(rng, hw):
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    n_pts = rng.integers(3, 7)
    pts = rng.uniform(0.15 * hw, 0.85 * hw, size=(n_pts, 2))
    thickness = rng.uniform(0.03 * hw, 0.07 * hw)
    field_img = np.zeros((hw, hw))
    for p0, p1 in zip(pts[:-1], pts[1:]):
        dist = _dist_to_segment(xx, yy, p0, p1)
        field_img = np.maximum(field_img, dist <= thickness)
    fg = rng.uniform(0.7, 1.0)
    return _box_blur(field_img * fg), n_pts


def gen_stimuli(family, n, seed, hw=100, channels=1):
    """n procedurally drawn grayscale stimuli, deterministic under seed."""
    if family not in STIMULUS_FAMILIES:
        raise ConfigError(f"unknown stimulus family {family!r}; choose from {STIMULUS_FAMILIES}")
    if n < 1:
        raise ConfigError("need at least one stimulus")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        if family == "geometric-shapes":
            img, _ = _draw_shape(rng, hw)
        else:
            img, _ = _draw_strokes(rng, hw)
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        pixels = np.repeat(img[None], channels, axis=0)
        out.append(StimulusImage(pixels=pixels, id=f"{family}-{seed:08x}-{i:05d}"))
    return out


# ---------------------------------------------------------------------------
# response simulation


@dataclass
class SynthParams:
    family: str = "geometric-shapes"
    d_x: int = 2048
    noise_sigma: float = 0.1
    nonlinearity: bool = False
    image_hw: int = 100
    channels: int = 1
    zscore: bool = True
    weight_matrix: np.ndarray | None = None  # test hook; None draws a seeded map

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.family not in STIMULUS_FAMILIES:
            raise ConfigError(f"unknown stimulus family {self.family!r}")

    def describe(self):
        return {
            "family": self.family,
            "d_x": self.d_x,
            "noise_sigma": self.noise_sigma,
            "nonlinearity": self.nonlinearity,
            "image_hw": self.image_hw,
            "channels": self.channels,
            "zscore": self.zscore,
        }


def downsample_features(pixels, grid=PHI_GRID):
    """Block-mean the channel-averaged image onto a grid x grid map, flattened."""
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    h, w = img.shape
    row_edges = (np.arange(grid + 1) * h) // grid
    col_edges = (np.arange(grid + 1) * w) // grid
    rows = np.add.reduceat(img, row_edges[:-1], axis=0)
    cells = np.add.reduceat(rows, col_edges[:-1], axis=1)
    # reduceat yields the single row/col value where edges repeat (image
    # smaller than the grid), so each such block has an effective count of 1
    areas = np.outer(
        np.maximum(np.diff(row_edges), 1), np.maximum(np.diff(col_edges), 1)
    )
    return (cells / areas).reshape(-1)


def simulate_responses(images, params, seed, train_idx=None):
    """Simulated activation vectors for a list of stimuli.

    train_idx selects the rows whose statistics drive the z-scoring; all rows
    are transformed with those statistics.
    """
    rng = np.random.default_rng(seed)
    feats = np.stack([downsample_features(img.pixels) for img in images])
    if params.weight_matrix is not None:
        w = np.asarray(params.weight_matrix, dtype=np.float64)
        if w.shape != (params.d_x, feats.shape[1]):
            raise ValidationError(
                f"weight matrix shape {w.shape} != ({params.d_x}, {feats.shape[1]})"
            )
    else:
        w = rng.standard_normal((params.d_x, feats.shape[1])) / np.sqrt(feats.shape[1])
    responses = feats @ w.T
    if params.nonlinearity:
        responses = np.tanh(responses)
    if params.noise_sigma > 0:
        responses = responses + params.noise_sigma * rng.standard_normal(responses.shape)
    if params.zscore:
        stat_rows = responses if train_idx is None else responses[np.asarray(train_idx)]
        mean = stat_rows.mean(axis=0)
        std = np.maximum(stat_rows.std(axis=0), 1e-8)
        responses = (responses - mean) / std
    return [CognitiveSignal(row.astype(np.float32)) for row in responses]


# ---------------------------------------------------------------------------
# paired dataset


@dataclass
class PairedDataset:
    records: list  # (CognitiveSignal, StimulusImage)
    train_idx: np.ndarray
    test_idx: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.records:
            raise ValidationError("no records")
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)
        if set(self.train_idx) & set(self.test_idx):
            raise ValidationError("train and test splits overlap")
        all_idx = set(self.train_idx) | set(self.test_idx)
        if all_idx and (min(all_idx) < 0 or max(all_idx) >= len(self.records)):
            raise ValidationError("split index out of range")
        d_x = self.records[0][0].dim
        shape = self.records[0][1].pixels.shape
        for sig, img in self.records:
            if sig.dim != d_x:
                raise ValidationError(f"inconsistent signal dim: {sig.dim} != {d_x}")
            if img.pixels.shape != shape:
                raise ValidationError(f"inconsistent image shape: {img.pixels.shape} != {shape}")
        train_ids = {self.records[i][1].id for i in self.train_idx}
        test_ids = {self.records[i][1].id for i in self.test_idx}
        if train_ids & test_ids:
            raise ValidationError("test stimuli overlap train stimuli by id")
        # masked voxels are zeroed here so every consumer sees the same input
        self._signals = np.stack([s.masked_values() for s, _ in self.records]).astype(np.float32)
        self._images = np.stack([i.pixels for _, i in self.records]).astype(np.float32)

    @property
    def d_x(self):
        return self.records[0][0].dim

    @property
    def image_shape(self):
        return self.records[0][1].pixels.shape

    def signals(self, idx=None):
        return self._signals if idx is None else self._signals[np.asarray(idx)]

    def images(self, idx=None):
        return self._images if idx is None else self._images[np.asarray(idx)]

    def stimulus(self, i):
        return self.records[i][1]

    @property
    def n_train(self):
        return len(self.train_idx)

    @property
    def n_test(self):
        return len(self.test_idx)


def make_synthetic_dataset(params, n_train, n_test, seed):
    """Pure function of (params, sizes, seed): stimuli, responses, and split."""
    stimuli = gen_stimuli(params.family, n_train + n_test, seed, hw=params.image_hw, channels=params.channels)
    train_idx = np.arange(n_train)
    test_idx = np.arange(n_train, n_train + n_test)
    signals = simulate_responses(stimuli, params, seed=seed + 1, train_idx=train_idx)
    provenance = {"kind": "synthetic", "seed": seed, "params": params.describe()}
    return PairedDataset(
        records=list(zip(signals, stimuli)),
        train_idx=train_idx,
        test_idx=test_idx,
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# DVGT binary container

DVGT_MAGIC = b"DVGT"
DVGT_VERSION = 1
DVGT_F32 = 0x01


def tensor_to_bytes(tensor):
    """Bit-exact float32 container; scalars are stored with shape (1,)."""
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    if arr.dtype != np.float32:
        raise FormatError(f"DVGT stores float32 tensors, got dtype {arr.dtype}")
    shape = arr.shape if arr.ndim else (1,)
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    return b"".join(
        (
            DVGT_MAGIC,
            struct.pack("<BBB", DVGT_VERSION, DVGT_F32, len(shape)),
            struct.pack(f"<{len(shape)}I", *shape),
            np.ascontiguousarray(arr, dtype="<f4").tobytes(),
        )
    )


def tensor_from_bytes(raw, label="<bytes>"):
    if len(raw) < 7:
        raise FormatError(f"{label}: truncated header ({len(raw)} bytes)")
    if raw[:4] != DVGT_MAGIC:
        raise FormatError(f"{label}: bad magic {raw[:4]!r} at offset 0")
    version, dtype, ndim = struct.unpack_from("<BBB", raw, 4)
    if version != DVGT_VERSION:
        raise FormatError(f"{label}: unsupported version {version} at offset 4")
    if dtype != DVGT_F32:
        raise FormatError(f"{label}: unsupported dtype byte {dtype:#x} at offset 5")
    header_end = 7 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{label}: truncated shape block ({len(raw)} < {header_end} bytes)")
    shape = struct.unpack_from(f"<{ndim}I", raw, 7)
    expected = header_end + 4 * int(np.prod(shape, dtype=np.int64))
    if len(raw) != expected:
        raise FormatError(
            f"{label}: payload size mismatch, expected {expected} bytes, got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=header_end).reshape(shape)
    return Tensor(data.copy())


def write_tensor(path, tensor):
    Path(path).write_bytes(tensor_to_bytes(tensor))


def read_tensor(path):
    return tensor_from_bytes(Path(path).read_bytes(), label=str(path))


# ---------------------------------------------------------------------------
# manifests

MANIFEST_NAME = "manifest.json"


def save_manifest(dataset, out_dir):
    """Write one DVGT pair per record plus a manifest.json index."""
    out = Path(out_dir)
    (out / "signals").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(parents=True, exist_ok=True)
    train = set(int(i) for i in dataset.train_idx)
    records = []
    for i, (sig, img) in enumerate(dataset.records):
        sig_path = f"signals/{i:05d}.dvgt"
        img_path = f"images/{i:05d}.dvgt"
        write_tensor(out / sig_path, sig.values)
        write_tensor(out / img_path, img.pixels)
        records.append(
            {
                "id": img.id,
                "signal": sig_path,
                "image": img_path,
                "split": "train" if i in train else "test",
            }
        )
    doc = {
        "version": 1,
        "d_x": int(dataset.d_x),
        "image_shape": [int(s) for s in dataset.image_shape],
        "provenance": dataset.provenance,
        "records": records,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(doc, indent=1))
    return out / MANIFEST_NAME


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise ValidationError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("version") != 1:
        raise ValidationError(f"unsupported manifest version {doc.get('version')}")
    entries = doc.get("records", [])
    if not entries:
        raise ValidationError("no records")
    base = path.parent
    seen = {}
    records, train_idx, test_idx = [], [], []
    for i, entry in enumerate(entries):
        for key in ("id", "signal", "image", "split"):
            if key not in entry:
                raise ValidationError(f"record {i} missing field {key!r}")
        if entry["split"] not in ("train", "test"):
            raise ValidationError(f"record {i} has unknown split {entry['split']!r}")
        if entry["id"] in seen and seen[entry["id"]] != entry["split"]:
            raise ValidationError(f"stimulus id {entry['id']!r} appears in both splits")
        seen[entry["id"]] = entry["split"]
        for key in ("signal", "image"):
            if not (base / entry[key]).exists():
                raise ValidationError(f"missing file {entry[key]} for record {i}")
        sig = read_tensor(base / entry["signal"]).data
        img = read_tensor(base / entry["image"]).data
        if sig.ndim != 1 or sig.size != doc["d_x"]:
            raise ValidationError(f"record {i}: signal shape {sig.shape} != d_x {doc['d_x']}")
        if list(img.shape) != list(doc["image_shape"]):
            raise ValidationError(
                f"record {i}: image shape {img.shape} != {tuple(doc['image_shape'])}"
            )
        records.append((CognitiveSignal(sig), StimulusImage(np.clip(img, 0.0, 1.0), id=entry["id"])))
        (train_idx if entry["split"] == "train" else test_idx).append(i)
    return PairedDataset(
        records=records,
        train_idx=np.array(train_idx, dtype=np.int64),
        test_idx=np.array(test_idx, dtype=np.int64),
        provenance=doc.get("provenance", {"kind": "imported"}),
    )


# ---------------------------------------------------------------------------
# PGM export


def write_pgm(path, image):
    """8-bit binary PGM (P5) of a single-channel [0, 1] image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    if img.ndim != 2:
        raise ValidationError(f"PGM export needs a 2-d image, got shape {img.shape}")
    b = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{b.shape[1]} {b.shape[0]}\n255\n".encode())
        fh.write(b.tobytes())
