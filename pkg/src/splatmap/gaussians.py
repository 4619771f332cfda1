"""Gaussian primitive storage and the map snapshot format.

Primitives live in structure-of-arrays form. Color and opacity are kept as
logits so gradient steps stay inside their box constraints; scales are kept as
logs. The binary snapshot is little-endian: magic "ASPL", version u32, count
u64, then 14 float32 per primitive in the order color(3), center(3),
log_scales(3), quaternion(4), opacity_logit(1). Colors are stored in natural
[0, 1] units; quaternions are stored unit-norm, w first.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ASPL"
VERSION = 1
_LOGIT_EPS = 1e-6


class MapFormatError(ValueError):
    pass


def logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, _LOGIT_EPS, 1.0 - _LOGIT_EPS)
    return np.log(p / (1.0 - p))


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def rotations_from_quats(quats: np.ndarray) -> np.ndarray:
    """Batch (n, 4) w-first quaternions to (n, 3, 3) rotation matrices."""
    q = quats / np.linalg.norm(quats, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rot = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


class GaussianMap:
    """Mutable set of Gaussian primitives plus the keyframes kept for refinement."""

    def __init__(self):
        self.color_logit = np.zeros((0, 3), dtype=np.float64)
        self.centers = np.zeros((0, 3), dtype=np.float64)
        self.log_scales = np.zeros((0, 3), dtype=np.float64)
        self.quats = np.zeros((0, 4), dtype=np.float64)
        self.opacity_logit = np.zeros((0,), dtype=np.float64)
        self.keyframes = []

    def __len__(self):
        return self.centers.shape[0]

    @property
    def colors(self) -> np.ndarray:
        return sigmoid(self.color_logit)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def append(self, colors, centers, scales, opacity=0.5):
        """Add primitives with natural-unit colors/scales and identity rotation."""
        n = len(centers)
        if n == 0:
            return
        colors = np.asarray(colors, dtype=np.float64).reshape(n, 3)
        centers = np.asarray(centers, dtype=np.float64).reshape(n, 3)
        scales = np.asarray(scales, dtype=np.float64)
        if scales.ndim == 1:
            scales = np.repeat(scales[:, None], 3, axis=1)
        quats = np.zeros((n, 4))
        quats[:, 0] = 1.0
        op = np.full(n, float(opacity)) if np.isscalar(opacity) else np.asarray(opacity, dtype=np.float64)
        self.color_logit = np.concatenate([self.color_logit, logit(colors)])
        self.centers = np.concatenate([self.centers, centers])
        self.log_scales = np.concatenate([self.log_scales, np.log(np.maximum(scales, 1e-9))])
        self.quats = np.concatenate([self.quats, quats])
        self.opacity_logit = np.concatenate([self.opacity_logit, logit(op)])

    def keep(self, mask: np.ndarray) -> int:
        """Retain primitives where mask is True; returns the number removed."""
        removed = int(len(self) - np.count_nonzero(mask))
        if removed:
            self.color_logit = self.color_logit[mask]
            self.centers = self.centers[mask]
            self.log_scales = self.log_scales[mask]
            self.quats = self.quats[mask]
            self.opacity_logit = self.opacity_logit[mask]
        return removed

    def normalize_quats(self):
        norms = np.linalg.norm(self.quats, axis=1, keepdims=True)
        np.maximum(norms, 1e-12, out=norms)
        self.quats /= norms

    def save(self, path):
        path = Path(path)
        n = len(self)
        rec = np.empty((n, 14), dtype="<f4")
        rec[:, 0:3] = self.colors
        rec[:, 3:6] = self.centers
        rec[:, 6:9] = self.log_scales
        rec[:, 9:13] = self.quats
        rec[:, 13] = self.opacity_logit
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<Q", n))
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path) -> "GaussianMap":
        path = Path(path)
        blob = path.read_bytes()
        if len(blob) < 16 or blob[:4] != MAGIC:
            raise MapFormatError(f"{path}: not a map snapshot (bad magic)")
        version = struct.unpack("<I", blob[4:8])[0]
        if version != VERSION:
            raise MapFormatError(f"{path}: unsupported snapshot version {version}")
        n = struct.unpack("<Q", blob[8:16])[0]
        expect = 16 + n * 14 * 4
        if len(blob) != expect:
            raise MapFormatError(f"{path}: truncated snapshot ({len(blob)} bytes, expected {expect})")
        rec = np.frombuffer(blob[16:], dtype="<f4").reshape(n, 14).astype(np.float64)
        gmap = cls()
        gmap.color_logit = logit(rec[:, 0:3])
        gmap.centers = rec[:, 3:6].copy()
        gmap.log_scales = rec[:, 6:9].copy()
        gmap.quats = rec[:, 9:13].copy()
        gmap.opacity_logit = rec[:, 13].copy()
        gmap.normalize_quats()
        return gmap

    def export_text(self, path):
        """One primitive per line, same field order as the binary record."""
        n = len(self)
        rec = np.empty((n, 14), dtype=np.float64)
        rec[:, 0:3] = self.colors
        rec[:, 3:6] = self.centers
        rec[:, 6:9] = self.log_scales
        rec[:, 9:13] = self.quats
        rec[:, 13] = self.opacity_logit
        np.savetxt(path, rec, fmt="%.7g")
