"""Descriptor matching with the nearest-neighbour ratio test, object models
trained from several images, and locating a model in a test image.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .asift import AsiftParams, detect_asift
from .errors import ModelFormatError, NoKeypointsError
from .imgcore import to_grayscale
from .sift import detect_sift

MODEL_MAGIC = b"ASFM"
MODEL_VERSION = 1
DESCRIPTOR_LEN = 128

_CHUNK = 512
_SHORTLIST = 4


class Match(NamedTuple):
    query_index: int
    train_index: int
    distance: float
    ratio: float


class MatchedPoint(NamedTuple):
    x: float
    y: float


def _as_matrix(descs) -> np.ndarray:
    m = np.asarray(descs, dtype=np.float64)
    if m.size == 0:
        return m.reshape(0, DESCRIPTOR_LEN)
    return m.reshape(len(m), -1)


def match_descriptors(query, train, ratio_threshold: float = 0.8) -> list[Match]:
    """Exhaustive nearest-neighbour matching with the distance-ratio test.

    A query is kept when ``d1 / d2 < ratio_threshold``, where ``d1`` and ``d2``
    are the Euclidean distances to its nearest and second-nearest train
    descriptors (``d2 == 0`` keeps the match with ratio 0). Nothing matches a
    train set of fewer than two descriptors. Equal distances resolve to the
    lower train index.
    """
    if not 0 < ratio_threshold < 1:
        raise ValueError("ratio_threshold must lie in (0, 1)")
    q = _as_matrix(query)
    t = _as_matrix(train)
    if len(t) < 2 or len(q) == 0:
        return []
    k = min(_SHORTLIST, len(t))
    t_sq = np.einsum("ij,ij->i", t, t)
    out = []
    for start in range(0, len(q), _CHUNK):
        qc = q[start:start + _CHUNK]
        # Gram-matrix distances only shortlist candidates; exact distances decide
        approx = t_sq[None, :] - 2.0 * qc @ t.T
        cand = np.argpartition(approx, k - 1, axis=1)[:, :k] if k < len(t) else \
            np.broadcast_to(np.arange(len(t)), (len(qc), len(t)))
        exact = np.linalg.norm(qc[:, None, :] - t[cand], axis=2)
        for row in range(len(qc)):
            order = sorted(range(k), key=lambda c: (exact[row, c], cand[row, c]))
            d1 = float(exact[row, order[0]])
            d2 = float(exact[row, order[1]])
            ratio = 0.0 if d2 == 0 else d1 / d2
            if d2 == 0 or ratio < ratio_threshold:
                out.append(Match(start + row, int(cand[row, order[0]]), d1, ratio))
    return out


@dataclass
class ObjectModel:
    name: str
    descriptors: np.ndarray   # (n, 128) float32
    source_count: int
    params_fingerprint: str

    def to_bytes(self) -> bytes:
        name = self.name.encode("utf-8")
        fp = self.params_fingerprint.encode("utf-8")
        desc = np.ascontiguousarray(self.descriptors, dtype="<f4")
        return b"".join([
            MODEL_MAGIC,
            struct.pack("<I", MODEL_VERSION),
            struct.pack("<I", len(name)), name,
            struct.pack("<I", len(fp)), fp,
            struct.pack("<II", self.source_count, len(desc)),
            desc.tobytes(),
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> "ObjectModel":
        if data[:4] != MODEL_MAGIC:
            raise ModelFormatError("not an ASFM model file")
        pos = 4

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(data):
                raise ModelFormatError("truncated model file")
            chunk = data[pos:pos + n]
            pos += n
            return chunk

        (version,) = struct.unpack("<I", take(4))
        if version != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model version {version}")
        try:
            name = take(struct.unpack("<I", take(4))[0]).decode("utf-8")
            fp = take(struct.unpack("<I", take(4))[0]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ModelFormatError("bad string in model header") from exc
        source_count, count = struct.unpack("<II", take(8))
        raw = take(count * DESCRIPTOR_LEN * 4)
        if pos != len(data):
            raise ModelFormatError("trailing bytes after descriptors")
        desc = np.frombuffer(raw, dtype="<f4").reshape(count, DESCRIPTOR_LEN).astype(np.float32)
        return cls(name, desc, source_count, fp)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ObjectModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def params_fingerprint(p: AsiftParams) -> str:
    blob = json.dumps(dataclasses.asdict(p), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _consensus(per_image: list[np.ndarray], ratio_threshold: float) -> list[np.ndarray]:
    kept = []
    for i, d in enumerate(per_image):
        keep = np.zeros(len(d), dtype=bool)
        for j, other in enumerate(per_image):
            if i == j or keep.all():
                continue
            for m in match_descriptors(d, other, ratio_threshold):
                keep[m.query_index] = True
        kept.append(d[keep])
    return kept


def train_model(images: Sequence[np.ndarray], name: str, p: AsiftParams = AsiftParams(),
                consensus: bool = False, ratio_threshold: float = 0.8) -> ObjectModel:
    """Union of ASIFT descriptors over the training images.

    With ``consensus`` only descriptors that match a descriptor of some other
    training image are kept.
    """
    if not images:
        raise ValueError("need at least one training image")
    per_image = []
    for img in images:
        feats = detect_asift(to_grayscale(img), p)
        d = np.array([f[1] for f in feats], dtype=np.float32).reshape(-1, DESCRIPTOR_LEN)
        per_image.append(d)
    if consensus and len(per_image) > 1:
        per_image = _consensus(per_image, ratio_threshold)
    desc = np.concatenate(per_image) if per_image else np.zeros((0, DESCRIPTOR_LEN), np.float32)
    if len(desc) == 0:
        raise NoKeypointsError(f"no keypoints found in {len(images)} training image(s)")
    return ObjectModel(name, desc, len(images), params_fingerprint(p))


def detect_test_features(test: np.ndarray, p: AsiftParams = AsiftParams(), fast: bool = False):
    """ASIFT features of a color test image (plain SIFT when ``fast``)."""
    gray = to_grayscale(test)
    return detect_sift(gray, p.sift) if fast else detect_asift(gray, p)


def matched_points(feats, model: ObjectModel, shape: tuple[int, int],
                   ratio_threshold: float = 0.8) -> list[MatchedPoint]:
    """Positions of test features that match the model, one per rounded pixel."""
    if not feats:
        return []
    h, w = shape
    q = np.array([f[1] for f in feats])
    points = []
    seen = set()
    for m in match_descriptors(q, model.descriptors, ratio_threshold):
        kp = feats[m.query_index][0]
        key = (round(kp.x), round(kp.y))
        if key in seen or not (0 <= kp.x < w and 0 <= kp.y < h):
            continue
        seen.add(key)
        points.append(MatchedPoint(kp.x, kp.y))
    return points


def locate_keypoints(test: np.ndarray, model: ObjectModel, p: AsiftParams = AsiftParams(),
                     ratio_threshold: float = 0.8, fast: bool = False) -> list[MatchedPoint]:
    """Test-image positions of keypoints that match the model (test side as query)."""
    feats = detect_test_features(test, p, fast)
    return matched_points(feats, model, np.asarray(test).shape[:2], ratio_threshold)
