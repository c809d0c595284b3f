"""Synthetic scenes: two stuff bands (sky above a horizon, ground below)
with overlapping geometric things drawn on top.  Every sample carries
full instance, semantic, and panoptic ground truth, all derived from the
same draw order so the three annotations are mutually consistent.

On disk a dataset is one directory per sample (image tensor, 16-bit PGM
rasters, packed instance bitmasks) plus a manifest with SHA-256 checksums.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ChecksumError, FormatError, GenerationError, ParameterError
from .metrics import PanopticMap, SegmentInfo

CIRCLE, RECTANGLE, TRIANGLE = 1, 2, 3
SKY, GROUND = 101, 102
THING_CLASS_IDS = [CIRCLE, RECTANGLE, TRIANGLE]
STUFF_CLASS_IDS = [SKY, GROUND]
CLASS_NAMES = {CIRCLE: "circle", RECTANGLE: "rectangle", TRIANGLE: "triangle",
               SKY: "sky", GROUND: "ground"}
MIN_VISIBLE_PIXELS = 8

_THING_COLORS = {
    CIRCLE: (0.85, 0.25, 0.25),
    RECTANGLE: (0.85, 0.78, 0.25),
    TRIANGLE: (0.30, 0.35, 0.85),
}
_SKY_COLOR = (0.55, 0.70, 0.90)
_GROUND_COLOR = (0.45, 0.35, 0.20)


@dataclass
class SceneSpec:
    seed: int = 0
    size: int = 64
    n_max: int = 3
    size_range: tuple[float, float] = (12.0, 28.0)
    allow_overlap: bool = True
    color_jitter: float = 0.06
    noise: float = 0.05

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size_range"] = list(self.size_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["size_range"] = tuple(d["size_range"])
        return cls(**d)


@dataclass
class GroundTruthSample:
    image: np.ndarray                      # (3, H, W) float32 in [0, 1]
    instances: list[tuple[int, np.ndarray]]  # (class_id, bool mask), draw order
    semantic: np.ndarray                   # (H, W) int32 class raster
    panoptic: PanopticMap


def rasterize_shape(shape: str, params: tuple, h: int, w: int) -> np.ndarray:
    """Inclusive-boundary rasterization of a circle, rectangle, or triangle."""
    vv, uu = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    if shape == "circle":
        cy, cx, r = params
        if r < 0.5:
            raise ParameterError(f"circle radius {r} is below one pixel")
        return (uu - cy) ** 2 + (vv - cx) ** 2 <= r * r
    if shape == "rectangle":
        cy, cx, hh, hw = params
        if hh < 0.5 or hw < 0.5:
            raise ParameterError(f"rectangle half-extents {(hh, hw)} are below one pixel")
        return (np.abs(uu - cy) <= hh) & (np.abs(vv - cx) <= hw)
    if shape == "triangle":
        (y0, x0), (y1, x1), (y2, x2) = params
        twice_area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(twice_area) < 1.0:
            raise ParameterError("triangle vertices are (nearly) collinear")
        if twice_area < 0:  # normalize to counter-clockwise
            (y1, x1), (y2, x2) = (y2, x2), (y1, x1)
        e0 = (x1 - x0) * (uu - y0) - (y1 - y0) * (vv - x0)
        e1 = (x2 - x1) * (uu - y1) - (y2 - y1) * (vv - x1)
        e2 = (x0 - x2) * (uu - y2) - (y0 - y2) * (vv - x2)
        return (e0 >= 0) & (e1 >= 0) & (e2 >= 0)
    raise ParameterError(f"unknown shape {shape!r}")


def _sample_shape(rng: np.random.Generator, spec: SceneSpec) -> tuple[int, np.ndarray]:
    h = w = spec.size
    lo, hi = spec.size_range
    class_id = int(rng.choice(THING_CLASS_IDS))
    extent = min(rng.uniform(lo, hi), h - 3.0)  # keep shapes inside the frame
    margin = extent / 2.0 + 1.0
    cy = rng.uniform(margin, h - 1 - margin)
    cx = rng.uniform(margin, w - 1 - margin)
    if class_id == CIRCLE:
        mask = rasterize_shape("circle", (cy, cx, extent / 2.0), h, w)
    elif class_id == RECTANGLE:
        other = rng.uniform(lo, hi)
        mask = rasterize_shape("rectangle", (cy, cx, extent / 2.0, other / 2.0), h, w)
    else:
        # isoceles-ish triangle: apex up, randomized base
        half = extent / 2.0
        top = (cy - half, cx + rng.uniform(-half / 2, half / 2))
        left = (cy + half, cx - half)
        right = (cy + half, cx + half)
        mask = rasterize_shape("triangle", (top, left, right), h, w)
    return class_id, mask


def _visible_masks(full_masks: list[np.ndarray]) -> list[np.ndarray]:
    """Later-drawn shapes occlude earlier ones."""
    out = []
    for i, m in enumerate(full_masks):
        vis = m.copy()
        for later in full_masks[i + 1 :]:
            vis &= ~later
        out.append(vis)
    return out


def generate_sample(spec: SceneSpec, index: int) -> GroundTruthSample:
    """Deterministic function of (spec.seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    h = w = spec.size
    horizon = int(rng.integers(h * 3 // 8, h * 5 // 8 + 1))

    count = int(rng.integers(1, spec.n_max + 1))
    classes: list[int] = []
    full_masks: list[np.ndarray] = []
    for _ in range(count):
        for attempt in range(100):
            class_id, mask = _sample_shape(rng, spec)
            candidate = full_masks + [mask]
            if not spec.allow_overlap and len(full_masks):
                if np.logical_and(mask, np.logical_or.reduce(full_masks)).any():
                    continue
            visible = _visible_masks(candidate)
            if all(v.sum() >= MIN_VISIBLE_PIXELS for v in visible):
                classes.append(class_id)
                full_masks.append(mask)
                break
        else:
            raise GenerationError(
                f"sample {index}: could not place shape {len(full_masks) + 1} "
                f"of {count} within 100 attempts; scene spec too crowded"
            )

    visible = _visible_masks(full_masks)

    sky_color = np.clip(np.asarray(_SKY_COLOR) + rng.normal(0, spec.color_jitter, 3), 0, 1)
    ground_color = np.clip(np.asarray(_GROUND_COLOR) + rng.normal(0, spec.color_jitter, 3), 0, 1)
    image = np.empty((3, h, w), dtype=np.float64)
    image[:, :horizon, :] = sky_color[:, None, None]
    image[:, horizon:, :] = ground_color[:, None, None]

    semantic = np.full((h, w), SKY, dtype=np.int32)
    semantic[horizon:, :] = GROUND
    segment_ids = np.full((h, w), 1, dtype=np.int32)
    segment_ids[horizon:, :] = 2

    for i, (class_id, vis) in enumerate(zip(classes, visible)):
        color = np.clip(
            np.asarray(_THING_COLORS[class_id]) + rng.normal(0, spec.color_jitter, 3), 0, 1
        )
        image[:, vis] = color[:, None]
        semantic[vis] = class_id
        segment_ids[vis] = 3 + i

    image = np.clip(image + rng.normal(0.0, spec.noise, size=image.shape), 0.0, 1.0)

    segments = []
    for sid, class_id in ((1, SKY), (2, GROUND)):
        area = int((segment_ids == sid).sum())
        if area:
            segments.append(SegmentInfo(sid, class_id, False, 1.0, area))
    for i, (class_id, vis) in enumerate(zip(classes, visible)):
        segments.append(SegmentInfo(3 + i, class_id, True, 1.0, int(vis.sum())))

    return GroundTruthSample(
        image=image.astype(np.float32),
        instances=list(zip(classes, visible)),
        semantic=semantic,
        panoptic=PanopticMap(segment_ids, segments),
    )


# ---------------------------------------------------------------------------
# PGM / PPM rasters

def write_pgm16(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.min() < 0 or arr.max() > 65535:
        raise FormatError("PGM16 values must fit in uint16")
    with open(path, "wb") as fp:
        fp.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n65535\n".encode("ascii"))
        fp.write(arr.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as fp:
        raw = fp.read()
    try:
        magic, dims, maxval, rest = raw.split(b"\n", 3)
        w, h = (int(x) for x in dims.split())
    except ValueError:
        raise FormatError(f"{path}: not a PGM file") from None
    if magic != b"P5" or int(maxval) != 65535:
        raise FormatError(f"{path}: expected 16-bit binary PGM")
    data = np.frombuffer(rest[: w * h * 2], dtype=">u2")
    if data.size != w * h:
        raise FormatError(f"{path}: truncated PGM payload")
    return data.reshape(h, w).astype(np.int32)


def write_pgm8(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    with open(path, "wb") as fp:
        fp.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fp.write(arr.astype(np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read an 8-bit binary PPM into a (3, H, W) float image in [0, 1]."""
    with open(path, "rb") as fp:
        raw = fp.read()
    try:
        magic, dims, maxval, rest = raw.split(b"\n", 3)
        w, h = (int(x) for x in dims.split())
    except ValueError:
        raise FormatError(f"{path}: not a PPM file") from None
    if magic != b"P6" or int(maxval) != 255:
        raise FormatError(f"{path}: expected 8-bit binary PPM")
    data = np.frombuffer(rest[: w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise FormatError(f"{path}: truncated PPM payload")
    return (data.reshape(h, w, 3).transpose(2, 0, 1) / 255.0).astype(np.float32)


def write_ppm(path, image: np.ndarray) -> None:
    arr = (np.clip(image, 0, 1) * 255).round().astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fp:
        fp.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fp.write(arr.tobytes())


# ---------------------------------------------------------------------------
# dataset directory format

MANIFEST_NAME = "manifest.json"
DATASET_FORMAT = "knet-dataset-v1"


@dataclass
class Dataset:
    spec: SceneSpec
    samples: list[GroundTruthSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(path.read_bytes())
    return digest.hexdigest()


def _sample_dir(root: Path, index: int) -> Path:
    return root / f"sample_{index:05d}"


def _write_sample(root: Path, index: int, sample: GroundTruthSample) -> list[Path]:
    d = _sample_dir(root, index)
    d.mkdir(parents=True, exist_ok=True)
    T.save_tensor(d / "image.tensor", sample.image)
    write_pgm16(d / "semantic.pgm", sample.semantic)
    write_pgm16(d / "panoptic.pgm", sample.panoptic.segment_ids)
    (d / "panoptic.json").write_text(json.dumps({
        "segments": [
            {"id": s.id, "class_id": s.class_id, "is_thing": s.is_thing,
             "score": s.score, "area": s.area}
            for s in sample.panoptic.segments
        ]
    }, sort_keys=True))
    h, w = sample.semantic.shape
    if sample.instances:
        stacked = np.stack([m for _, m in sample.instances]).reshape(len(sample.instances), -1)
        packed = np.packbits(stacked, axis=1)
    else:
        packed = np.zeros((0, 0), dtype=np.uint8)
    (d / "instances.bin").write_bytes(packed.tobytes())
    (d / "instances.json").write_text(json.dumps({
        "classes": [int(c) for c, _ in sample.instances],
        "shape": [h, w],
    }, sort_keys=True))
    return [d / name for name in
            ("image.tensor", "semantic.pgm", "panoptic.pgm", "panoptic.json",
             "instances.bin", "instances.json")]


def _read_sample(root: Path, index: int) -> GroundTruthSample:
    d = _sample_dir(root, index)
    image = T.load_tensor(d / "image.tensor")
    semantic = read_pgm16(d / "semantic.pgm")
    segment_ids = read_pgm16(d / "panoptic.pgm")
    pan = json.loads((d / "panoptic.json").read_text())
    segments = [
        SegmentInfo(s["id"], s["class_id"], s["is_thing"], s["score"], s["area"])
        for s in pan["segments"]
    ]
    inst_meta = json.loads((d / "instances.json").read_text())
    h, w = inst_meta["shape"]
    classes = inst_meta["classes"]
    raw = np.frombuffer((d / "instances.bin").read_bytes(), dtype=np.uint8)
    instances = []
    if classes:
        packed = raw.reshape(len(classes), -1)
        masks = np.unpackbits(packed, axis=1)[:, : h * w].astype(bool).reshape(len(classes), h, w)
        instances = [(int(c), masks[i]) for i, c in enumerate(classes)]
    return GroundTruthSample(image, instances, semantic, PanopticMap(segment_ids, segments))


def write_dataset(spec: SceneSpec, count: int, out_dir) -> None:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    checksums: dict[str, str] = {}
    for i in range(count):
        sample = generate_sample(spec, i)
        for path in _write_sample(root, i, sample):
            checksums[str(path.relative_to(root))] = _sha256(path)
    manifest = {"format": DATASET_FORMAT, "count": count,
                "spec": spec.to_dict(), "files": checksums}
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=1))


def read_dataset(in_dir) -> Dataset:
    root = Path(in_dir)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise FormatError(f"{root}: missing {MANIFEST_NAME}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise FormatError(f"{root}: unknown dataset format {manifest.get('format')!r}")
    for rel, expected in manifest["files"].items():
        actual = _sha256(root / rel)
        if actual != expected:
            raise ChecksumError(f"{rel}: checksum mismatch (corrupt file?)")
    spec = SceneSpec.from_dict(manifest["spec"])
    samples = [_read_sample(root, i) for i in range(manifest["count"])]
    return Dataset(spec, samples)


def generate_dataset(spec: SceneSpec, count: int) -> Dataset:
    return Dataset(spec, [generate_sample(spec, i) for i in range(count)])
