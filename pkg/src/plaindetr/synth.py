"""Procedural rectangle-detection data.

Each sample is a grayscale image of axis-aligned filled rectangles whose fill
intensity encodes the class. A sample depends only on ``(seed, index)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .geometry import Box

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def sample_seed(seed: int, index: int) -> int:
    return splitmix64(splitmix64(seed & _MASK64) ^ (index & _MASK64))


@dataclass
class SyntheticSpec:
    image_size: int = 64
    min_objects: int = 2
    max_objects: int = 8
    min_size: float = 0.12
    max_size: float = 0.45
    num_classes: int = 3
    noise: float = 0.05
    max_iou: float = 0.3
    max_cover: float = 0.5
    seed: int = 0
    max_attempts: int = 1000

    def __post_init__(self):
        self.validate()

    def size_range_px(self) -> tuple[int, int]:
        lo = int(round(self.min_size * self.image_size))
        hi = int(round(self.max_size * self.image_size))
        return lo, hi

    def validate(self) -> None:
        lo, hi = self.size_range_px()
        if self.image_size < 1:
            raise ConfigError("image size must be positive")
        if not 0 < self.min_size <= self.max_size:
            raise ConfigError(f"bad size range [{self.min_size}, {self.max_size}]")
        if lo < 1 or hi > self.image_size:
            raise ConfigError(f"object sizes {lo}..{hi}px do not fit a {self.image_size}px image")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError(f"bad object count range [{self.min_objects}, {self.max_objects}]")
        if self.num_classes < 1:
            raise ConfigError("need at least one class")
        if not 0 <= self.noise < 0.5:
            raise ConfigError("noise amplitude must lie in [0, 0.5)")

    def intensity(self, cls: int) -> float:
        return (cls + 1) / (self.num_classes + 1)


@dataclass
class Sample:
    index: int
    image: np.ndarray     # (S, S, 1) in [0, 1]
    classes: np.ndarray   # (G,)
    boxes: np.ndarray     # (G, 4) center-size, pixels

    @property
    def gts(self) -> list[tuple[int, Box]]:
        return [(int(c), Box(*b)) for c, b in zip(self.classes, self.boxes)]


def _overlap_ok(cand: np.ndarray, placed: list[np.ndarray], spec: SyntheticSpec) -> bool:
    x1, y1, x2, y2 = cand
    area = (x2 - x1) * (y2 - y1)
    for p in placed:
        iw = min(x2, p[2]) - max(x1, p[0])
        ih = min(y2, p[3]) - max(y1, p[1])
        if iw <= 0 or ih <= 0:
            continue
        inter = iw * ih
        other = (p[2] - p[0]) * (p[3] - p[1])
        if inter / (area + other - inter) > spec.max_iou or inter / min(area, other) > spec.max_cover:
            return False
    return True


def generate(spec: SyntheticSpec, index: int) -> Sample:
    rng = np.random.default_rng(sample_seed(spec.seed, index))
    S = spec.image_size
    lo, hi = spec.size_range_px()
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    placed: list[np.ndarray] = []
    attempts = 0
    while len(placed) < n and attempts < spec.max_attempts:
        attempts += 1
        w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        x1 = int(rng.integers(0, S - w + 1))
        y1 = int(rng.integers(0, S - h + 1))
        cand = np.array([x1, y1, x1 + w, y1 + h])
        if _overlap_ok(cand, placed, spec):
            placed.append(cand)
    classes = rng.integers(0, spec.num_classes, size=len(placed))

    img = rng.uniform(0.0, spec.noise, size=(S, S))
    for (x1, y1, x2, y2), c in zip(placed, classes):
        patch = spec.intensity(int(c)) + rng.uniform(-spec.noise, spec.noise, size=(y2 - y1, x2 - x1))
        img[y1:y2, x1:x2] = patch
    img = np.clip(img, 0.0, 1.0)

    xy = np.array(placed, dtype=np.float64).reshape(-1, 4)
    boxes = np.stack([(xy[:, 0] + xy[:, 2]) / 2, (xy[:, 1] + xy[:, 3]) / 2,
                      xy[:, 2] - xy[:, 0], xy[:, 3] - xy[:, 1]], axis=-1)
    return Sample(index, img[..., None], classes.astype(int), boxes)


def generate_batch(spec: SyntheticSpec, indices) -> list[Sample]:
    return [generate(spec, int(i)) for i in indices]


# ---------------------------------------------------------------------------
# on-disk form


def annotation_record(sample: Sample) -> dict:
    return {
        "index": sample.index,
        "gts": [[int(c)] + [float(v) for v in b] for c, b in zip(sample.classes, sample.boxes)],
    }


def export(spec: SyntheticSpec, n: int, path: str | Path, images: bool = False, start: int = 0) -> Path:
    """Write ``annotations.jsonl`` (plus optional PGMs) under ``path``."""
    from .attention import write_pgm

    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "spec.json").write_text(json.dumps(asdict(spec), indent=1, sort_keys=True) + "\n")
        ann = out / "annotations.jsonl"
        with open(ann, "w", newline="\n") as fh:
            for i in range(start, start + n):
                s = generate(spec, i)
                fh.write(json.dumps(annotation_record(s), separators=(",", ":")) + "\n")
                if images:
                    img_dir = out / "images"
                    img_dir.mkdir(exist_ok=True)
                    _write_image(img_dir / f"{i:06d}.pgm", s.image[..., 0])
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc.strerror or exc}") from exc
    return ann


def _write_image(path: Path, img: np.ndarray) -> None:
    data = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_annotations(path: str | Path) -> list[dict]:
    p = Path(path)
    if p.is_dir():
        p = p / "annotations.jsonl"
    with open(p) as fh:
        return [json.loads(line) for line in fh if line.strip()]
