"""Synthetic detection scenes: few small shapes on cluttered backgrounds.

Scenes are built so background dominates: most anchors are easy negatives,
a minority of clutter blobs are object-colored hard negatives, and each
image carries only a handful of labeled shapes. Generation is a pure
function of the spec seed (per-image seed = mix_seed(seed, index)), which
several reproducibility tests rely on.

Disk format: binary PPM (P6, maxval 255) per image plus one line per image
in ``annotations.txt``: the filename followed by ``class_id x1 y1 x2 y2``
per object, floats printed at 6 decimals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box, iou
from .rng import Rng, mix_seed

SHAPE_KINDS = ("disc", "square", "triangle")

# base RGB per shape kind; instances jitter around these
_SHAPE_COLOR = {
    "disc": (0.78, 0.28, 0.25),
    "square": (0.24, 0.68, 0.30),
    "triangle": (0.26, 0.36, 0.80),
}

ANNOTATION_FILE = "annotations.txt"


class AnnotationError(ValueError):
    pass


@dataclass
class SceneSpec:
    image_size: int = 96
    num_images: int = 200
    classes: tuple = SHAPE_KINDS
    objects_per_image: tuple = (1, 2)
    object_size: tuple = (12, 30)
    clutter_density: float = 1.2  # distractor blobs per 1000 px^2
    noise_std: float = 0.02
    seed: int = 7

    def validate(self) -> None:
        if self.image_size < 16:
            raise ValueError(f"image_size too small: {self.image_size}")
        if self.num_images < 0:
            raise ValueError("num_images must be nonnegative")
        if not self.classes:
            raise ValueError("classes must be nonempty")
        for kind in self.classes:
            if kind not in SHAPE_KINDS:
                raise ValueError(f"unknown shape kind {kind!r}, expected one of {SHAPE_KINDS}")
        lo, hi = self.objects_per_image
        if not (0 <= lo <= hi):
            raise ValueError(f"bad objects_per_image range {self.objects_per_image}")
        slo, shi = self.object_size
        if not (2 <= slo <= shi):
            raise ValueError(f"bad object_size range {self.object_size}")
        if shi >= self.image_size:
            raise ValueError(
                f"object_size max {shi} must be smaller than image_size {self.image_size}"
            )
        if self.clutter_density < 0 or self.noise_std < 0:
            raise ValueError("clutter_density and noise_std must be nonnegative")


@dataclass
class SceneRecord:
    image: np.ndarray  # [3, H, W] float64 in [0, 1]
    gts: list = field(default_factory=list)  # [(Box, class_id)], class_id in [1, C]


def _pixel_grid(size: int):
    ys, xs = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    return xs, ys


def _shape_alpha(kind: str, cx: float, cy: float, size: float, xs, ys) -> np.ndarray:
    """Anti-aliased coverage from a signed distance to the shape edge."""
    if kind == "disc":
        d = np.hypot(xs - cx, ys - cy) - 0.5 * size
    elif kind == "square":
        d = np.maximum(np.abs(xs - cx), np.abs(ys - cy)) - 0.5 * size
    elif kind == "triangle":
        # isoceles, apex up, inscribed in a size x size box
        half = 0.5 * size
        verts = [(cx, cy - half), (cx - half, cy + half), (cx + half, cy + half)]
        d = None
        for (ax, ay), (bx, by) in zip(verts, verts[1:] + verts[:1]):
            # outward edge normal for this vertex winding in image coords
            # (y down); inside points get negative distance on every edge
            nx, ny = ay - by, bx - ax
            norm = math.hypot(nx, ny)
            edge = ((xs - ax) * nx + (ys - ay) * ny) / norm
            d = edge if d is None else np.maximum(d, edge)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return np.clip(0.5 - d, 0.0, 1.0)


def _composite(image: np.ndarray, alpha: np.ndarray, color) -> None:
    for ch in range(3):
        image[ch] = image[ch] * (1.0 - alpha) + color[ch] * alpha


def _render_scene(spec: SceneSpec, rng: Rng) -> SceneRecord:
    size = spec.image_size
    xs, ys = _pixel_grid(size)
    image = np.empty((3, size, size), dtype=np.float64)

    # low-contrast gradient background
    base = [rng.uniform_in(0.32, 0.48) for _ in range(3)]
    angle = rng.uniform_in(0.0, 2.0 * math.pi)
    amp = rng.uniform_in(0.02, 0.10)
    ramp = (np.cos(angle) * xs + np.sin(angle) * ys) / size
    for ch in range(3):
        image[ch] = base[ch] + amp * ramp

    # distractor blobs; a fraction borrow object hues at low contrast
    n_blobs = int(round(spec.clutter_density * size * size / 1000.0))
    for _ in range(n_blobs):
        bx = rng.uniform_in(0.0, size)
        by = rng.uniform_in(0.0, size)
        br = rng.uniform_in(2.0, 9.0)
        if rng.uniform() < 0.35:
            hue = _SHAPE_COLOR[spec.classes[rng.randint(len(spec.classes))]]
            mixw = rng.uniform_in(0.25, 0.55)
            color = [base[ch] * (1 - mixw) + hue[ch] * mixw for ch in range(3)]
        else:
            color = [min(max(base[ch] + rng.uniform_in(-0.18, 0.18), 0.0), 1.0) for ch in range(3)]
        alpha = _shape_alpha("disc", bx, by, 2 * br, xs, ys)
        _composite(image, alpha, color)

    # labeled shapes, kept fully inside the image
    gts = []
    n_objects = rng.randint_in(*spec.objects_per_image)
    for _ in range(n_objects):
        kind_idx = rng.randint(len(spec.classes))
        kind = spec.classes[kind_idx]
        obj = rng.uniform_in(*spec.object_size)
        half = 0.5 * obj
        box = None
        for _attempt in range(10):
            cx = rng.uniform_in(half + 1.0, size - half - 1.0)
            cy = rng.uniform_in(half + 1.0, size - half - 1.0)
            candidate = Box(cx - half, cy - half, cx + half, cy + half)
            if all(iou(candidate, existing) <= 0.3 for existing, _ in gts):
                box = (cx, cy, candidate)
                break
        if box is None:
            box = (cx, cy, candidate)  # crowded scene: accept the overlap
        cx, cy, candidate = box
        hue = _SHAPE_COLOR[kind]
        color = [min(max(hue[ch] + rng.uniform_in(-0.08, 0.08), 0.0), 1.0) for ch in range(3)]
        _composite(image, _shape_alpha(kind, cx, cy, obj, xs, ys), color)
        gts.append((candidate, kind_idx + 1))

    if spec.noise_std > 0:
        noise = np.array(rng.normals(size * size, 0.0, spec.noise_std)).reshape(size, size)
        image += noise[None, :, :]

    np.clip(image, 0.0, 1.0, out=image)
    return SceneRecord(image=image, gts=gts)


def generate_dataset(spec: SceneSpec) -> list:
    """Render ``spec.num_images`` scenes deterministically from the seed."""
    spec.validate()
    records = []
    for index in range(spec.num_images):
        rng = Rng(mix_seed(spec.seed, index))
        records.append(_render_scene(spec, rng))
    return records


# ---------------------------------------------------------------------------
# disk formats


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM, P6 with maxval 255; image is [3, H, W] in [0, 1]."""
    _, h, w = image.shape
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise AnnotationError(f"missing image file: {path}")
    data = path.read_bytes()
    if not data.startswith(b"P6"):
        raise AnnotationError(f"{path}: not a binary P6 PPM")
    fields_needed = 3
    pos = 2
    header_fields = []
    while fields_needed and pos < len(data):
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        header_fields.append(data[start:pos])
        fields_needed -= 1
    if len(header_fields) != 3:
        raise AnnotationError(f"{path}: truncated PPM header")
    try:
        w, h, maxval = (int(f) for f in header_fields)
    except ValueError as exc:
        raise AnnotationError(f"{path}: bad PPM header field") from exc
    if maxval != 255:
        raise AnnotationError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    if pixels.size != w * h * 3:
        raise AnnotationError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_annotations(records, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, record in enumerate(records):
        name = f"img_{i:05d}.ppm"
        write_ppm(directory / name, record.image)
        parts = [name]
        for box, class_id in record.gts:
            parts.append(
                f"{class_id} {box.x1:.6f} {box.y1:.6f} {box.x2:.6f} {box.y2:.6f}"
            )
        lines.append(" ".join(parts))
    (directory / ANNOTATION_FILE).write_text("".join(line + "\n" for line in lines))


def read_annotations(directory) -> list:
    directory = Path(directory)
    ann_path = directory / ANNOTATION_FILE
    if not ann_path.exists():
        raise AnnotationError(f"missing annotation file: {ann_path}")
    records = []
    for lineno, line in enumerate(ann_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) % 5 != 1:
            raise AnnotationError(
                f"{ann_path}:{lineno}: expected filename plus groups of 5 fields, "
                f"got {len(tokens)} tokens"
            )
        image = read_ppm(directory / tokens[0])
        gts = []
        for g in range(1, len(tokens), 5):
            try:
                class_id = int(tokens[g])
                coords = [float(t) for t in tokens[g + 1 : g + 5]]
            except ValueError as exc:
                raise AnnotationError(f"{ann_path}:{lineno}: malformed object fields") from exc
            gts.append((Box(*coords), class_id))
        records.append(SceneRecord(image=image, gts=gts))
    return records
