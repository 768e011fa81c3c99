"""Procedural toy-image domain: flat-color shapes on a flat background.

Scenes are symbolic specs (background color plus a list of shapes) rendered
onto a 32x32 RGB canvas with hard edges and an 8-color palette, so every
ground-truth attribute is exactly recoverable from the pixels.  The corpus
file format is a small text header followed by per-record spec text and raw
little-endian float32 pixels.
"""

from __future__ import annotations

import dataclasses
import struct

import numpy as np

# The 8 corners of the RGB cube: the most separated 8-color palette.
PALETTE = (
    ("black", (0.0, 0.0, 0.0)),
    ("white", (1.0, 1.0, 1.0)),
    ("red", (1.0, 0.0, 0.0)),
    ("green", (0.0, 1.0, 0.0)),
    ("blue", (0.0, 0.0, 1.0)),
    ("yellow", (1.0, 1.0, 0.0)),
    ("cyan", (0.0, 1.0, 1.0)),
    ("magenta", (1.0, 0.0, 1.0)),
)
COLOR_NAMES = tuple(name for name, _ in PALETTE)
COLOR_RGB = {name: np.array(rgb, dtype=np.float64) for name, rgb in PALETTE}
PALETTE_ARRAY = np.array([rgb for _, rgb in PALETTE], dtype=np.float64)

KINDS = ("square", "circle", "triangle")


class SceneError(ValueError):
    """Malformed scene spec or corpus record."""


@dataclasses.dataclass(frozen=True)
class Shape:
    kind: str
    color: str
    cx: int
    cy: int
    r: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SceneError(f"unknown shape kind {self.kind!r}")
        if self.color not in COLOR_RGB:
            raise SceneError(f"unknown color {self.color!r}")
        if self.r < 1:
            raise SceneError(f"shape size must be >= 1, got {self.r}")


@dataclasses.dataclass(frozen=True)
class SceneSpec:
    background: str
    shapes: tuple

    def __post_init__(self):
        if self.background not in COLOR_RGB:
            raise SceneError(f"unknown background {self.background!r}")

    def to_text(self) -> str:
        body = ";".join(f"{s.kind},{s.color},{s.cx},{s.cy},{s.r}" for s in self.shapes)
        return f"bg={self.background}|{body}"

    @classmethod
    def from_text(cls, text: str) -> "SceneSpec":
        try:
            head, body = text.split("|", 1)
            bg = head.split("=", 1)[1]
            shapes = []
            if body:
                for part in body.split(";"):
                    kind, color, cx, cy, r = part.split(",")
                    shapes.append(Shape(kind, color, int(cx), int(cy), int(r)))
        except (ValueError, IndexError) as err:
            raise SceneError(f"malformed scene text {text!r}") from err
        return cls(bg, tuple(shapes))


@dataclasses.dataclass(frozen=True)
class SceneConfig:
    height: int = 32
    width: int = 32
    min_shapes: int = 1
    max_shapes: int = 3
    min_size: int = 2
    max_size: int = 4


def shape_mask(shape: Shape, height: int, width: int) -> np.ndarray:
    """Boolean pixel mask of one shape on an otherwise empty grid.

    square: Chebyshev ball of radius r, so (2r+1)^2 pixels.
    circle: Euclidean ball, dx^2 + dy^2 <= r^2.
    triangle: upward-pointing, apex at (cx, cy - r), base at cy + r, the
    half-width at row offset j from the apex is floor(j/2).
    """
    ys, xs = np.mgrid[0:height, 0:width]
    dx = xs - shape.cx
    dy = ys - shape.cy
    if shape.kind == "square":
        return (np.abs(dx) <= shape.r) & (np.abs(dy) <= shape.r)
    if shape.kind == "circle":
        return dx * dx + dy * dy <= shape.r * shape.r
    j = dy + shape.r  # row offset below the apex
    return (j >= 0) & (j <= 2 * shape.r) & (np.abs(dx) <= j // 2)


def render_scene(spec: SceneSpec, cfg: SceneConfig = SceneConfig()) -> np.ndarray:
    """Rasterize a spec to (H, W, 3) float64 in [0, 1].  Hard edges, no blending."""
    img = np.empty((cfg.height, cfg.width, 3), dtype=np.float64)
    img[:] = COLOR_RGB[spec.background]
    for shape in spec.shapes:
        mask = shape_mask(shape, cfg.height, cfg.width)
        img[mask] = COLOR_RGB[shape.color]
    return img


def _bbox(shape: Shape):
    return (shape.cx - shape.r, shape.cy - shape.r, shape.cx + shape.r, shape.cy + shape.r)


def _boxes_clear(a, b, margin: int = 1) -> bool:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    return (ax1 + margin < bx0 or bx1 + margin < ax0
            or ay1 + margin < by0 or by1 + margin < ay0)


def sample_scene(rng: np.random.Generator, cfg: SceneConfig = SceneConfig(),
                 count: int | None = None, colors: tuple | None = None,
                 background: str | None = None) -> SceneSpec:
    """Draw a random scene.

    Shape bounding boxes keep a 1px gap from each other and stay fully inside
    the grid, so connected components of the render match shapes one-to-one.
    ``count``, ``colors`` and ``background`` pin those choices when given.
    """
    bg = background if background is not None else COLOR_NAMES[rng.integers(len(COLOR_NAMES))]
    allowed = tuple(c for c in (colors or COLOR_NAMES) if c != bg)
    if not allowed:
        raise SceneError(f"no shape color distinct from background {bg!r}")
    want = int(count) if count is not None else int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    shapes, boxes = [], []
    for _ in range(want):
        placed = False
        for _attempt in range(200):
            r = int(rng.integers(cfg.min_size, cfg.max_size + 1))
            cx = int(rng.integers(r, cfg.width - r))
            cy = int(rng.integers(r, cfg.height - r))
            kind = KINDS[rng.integers(len(KINDS))]
            color = allowed[rng.integers(len(allowed))]
            cand = Shape(kind, color, cx, cy, r)
            box = _bbox(cand)
            if all(_boxes_clear(box, other) for other in boxes):
                shapes.append(cand)
                boxes.append(box)
                placed = True
                break
        if not placed:
            break  # grid too crowded; keep what fits
    return SceneSpec(bg, tuple(shapes))


def sample_corpus(rng: np.random.Generator, n: int,
                  cfg: SceneConfig = SceneConfig()) -> tuple:
    """n specs and their renders, stacked to (n, H, W, 3)."""
    specs = [sample_scene(rng, cfg) for _ in range(n)]
    images = np.stack([render_scene(s, cfg) for s in specs])
    return specs, images


# ---------------------------------------------------------------------------
# corpus file format

CORPUS_MAGIC = b"TOYSCENES"
CORPUS_VERSION = 1


def save_corpus(path, specs, images: np.ndarray, config_hash: str = "none") -> None:
    """Header line, count/geometry line, then per record: spec text + float32 pixels."""
    images = np.asarray(images)
    if images.ndim != 4 or len(specs) != images.shape[0]:
        raise SceneError(f"corpus shape {images.shape} does not match {len(specs)} specs")
    n, h, w, c = images.shape
    with open(path, "wb") as fh:
        fh.write(CORPUS_MAGIC + b" v%d %s\n" % (CORPUS_VERSION, config_hash.encode()))
        fh.write(b"%d %d %d %d\n" % (n, h, w, c))
        for spec, img in zip(specs, images):
            fh.write(spec.to_text().encode() + b"\n")
            fh.write(img.astype("<f4").tobytes())


def load_corpus(path) -> tuple:
    """Returns (specs, images float64 (n,H,W,C), config_hash)."""
    with open(path, "rb") as fh:
        header = fh.readline().rstrip(b"\n").split(b" ")
        if header[0] != CORPUS_MAGIC or header[1] != b"v%d" % CORPUS_VERSION:
            raise SceneError(f"bad corpus header {header!r}")
        config_hash = header[2].decode() if len(header) > 2 else "none"
        n, h, w, c = (int(x) for x in fh.readline().split())
        nbytes = h * w * c * 4
        specs, images = [], np.empty((n, h, w, c), dtype=np.float64)
        for i in range(n):
            specs.append(SceneSpec.from_text(fh.readline().rstrip(b"\n").decode()))
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise SceneError(f"truncated corpus record {i}")
            images[i] = np.frombuffer(raw, dtype="<f4").reshape(h, w, c)
    return specs, images, config_hash


# ---------------------------------------------------------------------------
# portable pixel maps (image artifact format)


def save_ppm(path, image: np.ndarray, config_hash: str = "none") -> None:
    """Write one image (H, W, 3) in [0,1] as a binary P6 portable pixel map."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise SceneError(f"ppm wants (H, W, 3), got {image.shape}")
    h, w, _ = image.shape
    px = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n")
        fh.write(b"# artok v1 %s\n" % config_hash.encode())
        fh.write(b"%d %d\n255\n" % (w, h))
        fh.write(px.tobytes())


def load_ppm(path) -> np.ndarray:
    """Read a binary P6 file back to (H, W, 3) float64 in [0,1]."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P6":
            raise SceneError("not a P6 pixel map")
        line = fh.readline()
        while line.startswith(b"#"):
            line = fh.readline()
        w, h = (int(x) for x in line.split())
        maxval = int(fh.readline())
        raw = fh.read(w * h * 3)
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float64) / maxval


def quantize_to_palette(image: np.ndarray) -> np.ndarray:
    """Index map (H, W) of the nearest palette color per pixel."""
    diff = image[..., None, :] - PALETTE_ARRAY  # (H, W, 8, 3)
    return np.argmin((diff * diff).sum(axis=-1), axis=-1)
