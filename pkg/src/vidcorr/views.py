"""Input manufacturing: clip sampling, multi-crop augmentation, frame
pairing, blockwise token masks, and the on-disk video store.

Every random choice draws from a named rng substream, so crop geometry,
flips, and color jitter are independent streams: disabling jitter for
one crop family cannot shift any other family's draws.
"""

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vidcorr.numerics import bilinear_resize

log = logging.getLogger(__name__)

FLIP_PROBABILITY = 0.5
CROP_ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)
BLOCK_ASPECT_RANGE = (1.0 / 3.0, 3.0)
MAX_CROP_RETRIES = 10

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class ViewConfig:
    """Clip length, crop families, and augmentation strengths.

    The full-scale sizes are 224 (global) and 64 (local); the desk
    defaults shrink both. Scale ranges follow the ablation wording:
    small areas feed the local crops, large areas the globals.
    """

    clip_len: int = 4
    locals_per_frame: int = 8
    local_scale: tuple = (0.05, 0.8)
    global_scale: tuple = (0.8, 0.95)
    global_size: int = 64
    local_size: int = 32
    flip_jitter_target: str = "locals"  # locals | globals | both | none
    frameskip: int = 8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2

    def __post_init__(self):
        if self.clip_len < 2 or self.clip_len % 2:
            raise ValueError(f"clip_len must be even and >= 2, got {self.clip_len}")
        if self.locals_per_frame < 1:
            raise ValueError("need at least one local crop per frame")
        for name, rng_pair in (("local_scale", self.local_scale),
                               ("global_scale", self.global_scale)):
            lo, hi = rng_pair
            # equality admits the degenerate full-frame configuration
            if not (0.0 < lo <= hi <= 1.0):
                raise ValueError(f"{name} must satisfy 0 < lo <= hi <= 1, got {rng_pair}")
        if self.flip_jitter_target not in ("locals", "globals", "both", "none"):
            raise ValueError(f"unknown flip_jitter_target {self.flip_jitter_target!r}")
        if self.frameskip < 1:
            raise ValueError("frameskip must be >= 1")


@dataclass
class VideoClip:
    """L consecutive (strided) frames from one source video."""

    frames: list  # L arrays (H, W, 3) in [0, 1]
    source_id: str
    frame_indices: list

    def __post_init__(self):
        n = len(self.frames)
        if n < 2 or n % 2:
            raise ValueError(f"clip length must be even and >= 2, got {n}")


@dataclass
class CropRecord:
    """One crop with everything needed to replay it bit-exactly."""

    image: np.ndarray  # (size, size, 3) in [0, 1]
    rect: tuple  # (y, x, h, w) in source-frame pixels
    flipped: bool
    jitter: tuple or None  # (brightness, contrast, saturation) factors


@dataclass
class CropSet:
    """Per clip: one global crop per frame plus M locals per frame."""

    globals_: list  # L CropRecords
    locals_: list  # L lists of M CropRecords


@dataclass
class MaskPattern:
    """Blockwise token mask over a square token grid."""

    m: np.ndarray  # flat boolean, row-major over the grid
    ratio: float
    count: int


def make_frame_pairs(clip_len):
    """Zip the clip's halves: 0-based pairs (n, L/2 + n).

    For L=6 that reads [(0, 3), (1, 4), (2, 5)]; every frame of the
    first half meets its offset partner in the second.
    """
    if clip_len < 2 or clip_len % 2:
        raise ValueError(f"clip length must be even and >= 2, got {clip_len}")
    half = clip_len // 2
    return [(n, half + n) for n in range(half)]


def sample_clip(source, rng, config):
    """Pick a uniformly random start and take clip_len frames spaced by
    the frameskip. ``source`` is any sequence of (H, W, 3) frames."""
    needed = (config.clip_len - 1) * config.frameskip + 1
    n = len(source)
    if n < needed:
        raise ValueError(f"video of {n} frames too short for clip span {needed}")
    start = int(rng.integers(0, n - needed + 1))
    indices = [start + i * config.frameskip for i in range(config.clip_len)]
    frames = [np.asarray(source[i]) for i in indices]
    source_id = getattr(source, "source_id", "")
    return VideoClip(frames, source_id, indices)


# -- crops ---------------------------------------------------------------------


def _draw_rect(frame_shape, scale_range, rng):
    """Random resized-crop rectangle: area fraction from scale_range,
    aspect from CROP_ASPECT_RANGE, bounded retries, center fallback."""
    height, width = frame_shape[:2]
    area = height * width
    for _ in range(MAX_CROP_RETRIES):
        frac = rng.uniform(scale_range[0], scale_range[1])
        aspect = rng.uniform(*CROP_ASPECT_RANGE)
        target = frac * area
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 1 <= w <= width and 1 <= h <= height:
            y = int(rng.integers(0, height - h + 1))
            x = int(rng.integers(0, width - w + 1))
            return (y, x, h, w)
    # center crop at the nearest feasible scale
    frac = min(scale_range[1], 1.0)
    side = int(round(math.sqrt(frac * area)))
    h = min(max(side, 1), height)
    w = min(max(side, 1), width)
    log.warning("crop rectangle infeasible after %d retries; using %dx%d center crop",
                MAX_CROP_RETRIES, h, w)
    return ((height - h) // 2, (width - w) // 2, h, w)


def _apply_jitter(image, factors):
    b, c, s = factors
    out = image * b
    mean = out.mean()
    out = mean + (out - mean) * c
    gray = out @ _LUMA
    out = gray[:, :, None] + (out - gray[:, :, None]) * s
    return np.clip(out, 0.0, 1.0)


def _render_crop(frame, rect, size, flipped, jitter):
    y, x, h, w = rect
    patch = frame[y:y + h, x:x + w, :]
    out = bilinear_resize(patch, (size, size))
    if flipped:
        out = out[:, ::-1, :].copy()
    if jitter is not None:
        out = _apply_jitter(out, jitter)
    return np.clip(out, 0.0, 1.0)


def _make_one(frame, rng, scale_range, size, augment, config):
    rect = _draw_rect(frame.shape, scale_range, rng.substream("geom"))
    flipped = False
    jitter = None
    if augment:
        flipped = bool(rng.substream("flip").uniform() < FLIP_PROBABILITY)
        jr = rng.substream("jitter")
        jitter = (float(jr.uniform(1.0 - config.brightness, 1.0 + config.brightness)),
                  float(jr.uniform(1.0 - config.contrast, 1.0 + config.contrast)),
                  float(jr.uniform(1.0 - config.saturation, 1.0 + config.saturation)))
    return CropRecord(_render_crop(frame, rect, size, flipped, jitter),
                      rect, flipped, jitter)


def make_crops(clip, rng, config):
    """One global and M local crops per frame.

    Flip and color jitter touch only the families named by
    flip_jitter_target (default: locals), drawn from dedicated
    substreams so the untouched family is bitwise identical to a
    jitter-free run."""
    aug_globals = config.flip_jitter_target in ("globals", "both")
    aug_locals = config.flip_jitter_target in ("locals", "both")
    globals_ = []
    locals_ = []
    for i, frame in enumerate(clip.frames):
        frame_rng = rng.substream(f"frame{i}")
        globals_.append(_make_one(frame, frame_rng.substream("global"),
                                  config.global_scale, config.global_size,
                                  aug_globals, config))
        row = [_make_one(frame, frame_rng.substream(f"local{j}"),
                         config.local_scale, config.local_size, aug_locals, config)
               for j in range(config.locals_per_frame)]
        locals_.append(row)
    return CropSet(globals_, locals_)


def replay_crop(frame, record, size):
    """Re-render a crop from its recorded geometry; bitwise equal to the
    original."""
    return _render_crop(frame, record.rect, size, record.flipped, record.jitter)


# -- masks ---------------------------------------------------------------------


def _place_blocks(grid_side, count, rng):
    """Union of random rectangles with exactly ``count`` cells set; the
    final block is trimmed in row-major order to land on K."""
    mask = np.zeros((grid_side, grid_side), dtype=bool)
    done = 0
    while done < count:
        area = int(rng.integers(1, count - done + 1))
        aspect = rng.uniform(*BLOCK_ASPECT_RANGE)
        bh = min(max(int(round(math.sqrt(area * aspect))), 1), grid_side)
        bw = min(max(int(round(math.sqrt(area / aspect))), 1), grid_side)
        y = int(rng.integers(0, grid_side - bh + 1))
        x = int(rng.integers(0, grid_side - bw + 1))
        for yy in range(y, y + bh):
            for xx in range(x, x + bw):
                if done == count:
                    break
                if not mask[yy, xx]:
                    mask[yy, xx] = True
                    done += 1
        # a block landing entirely on set cells makes no progress; loop again
    return mask.reshape(-1)


def sample_mask(num_tokens, rng, gate_probability=0.5, r_range=(0.1, 0.5)):
    """Blockwise mask over a square token grid, or None.

    With probability 1 - gate_probability no mask is drawn and the
    masked-token losses are skipped for the iteration. Otherwise the
    ratio r is uniform in r_range and exactly K = round(num_tokens * r)
    cells are set."""
    side = math.isqrt(num_tokens)
    if side * side != num_tokens:
        raise ValueError(f"token count {num_tokens} is not a square grid")
    if rng.substream("gate").uniform() >= gate_probability:
        return None
    ratio = float(rng.substream("ratio").uniform(r_range[0], r_range[1]))
    count = int(round(num_tokens * ratio))
    if count == 0:
        return MaskPattern(np.zeros(num_tokens, dtype=bool), ratio, 0)
    m = _place_blocks(side, count, rng.substream("blocks"))
    return MaskPattern(m, ratio, count)


def sample_clip_masks(num_tokens, clip_len, rng, gate_probability=0.5,
                      r_range=(0.1, 0.5)):
    """Per-frame mask patterns sharing one gate and one ratio draw.

    The gate applies to the whole iteration (all frames or none) and the
    shared r keeps K equal across frames, as the cross-frame affinity
    consistency requires equal token counts. Patterns themselves are
    drawn independently per frame. Returns None when the gate is off."""
    side = math.isqrt(num_tokens)
    if side * side != num_tokens:
        raise ValueError(f"token count {num_tokens} is not a square grid")
    if rng.substream("gate").uniform() >= gate_probability:
        return None
    ratio = float(rng.substream("ratio").uniform(r_range[0], r_range[1]))
    count = int(round(num_tokens * ratio))
    if count == 0:
        return None
    return [MaskPattern(_place_blocks(side, count, rng.substream(f"pattern{i}")),
                        ratio, count)
            for i in range(clip_len)]


# -- pnm i/o and the video store -------------------------------------------------


def write_ppm(path, image):
    """Binary P6, maxval 255; image float in [0, 1], (H, W, 3)."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def write_pgm(path, mask):
    """Binary P5; pixel value = object id, 0 = background."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d mask, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("object ids must fit a byte")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(arr.astype(np.uint8).tobytes())


def _read_pnm(path, magic, channels):
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(magic):
        raise ValueError(f"{path}: expected {magic.decode()} file")
    # header: magic, width, height, maxval; # comments allowed
    tokens = []
    pos = 2
    while len(tokens) < 3:
        match = re.match(rb"\s*(#[^\n]*\n|\S+)", raw[pos:])
        if match is None:
            raise ValueError(f"{path}: truncated header")
        tok = match.group(1)
        pos += match.end()
        if not tok.startswith(b"#"):
            tokens.append(int(tok))
    width, height, maxval = tokens
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    data = np.frombuffer(raw, dtype=np.uint8, count=width * height * channels, offset=pos)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return data.reshape(shape)


def read_ppm(path):
    """(H, W, 3) float32 in [0, 1]."""
    return _read_pnm(path, b"P6", 3).astype(np.float32) / 255.0


def read_pgm(path):
    """(H, W) int32 object ids."""
    return _read_pnm(path, b"P5", 1).astype(np.int32)


class VideoSource:
    """Lazy frame access for one video directory."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.source_id = self.directory.name
        self.frame_paths = sorted(self.directory.glob("frame_*.ppm"))
        self.mask_paths = sorted(self.directory.glob("mask_*.pgm"))
        if not self.frame_paths:
            raise ValueError(f"no frames under {self.directory}")

    def __len__(self):
        return len(self.frame_paths)

    def __getitem__(self, i):
        return read_ppm(self.frame_paths[i])

    @property
    def has_masks(self):
        return bool(self.mask_paths)

    def mask(self, i):
        return read_pgm(self.mask_paths[i])


def write_video_dir(root, name, frames, masks=None):
    """Store frames (and optional masks) as frame_%05d.ppm / mask_%05d.pgm."""
    directory = Path(root) / name
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        write_ppm(directory / f"frame_{i:05d}.ppm", frame)
    if masks is not None:
        for i, mask in enumerate(masks):
            write_pgm(directory / f"mask_{i:05d}.pgm", mask)
    return directory


def write_index(root, names):
    Path(root, "videos.txt").write_text("".join(f"{n}\n" for n in names))


def load_store(root):
    """All videos listed in videos.txt, in index order."""
    root = Path(root)
    index = root / "videos.txt"
    if not index.exists():
        raise FileNotFoundError(f"missing index {index}")
    names = [line.strip() for line in index.read_text().splitlines() if line.strip()]
    return [VideoSource(root / name) for name in names]
