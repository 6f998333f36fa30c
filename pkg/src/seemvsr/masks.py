"""Per-frame object-mask stacks: normalisation, providers, synthetic scenes
and the binary ``SEEMMASK`` archive."""

import base64
import io
import json
import struct
import subprocess
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

MAGIC = b"SEEMMASK"
VERSION = 1
_HEADER = struct.Struct("<8sHHIII")


class MaskError(Exception):
    pass


class ExtentMismatchError(MaskError, ValueError):
    pass


class ArchiveFormatError(MaskError):
    pass


class ArchiveCorruptError(MaskError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ProviderError(MaskError):
    def __init__(self, message, frame_index=None):
        super().__init__(f"frame {frame_index}: {message}")
        self.frame_index = frame_index


class MaskDecodeError(MaskError):
    pass


@dataclass(frozen=True)
class GridPromptSpec:
    """``grid_size`` x ``grid_size`` prompt points, one at each cell centre."""

    grid_size: int = 8
    height: int = 64
    width: int = 64

    def __post_init__(self):
        if self.grid_size < 1:
            raise ValueError("grid_size must be >= 1")

    def points(self):
        """(row, col) pixel coordinates, row-major over the grid."""
        n = self.grid_size
        return [((i + 0.5) * self.height / n, (j + 0.5) * self.width / n)
                for i in range(n) for j in range(n)]


@dataclass(frozen=True)
class NormalizeDiagnostics:
    dropped_empty: int = 0
    merged_duplicates: int = 0
    truncated: int = 0


@dataclass(frozen=True, eq=False)
class MaskStack:
    """Fixed-budget stack of binary planes for one frame.

    ``masks`` is a read-only (c_max, H, W) uint8 array. Planes at index
    ``>= valid_count`` are zero; valid planes are area-descending.
    """

    masks: np.ndarray
    valid_count: int
    areas: Tuple[int, ...]
    points: Optional[Tuple[Optional[Tuple[float, float]], ...]] = None
    diagnostics: NormalizeDiagnostics = field(default_factory=NormalizeDiagnostics)

    def __post_init__(self):
        m = np.ascontiguousarray(self.masks, dtype=np.uint8)
        if m.ndim != 3:
            raise ValueError(f"masks must be (C, H, W), got {m.shape}")
        if not 0 <= self.valid_count <= m.shape[0]:
            raise ValueError(f"valid_count {self.valid_count} outside [0, {m.shape[0]}]")
        if len(self.areas) != self.valid_count:
            raise ValueError("one area per valid plane required")
        m.setflags(write=False)
        object.__setattr__(self, "masks", m)
        object.__setattr__(self, "areas", tuple(int(a) for a in self.areas))

    @property
    def c_max(self):
        return self.masks.shape[0]

    @property
    def extent(self):
        return self.masks.shape[1:]

    def __eq__(self, other):
        if not isinstance(other, MaskStack):
            return NotImplemented
        return (self.valid_count == other.valid_count and self.areas == other.areas
                and self.masks.shape == other.masks.shape
                and np.array_equal(self.masks, other.masks))

    __hash__ = None

    @classmethod
    def empty(cls, c_max, height, width):
        return cls(np.zeros((c_max, height, width), np.uint8), 0, ())


def _sort_key(plane):
    flat = plane.ravel()
    area = int(flat.sum())
    first = int(np.argmax(flat)) if area else flat.size
    return (-area, first, np.packbits(flat).tobytes())


def normalize_masks(raw_masks, c_max=64, iou_threshold=0.9, points=None, extent=None):
    """Dedupe, sort, truncate and zero-pad raw binary planes.

    Planes are ordered by area (descending), ties broken by the row-major
    index of the first set pixel. A plane whose IoU with an already-kept
    (hence larger or equal) plane exceeds ``iou_threshold`` is dropped.
    Zero-area planes are dropped and counted in ``diagnostics``. ``extent``
    gives the (H, W) of the output when ``raw_masks`` is empty.
    """
    if c_max < 1:
        raise ValueError("c_max must be >= 1")
    planes = [np.asarray(p) != 0 for p in raw_masks]
    if points is not None and len(points) != len(planes):
        raise ValueError("points must align with raw_masks")
    extents = {p.shape for p in planes}
    if len(extents) > 1:
        raise ExtentMismatchError(f"mixed mask extents: {sorted(extents)}")
    if any(len(e) != 2 for e in extents):
        raise ExtentMismatchError("each mask must be a 2-D plane")

    items = [(p, None if points is None else points[i]) for i, p in enumerate(planes)]
    nonempty = [it for it in items if it[0].any()]
    dropped = len(items) - len(nonempty)
    nonempty.sort(key=lambda it: _sort_key(it[0]))

    kept, kept_points = [], []
    merged = 0
    if nonempty:
        flat = np.stack([it[0].ravel() for it in nonempty]).astype(np.float32)
        areas = flat.sum(axis=1)
        inter = flat @ flat.T
        kept_idx = []
        for i in range(len(nonempty)):
            dup = False
            for j in kept_idx:
                union = areas[i] + areas[j] - inter[i, j]
                if inter[i, j] / union > iou_threshold:
                    dup = True
                    break
            if dup:
                merged += 1
            else:
                kept_idx.append(i)
        kept = [nonempty[i][0] for i in kept_idx]
        kept_points = [nonempty[i][1] for i in kept_idx]

    truncated = max(0, len(kept) - c_max)
    kept = kept[:c_max]
    kept_points = kept_points[:c_max]
    if extents:
        h, w = next(iter(extents))
        if extent is not None and tuple(extent) != (h, w):
            raise ExtentMismatchError(f"masks are {h}x{w}, expected {tuple(extent)}")
    elif extent is not None:
        h, w = extent
    else:
        h = w = 0
    out = np.zeros((c_max, h, w), np.uint8)
    for i, p in enumerate(kept):
        out[i] = p
    return MaskStack(
        out, len(kept), tuple(int(p.sum()) for p in kept),
        points=tuple(kept_points) if points is not None else None,
        diagnostics=NormalizeDiagnostics(dropped, merged, truncated),
    )


def nearest_resize(planes, height, width):
    """Nearest-neighbour resample of (..., H, W) planes; keeps binarity."""
    planes = np.asarray(planes)
    h, w = planes.shape[-2:]
    rows = np.minimum(((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return planes[..., rows[:, None], cols[None, :]]


# ---------------------------------------------------------------- providers

def rle_encode(plane):
    """Row-major run lengths, alternating 0-runs and 1-runs, 0-run first."""
    flat = np.asarray(plane, dtype=np.uint8).ravel()
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        runs = [0] + runs
    h, w = np.shape(plane)
    return {"size": [int(h), int(w)], "counts": [int(r) for r in runs]}


def rle_decode(obj):
    try:
        h, w = (int(v) for v in obj["size"])
        counts = [int(c) for c in obj["counts"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise MaskDecodeError(f"malformed RLE record: {exc}") from exc
    if any(c < 0 for c in counts) or sum(counts) != h * w:
        raise MaskDecodeError(f"RLE counts sum to {sum(counts)}, expected {h * w}")
    values = np.arange(len(counts)) % 2
    return np.repeat(values.astype(np.uint8), counts).reshape(h, w)


def decode_response(payload):
    """Parse a JSON list of RLE masks (bytes or str) into binary planes."""
    try:
        data = json.loads(payload)
    except (ValueError, TypeError) as exc:
        raise MaskDecodeError(f"response is not JSON: {exc}") from exc
    if not isinstance(data, list):
        raise MaskDecodeError("response must be a JSON list of RLE masks")
    return [rle_decode(item) for item in data]


def encode_png(frame):
    """(3, H, W) float image in [0, 1] -> PNG bytes."""
    from PIL import Image
    arr = np.clip(np.round(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(np.transpose(arr, (1, 2, 0))).save(buf, format="PNG")
    return buf.getvalue()


class MaskProvider:
    """Source of raw mask planes for a frame."""

    def fetch(self, frame, spec, frame_index=None):
        raise NotImplementedError


class FileMaskProvider(MaskProvider):
    """Serves the valid planes of a precomputed archive."""

    def __init__(self, stacks):
        if isinstance(stacks, (str, Path)):
            stacks = load_archive(stacks)
        self.stacks = list(stacks)

    def fetch(self, frame, spec, frame_index=None):
        if frame_index is None or not 0 <= frame_index < len(self.stacks):
            raise ProviderError("no archived masks", frame_index)
        st = self.stacks[frame_index]
        return [st.masks[i].copy() for i in range(st.valid_count)]


class SyntheticMaskProvider(MaskProvider):
    """Oracle provider returning the generator's ground-truth supports,
    nearest-resampled to the extent of the frame it is asked about."""

    def __init__(self, gt_masks):
        self.gt_masks = gt_masks

    def fetch(self, frame, spec, frame_index=None):
        if frame_index is None or not 0 <= frame_index < len(self.gt_masks):
            raise ProviderError("frame outside the synthetic clip", frame_index)
        planes = np.asarray(self.gt_masks[frame_index])
        h, w = np.shape(frame)[-2:]
        if planes.shape[-2:] != (h, w):
            planes = nearest_resize(planes, h, w)
        return [p.astype(np.uint8) for p in planes]


class ServiceMaskProvider(MaskProvider):
    """HTTP segmentation endpoint.

    POSTs multipart form data with ``frame`` (PNG) and ``points`` (JSON list
    of [row, col]); expects a JSON list of RLE masks back.
    """

    def __init__(self, url, timeout=30.0):
        self.url = url
        self.timeout = timeout

    def fetch(self, frame, spec, frame_index=None):
        import requests
        files = {
            "frame": ("frame.png", encode_png(frame), "image/png"),
            "points": ("points.json", json.dumps(spec.points()), "application/json"),
        }
        try:
            resp = requests.post(self.url, files=files, timeout=self.timeout)
            resp.raise_for_status()
        except requests.RequestException as exc:
            raise ProviderError(f"service unavailable: {exc}", frame_index) from exc
        return decode_response(resp.content)


class SubprocessMaskProvider(MaskProvider):
    """Runs an external command per frame.

    The command receives ``{"frame_png": <base64>, "points": [...]}`` on stdin
    and must print the JSON RLE list on stdout.
    """

    def __init__(self, command, timeout=60.0):
        self.command = list(command)
        self.timeout = timeout

    def fetch(self, frame, spec, frame_index=None):
        request = json.dumps({
            "frame_png": base64.b64encode(encode_png(frame)).decode("ascii"),
            "points": spec.points(),
        })
        try:
            proc = subprocess.run(self.command, input=request.encode(), capture_output=True,
                                  timeout=self.timeout, check=True)
        except (OSError, subprocess.SubprocessError) as exc:
            raise ProviderError(f"command failed: {exc}", frame_index) from exc
        return decode_response(proc.stdout)


def fetch_masks(provider, frame, spec, frame_index=None):
    return provider.fetch(frame, spec, frame_index)


def fetch_clip_stacks(provider, frames, spec, c_max=64, iou_threshold=0.9, workers=1):
    """Fetch and normalise masks for every frame; results stay in frame order."""
    def one(i):
        return normalize_masks(provider.fetch(frames[i], spec, i), c_max, iou_threshold,
                               extent=np.shape(frames[i])[-2:])

    if workers <= 1:
        return [one(i) for i in range(len(frames))]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, range(len(frames))))


# ---------------------------------------------------------- synthetic scenes

def _wrap(d, period):
    return (d + period / 2) % period - period / 2


def _render(objects, background, yy, xx, h, w, f):
    """Paint frame ``f`` at sample positions (yy, xx); returns the image and
    the per-object visible support at those positions."""
    img = background(yy, xx)
    inside_all = []
    for ob in objects:
        dy = _wrap(yy - (ob["cy"] + ob["vy"] * f), h)
        dx = _wrap(xx - (ob["cx"] + ob["vx"] * f), w)
        ny, nx = dy / ob["ry"], dx / ob["rx"]
        if ob["kind"] == 0:
            inside = (np.abs(ny) <= 1) & (np.abs(nx) <= 1)
        elif ob["kind"] == 1:
            inside = ny ** 2 + nx ** 2 <= 1
        else:
            inside = (ny <= 1) & (np.abs(nx) <= (ny + 1) / 2)
        u = np.cos(ob["tex_angle"]) * dy + np.sin(ob["tex_angle"]) * dx
        stripes = np.sign(np.sin(2 * np.pi * u / ob["tex_period"]))
        tex = ob["color"][:, None, None] + ob["tex_amp"] * 0.5 * stripes
        img = np.where(inside[None], tex, img)
        for prev in inside_all:
            prev &= ~inside
        inside_all.append(inside)
    return img, inside_all


def synth_scene(seed, t=7, extent=(64, 64), n_objects=3, max_speed=2.0, supersample=4):
    """Deterministic toy video of textured shapes drifting over a static
    textured background, with the exact visible support of every object.

    Returns ``(frames, masks)``: frames (t, 3, H, W) float32 in [0, 1] and
    masks (t, n_objects, H, W) bool. Objects are painted in order, so later
    objects occlude earlier ones and the masks of one frame are disjoint.
    Masks are the supports at pixel centres. Every pixel is the mean of a
    ``supersample`` x ``supersample`` grid of point samples, like a sensor
    integrating over its area; ``supersample=1`` samples pixel centres only.
    """
    if n_objects < 1:
        warnings.warn(f"n_objects={n_objects} clamped to 1")
        n_objects = 1
    h, w = (int(v) for v in extent)
    if h < 16 or w < 16:
        warnings.warn(f"extent {h}x{w} clamped to at least 16x16")
        h, w = max(h, 16), max(w, 16)
    if t < 1:
        warnings.warn(f"t={t} clamped to 1")
        t = 1
    if supersample < 1:
        raise ValueError(f"supersample must be >= 1, got {supersample}")
    max_speed = max(0.0, float(max_speed))

    rng = np.random.default_rng(seed)
    bg_a, bg_b = rng.uniform(0.15, 0.85, 3), rng.uniform(0.15, 0.85, 3)
    bg_angle = rng.uniform(0, np.pi)
    period = rng.uniform(10, 24)

    def background(yy, xx):
        ramp = (np.cos(bg_angle) * yy / h + np.sin(bg_angle) * xx / w + 1) / 2
        weave = 0.06 * np.sin(2 * np.pi * (yy + 0.5 * xx) / period)
        return (bg_a[:, None, None] * ramp + bg_b[:, None, None] * (1 - ramp)) + weave

    side = min(h, w)
    objects = []
    for _ in range(n_objects):
        objects.append(dict(
            kind=rng.integers(0, 3),
            cy=rng.uniform(0, h), cx=rng.uniform(0, w),
            ry=rng.uniform(0.12, 0.25) * side, rx=rng.uniform(0.12, 0.25) * side,
            vy=rng.uniform(-max_speed, max_speed), vx=rng.uniform(-max_speed, max_speed),
            color=rng.uniform(0.05, 0.95, 3),
            tex_amp=rng.uniform(0.1, 0.3),
            tex_period=rng.uniform(5, 12),
            tex_angle=rng.uniform(0, np.pi),
        ))

    k = int(supersample)
    cy, cx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    sy, sx = np.meshgrid((np.arange(h * k) + 0.5) / k, (np.arange(w * k) + 0.5) / k,
                         indexing="ij")
    frames = np.empty((t, 3, h, w), np.float32)
    masks = np.zeros((t, n_objects, h, w), bool)
    for f in range(t):
        img, inside = _render(objects, background, cy, cx, h, w, f)
        masks[f] = np.stack(inside)
        if k > 1:
            img, _ = _render(objects, background, sy, sx, h, w, f)
            img = np.clip(img, 0, 1).reshape(3, h, k, w, k).mean(axis=(2, 4))
        frames[f] = np.clip(img, 0, 1)
    return frames, masks


# ------------------------------------------------------------------ archive

def _plane_bytes(h, w):
    return (h * w + 7) // 8


def save_archive(stacks, path, sidecar=False):
    """Write per-frame stacks (frame keys 0..T-1 in list order)."""
    stacks = list(stacks)
    if not stacks:
        raise ValueError("cannot save an empty archive")
    c_max = stacks[0].c_max
    h, w = stacks[0].extent
    for i, st in enumerate(stacks):
        if st.c_max != c_max or tuple(st.extent) != (h, w):
            raise ExtentMismatchError(f"frame {i} has shape {st.masks.shape}, "
                                      f"expected {(c_max, h, w)}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, c_max, h, w, len(stacks)))
        for st in stacks:
            fh.write(struct.pack("<H", st.valid_count))
            for plane in st.masks:
                fh.write(np.packbits(plane.ravel()).tobytes())
    if sidecar:
        frames = []
        for i, st in enumerate(stacks):
            pts = st.points or (None,) * st.valid_count
            frames.append({"frame": i, "masks": [
                {"area": a, "point": list(p) if p is not None else None}
                for a, p in zip(st.areas, pts)]})
        with open(str(path) + ".json", "w") as fh:
            json.dump({"version": VERSION, "c_max": c_max, "height": h, "width": w,
                       "frames": frames}, fh, indent=1)


def read_archive_header(path):
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    return _parse_header(raw)


def _parse_header(raw):
    if len(raw) < _HEADER.size:
        raise ArchiveFormatError("file shorter than the archive header")
    magic, version, c_max, h, w, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ArchiveFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ArchiveFormatError(f"unsupported archive version {version}")
    return {"version": version, "c_max": c_max, "height": h, "width": w, "frame_count": count}


def load_archive(path):
    data = Path(path).read_bytes()
    hdr = _parse_header(data)
    c_max, h, w = hdr["c_max"], hdr["height"], hdr["width"]
    pb = _plane_bytes(h, w)
    record = 2 + c_max * pb
    expected = _HEADER.size + hdr["frame_count"] * record
    if len(data) < expected:
        frame = (len(data) - _HEADER.size) // record
        raise ArchiveCorruptError(f"truncated payload in frame {frame}", len(data))
    if len(data) > expected:
        raise ArchiveCorruptError("trailing bytes after last frame", expected)
    stacks = []
    off = _HEADER.size
    for _ in range(hdr["frame_count"]):
        (valid,) = struct.unpack_from("<H", data, off)
        if valid > c_max:
            raise ArchiveCorruptError(f"valid_count {valid} exceeds c_max {c_max}", off)
        off += 2
        raw = np.frombuffer(data, np.uint8, c_max * pb, off).reshape(c_max, pb)
        planes = np.unpackbits(raw, axis=1, count=h * w).reshape(c_max, h, w)
        off += c_max * pb
        areas = tuple(int(a) for a in planes[:valid].reshape(valid, h * w).sum(axis=1))
        stacks.append(MaskStack(planes, valid, areas))
    return stacks
