"""Dataset manifests, PPM images, checkpoints and the synthetic two-view generator."""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ImageIOError, ManifestError, ParameterError
from .model import ArchConfig, NetworkParams
from .tensor import RNG_NAME, make_rng

SPLIT_STYLES = ("two-view", "single-pool")


# -- manifests ---------------------------------------------------------------


@dataclass
class ImageRecord:
    id: str
    identity: str
    view: str
    path: str


@dataclass
class DatasetManifest:
    """Labeled image list.

    On disk: optional ``# key=value`` directive lines (``split_style``,
    ``image_size`` as ``HxW``) followed by ``id<TAB>identity<TAB>view<TAB>path``
    records.  Relative paths resolve against the manifest's directory.
    """

    records: list[ImageRecord]
    split_style: str = "two-view"
    image_size: tuple[int, int] = (250, 100)
    root: Path = field(default_factory=Path)

    def validate(self):
        if self.split_style not in SPLIT_STYLES:
            raise ManifestError(f"unknown split_style {self.split_style!r}")
        seen = set()
        per_identity: dict[str, int] = {}
        for r in self.records:
            if r.id in seen:
                raise ManifestError(f"duplicate record id {r.id!r}")
            seen.add(r.id)
            if not r.identity or not r.view:
                raise ManifestError(f"record {r.id!r} has an empty identity or view")
            per_identity[r.identity] = per_identity.get(r.identity, 0) + 1
        if len(per_identity) < 2:
            raise ManifestError(f"manifest needs at least 2 identities, found {len(per_identity)}")
        for identity, n in per_identity.items():
            if n < 2:
                raise ManifestError(f"identity {identity!r} has only {n} record")
        return self

    def image_path(self, record):
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    records = []
    directives = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, value = body.split("=", 1)
                directives[key.strip()] = value.strip()
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        records.append(ImageRecord(*(p.strip() for p in parts)))
    manifest = DatasetManifest(records=records, root=path.parent)
    if "split_style" in directives:
        manifest.split_style = directives["split_style"]
    if "image_size" in directives:
        try:
            h, w = (int(v) for v in directives["image_size"].lower().split("x"))
        except ValueError as exc:
            raise ManifestError(f"{path}: bad image_size {directives['image_size']!r}") from exc
        manifest.image_size = (h, w)
    return manifest.validate()


def write_manifest(manifest: DatasetManifest, path):
    h, w = manifest.image_size
    lines = [f"# split_style={manifest.split_style}", f"# image_size={h}x{w}"]
    lines += [f"{r.id}\t{r.identity}\t{r.view}\t{r.path}" for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n")


# -- PPM images --------------------------------------------------------------


def _ppm_header(data: bytes):
    """Parse a P6 header; return (width, height, maxval, payload offset)."""
    if data[:2] != b"P6":
        raise ImageIOError(f"not a binary PPM (magic {data[:2]!r})")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageIOError("truncated or malformed PPM header")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ImageIOError("truncated or malformed PPM header")
    width, height, maxval = fields
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise ImageIOError(f"unsupported PPM geometry {width}x{height} maxval {maxval}")
    return width, height, maxval, pos + 1


def read_ppm(path) -> np.ndarray:
    """8-bit P6 file as a ``[3, H, W]`` float array in [0, 1]."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ImageIOError(f"cannot read {path}: {exc}") from exc
    width, height, maxval, offset = _ppm_header(data)
    n = width * height * 3
    payload = data[offset : offset + n]
    if len(payload) != n:
        raise ImageIOError(f"{path}: truncated pixel data ({len(payload)} of {n} bytes)")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / maxval


def write_ppm(path, image):
    """Quantize a ``[3, H, W]`` array in [0, 1] to 8 bits and write it as P6."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ImageIOError(f"expected a [3, H, W] image, got {img.shape}")
    pixels = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    _, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())


def resize_bilinear(image, height, width):
    """Bilinear resampling with half-pixel centers and edge clamping."""
    img = np.asarray(image, dtype=np.float64)
    _, h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, height)
    x0, x1, fx = axis(w, width)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bottom = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def load_image(path, size=None) -> np.ndarray:
    img = read_ppm(path)
    if size is not None and tuple(img.shape[1:]) != tuple(size):
        img = resize_bilinear(img, *size)
    return img


# -- in-memory datasets ------------------------------------------------------


@dataclass
class Dataset:
    """Decoded images plus integer-coded identity and view labels."""

    images: np.ndarray  # [N, 3, H, W]
    labels: np.ndarray  # [N] identity codes
    views: np.ndarray  # [N] view codes
    ids: list[str]
    identities: list[str]  # code -> identity name
    split_style: str = "two-view"

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        indices = np.asarray(indices)
        return Dataset(
            self.images[indices], self.labels[indices], self.views[indices],
            [self.ids[i] for i in indices], self.identities, self.split_style,
        )


def dataset_from_arrays(images, identities, views, ids=None, split_style="two-view") -> Dataset:
    names = sorted(set(identities))
    code = {n: i for i, n in enumerate(names)}
    view_names = sorted(set(views))
    vcode = {v: i for i, v in enumerate(view_names)}
    ids = ids if ids is not None else [f"img{i:05d}" for i in range(len(identities))]
    return Dataset(
        images=np.asarray(images, dtype=np.float64),
        labels=np.array([code[n] for n in identities], dtype=np.int64),
        views=np.array([vcode[v] for v in views], dtype=np.int64),
        ids=list(ids),
        identities=names,
        split_style=split_style,
    )


def load_dataset(manifest) -> Dataset:
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    images = np.stack([load_image(manifest.image_path(r), manifest.image_size) for r in manifest.records])
    return dataset_from_arrays(
        images,
        [r.identity for r in manifest.records],
        [r.view for r in manifest.records],
        [r.id for r in manifest.records],
        manifest.split_style,
    )


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"DARICKPT"
CHECKPOINT_VERSION = 1
# layout (little-endian): magic | u32 version | u32 header_len | header json
#   | per tensor: u16 name_len, name, u8 ndim, u32 dims..., f64 data | u32 crc32


def save_checkpoint(params: NetworkParams, path, iteration=0, extra=None):
    """Write atomically (temp file + rename) so a crash never leaves a partial file."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": params.arch.to_dict(),
        "config_digest": params.arch.digest(),
        "rng": RNG_NAME,
        "iteration": int(iteration),
        "tensors": list(params.tensors),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
    for name, t in params.items():
        encoded = name.encode()
        chunks.append(struct.pack("<HB", len(encoded), t.ndim) + encoded)
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    body = b"".join(chunks)
    body += struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(body)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, arch: ArchConfig | None = None):
    """Return ``(params, header)``.

    When ``arch`` is given, the stored tensors must match its shapes.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(data) < 20:
        raise CheckpointError("corrupt payload: file truncated")
    version, header_len = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"version mismatch: file has {version}, expected {CHECKPOINT_VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("corrupt payload: checksum mismatch or truncated file")
    pos = 16
    header = json.loads(body[pos : pos + header_len])
    pos += header_len
    stored_arch = ArchConfig(**header["architecture"])
    if stored_arch.digest() != header["config_digest"]:
        raise CheckpointError("architecture config digest mismatch")
    tensors = {}
    try:
        for _ in header["tensors"]:
            name_len, ndim = struct.unpack_from("<HB", body, pos)
            pos += 3
            name = body[pos : pos + name_len].decode()
            pos += name_len
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            count = int(np.prod(shape))
            tensors[name] = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"corrupt payload: {exc}") from exc
    if pos != len(body):
        raise CheckpointError("corrupt payload: trailing bytes")
    target = arch or stored_arch
    expected = target.param_shapes()
    for name, shape in expected.items():
        if name not in tensors or tensors[name].shape != shape:
            got = tensors[name].shape if name in tensors else None
            raise CheckpointError(f"shape mismatch for {name}: checkpoint has {got}, architecture expects {shape}")
    if set(tensors) != set(expected):
        raise CheckpointError(f"shape mismatch: unexpected tensors {sorted(set(tensors) - set(expected))}")
    return NetworkParams(target, tensors), header


# -- synthetic two-view identities -------------------------------------------


@dataclass
class SynthConfig:
    """Synthetic pedestrian-like identities seen from two camera views.

    Each identity is a seeded layout of colored regions (head, upper and
    lower body, stripes, a carried item) over a per-image random background
    whose weight is ``clutter``.  Every image is translated by up to
    ``pose_jitter`` pixels.  The second view additionally applies a global
    brightness shift, a per-channel gain and up to ``jitter`` pixels of extra
    translation.  Finally i.i.d. Gaussian noise is added and pixels are
    clamped to [0, 1].
    """

    num_identities: int = 20
    held_out_identities: int = 0
    images_per_view: int = 3
    height: int = 250
    width: int = 100
    brightness_shift: float = 0.15
    channel_gain: float = 0.25
    jitter: int = 6
    pose_jitter: int = 4
    clutter: float = 1.0
    noise_std: float = 0.05
    seed: int = 0

    def validate(self):
        if self.num_identities < 1 or self.images_per_view < 1 or self.height < 1 or self.width < 1:
            raise ParameterError("synth counts and sizes must be >= 1")
        if self.held_out_identities < 0 or self.jitter < 0 or self.pose_jitter < 0:
            raise ParameterError("held_out_identities and jitter amounts must be >= 0")
        if self.noise_std < 0 or not 0 <= self.clutter <= 1:
            raise ParameterError("noise_std must be >= 0 and clutter within [0, 1]")
        return self


def _identity_pattern(rng, h, w):
    """Foreground colors and a coverage mask for one identity."""
    fg = np.zeros((3, h, w))
    mask = np.zeros((h, w), dtype=bool)

    def paint(rows, cols, color):
        fg[:, rows, cols] = color[:, None, None]
        mask[rows, cols] = True

    head_end = int(0.18 * h)
    waist = int(rng.uniform(0.45, 0.6) * h)
    left, right = int(0.2 * w), int(0.8 * w)
    paint(slice(int(0.04 * h), head_end), slice(int(0.38 * w), int(0.62 * w)), rng.uniform(0.3, 0.9, size=3))
    paint(slice(head_end, waist), slice(left, right), rng.uniform(0, 1, size=3))
    paint(slice(waist, int(0.96 * h)), slice(int(0.25 * w), int(0.75 * w)), rng.uniform(0, 1, size=3))
    n_stripes = int(rng.integers(0, 4))
    if n_stripes:
        color = rng.uniform(0, 1, size=3)
        period = max(1, (waist - head_end) // (2 * n_stripes))
        for k in range(n_stripes):
            top = head_end + (2 * k + 1) * period
            paint(slice(top, min(top + period, waist)), slice(left, right), color)
    if rng.random() < 0.5:
        bw, bh = max(1, int(0.18 * w)), max(1, int(0.16 * h))
        x0 = left - bw // 2 if rng.random() < 0.5 else right - bw // 2
        y0 = int(rng.uniform(0.35, 0.6) * h)
        paint(slice(y0, y0 + bh), slice(max(0, x0), x0 + bw), rng.uniform(0, 1, size=3))
    return fg, mask


def _shift(img, dy, dx):
    """Translate with edge replication."""
    _, h, w = img.shape
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[:, rows][:, :, cols]


def _offset(rng, amount):
    if not amount:
        return 0, 0
    dy, dx = rng.integers(-amount, amount + 1, size=2)
    return int(dy), int(dx)


def synth_generate(config: SynthConfig):
    """Return ``(manifest, images, heldout_manifest, heldout_images)``.

    Manifest paths are ``images/<id>.ppm``; nothing is written to disk here.
    The held-out identities come from the same generator and are disjoint
    from the training identities.
    """
    config.validate()
    rng = make_rng(config.seed)
    h, w = config.height, config.width
    total = config.num_identities + config.held_out_identities
    groups = ([], []), ([], [])
    for ident in range(total):
        name = f"p{ident:04d}"
        fg, mask = _identity_pattern(rng, h, w)
        identity_bg = rng.uniform(0, 1, size=3)
        brightness = rng.uniform(-1, 1) * config.brightness_shift
        gain = 1.0 + rng.uniform(-1, 1, size=3) * config.channel_gain
        records, images = groups[0] if ident < config.num_identities else groups[1]
        for view in ("a", "b"):
            for k in range(config.images_per_view):
                bg = (1 - config.clutter) * identity_bg + config.clutter * rng.uniform(0, 1, size=3)
                img = np.where(mask, fg, bg[:, None, None])
                dy, dx = _offset(rng, config.pose_jitter)
                if view == "b":
                    img = img * gain[:, None, None] + brightness
                    ey, ex = _offset(rng, config.jitter)
                    dy, dx = dy + ey, dx + ex
                if dy or dx:
                    img = _shift(img, dy, dx)
                if config.noise_std > 0:
                    img = img + rng.normal(0.0, config.noise_std, size=img.shape)
                img = np.clip(img, 0.0, 1.0)
                rid = f"{name}_{view}{k}"
                records.append(ImageRecord(rid, name, view, f"images/{rid}.ppm"))
                images.append(img)
    out = []
    for records, images in groups:
        manifest = DatasetManifest(records, "two-view", (h, w))
        out += [manifest, np.stack(images) if images else np.empty((0, 3, h, w))]
    out[0].validate()
    if config.held_out_identities:
        out[2].validate()
    return tuple(out)


def write_synth(config: SynthConfig, out_dir):
    """Write ``manifest.tsv`` (and ``heldout.tsv``) plus PPMs; return the manifests."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest, images, heldout, heldout_images = synth_generate(config)
    written = []
    for m, imgs, fname in ((manifest, images, "manifest.tsv"), (heldout, heldout_images, "heldout.tsv")):
        if not m.records:
            continue
        for r, img in zip(m.records, imgs):
            write_ppm(out_dir / r.path, img)
        write_manifest(m, out_dir / fname)
        m.root = out_dir
        written.append(m)
    return written
