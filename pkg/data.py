"""Getting planar data onto the sphere and back.

Equirectangular convention: column 0 starts at longitude -pi, row 0 is the
north edge, and samples sit at pixel centres (half-integer offsets).
"""
import gzip
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from mesh import MAX_LEVEL, level_stats, mesh_at_level
from utils import DataFormatError, RngStreams

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CONTAINMENT_SLACK = 1e-12
MANIFEST_NAME = 'manifest.tsv'

# ell = 0, 1, 2 real harmonics evaluated from unit-vector coordinates
_HARMONIC_DEGREES = np.array([0, 1, 1, 1, 2, 2, 2, 2, 2])
_DEFAULT_SPECTRUM = {0: 0.25, 1: 1.0, 2: 1.0}


def _open_binary(path):
    return gzip.open(path, 'rb') if str(path).endswith('.gz') else open(path, 'rb')


def load_idx_arrays(images_path, labels_path):
    """IDX image/label files -> (N, rows, cols) floats in [0, 1] and (N,) ints."""
    with _open_binary(images_path) as handle:
        image_blob = handle.read()
    with _open_binary(labels_path) as handle:
        label_blob = handle.read()

    if len(image_blob) < 16:
        raise DataFormatError(f"{images_path}: truncated IDX header")
    magic, count, rows, cols = struct.unpack('>IIII', image_blob[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{images_path}: bad IDX magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if len(image_blob) != 16 + count * rows * cols:
        raise DataFormatError(f"{images_path}: expected {16 + count * rows * cols} bytes, found {len(image_blob)}")

    if len(label_blob) < 8:
        raise DataFormatError(f"{labels_path}: truncated IDX header")
    magic, label_count = struct.unpack('>II', label_blob[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{labels_path}: bad IDX magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(label_blob) != 8 + label_count:
        raise DataFormatError(f"{labels_path}: expected {8 + label_count} bytes, found {len(label_blob)}")
    if label_count != count:
        raise DataFormatError(f"{images_path} has {count} images but {labels_path} has {label_count} labels")

    images = np.frombuffer(image_blob, dtype=np.uint8, offset=16).reshape(count, rows, cols) / 255.0
    labels = np.frombuffer(label_blob, dtype=np.uint8, offset=8).astype(np.int64)
    logger.info("Loaded %d IDX images of %dx%d", count, rows, cols)
    return images, labels


def load_idx(images_path, labels_path):
    images, labels = load_idx_arrays(images_path, labels_path)
    return list(zip(images, labels.tolist()))


@dataclass(frozen=True)
class ProjectionSpec:
    """Square lat/lon patch of half-width ``extent`` centred on the equator."""

    lon0: float = 0.0
    lat0: float = 0.0
    extent: float = np.pi / 6.0

    def __post_init__(self):
        if not 0.0 < self.extent <= np.pi / 3.0:
            raise ValueError(f"Patch extent must be in (0, pi/3], got {self.extent}")
        if self.lat0 != 0.0:
            raise ValueError(f"Digits are placed on the equator; lat0 must be 0, got {self.lat0}")


def _wrap_angle(angle):
    return (angle + np.pi) % (2.0 * np.pi) - np.pi


def _bilinear(image, x, y, wrap_x):
    """Sample (H, W, C) at continuous pixel coordinates; centres are integers."""
    height, width = image.shape[:2]
    y = np.clip(y, 0.0, height - 1)
    y0 = np.floor(y).astype(np.int64)
    y1 = np.minimum(y0 + 1, height - 1)
    fy = (y - y0)[:, None]
    if wrap_x:
        x0 = np.floor(x).astype(np.int64)
        fx = (x - x0)[:, None]
        x1 = (x0 + 1) % width
        x0 = x0 % width
    else:
        x = np.clip(x, 0.0, width - 1)
        x0 = np.floor(x).astype(np.int64)
        x1 = np.minimum(x0 + 1, width - 1)
        fx = (x - x0)[:, None]
    return ((1 - fy) * ((1 - fx) * image[y0, x0] + fx * image[y0, x1])
            + fy * ((1 - fx) * image[y1, x0] + fx * image[y1, x1]))


def patch_mask(spec, mesh):
    lon, lat = mesh.vertex_lonlat()
    dlon = _wrap_angle(lon - spec.lon0)
    return (np.abs(dlon) <= spec.extent) & (np.abs(lat) <= spec.extent), dlon, lat


def project_digit(image, spec, mesh):
    """Bilinear samples of a planar image on vertices inside the patch, 0 elsewhere."""
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape
    inside, dlon, lat = patch_mask(spec, mesh)
    x = (dlon[inside] + spec.extent) / (2.0 * spec.extent) * width - 0.5
    y = (spec.extent - lat[inside]) / (2.0 * spec.extent) * height - 0.5
    signal = np.zeros(mesh.n_v)
    signal[inside] = _bilinear(image[:, :, None], x, y, wrap_x=False)[:, 0]
    return signal


@dataclass(frozen=True, eq=False)
class EquirectImage:
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"EquirectImage expects (height, width, channels), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("EquirectImage has non-finite pixels")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


def pixel_lonlat(width, height):
    """Longitudes of column centres and latitudes of row centres."""
    lon = -np.pi + (np.arange(width) + 0.5) * 2.0 * np.pi / width
    lat = np.pi / 2.0 - (np.arange(height) + 0.5) * np.pi / height
    return lon, lat


def sample_equirect(image, mesh, mode='bilinear'):
    """Per-vertex values (C, V) read from a panorama at vertex lon/lat."""
    lon, lat = mesh.vertex_lonlat()
    if mode == 'bilinear':
        x = (lon + np.pi) / (2.0 * np.pi) * image.width - 0.5
        y = (np.pi / 2.0 - lat) / np.pi * image.height - 0.5
        values = _bilinear(image.data, x, y, wrap_x=True)
    elif mode == 'nearest':
        col = np.floor((lon + np.pi) / (2.0 * np.pi) * image.width).astype(np.int64) % image.width
        row = np.clip(np.floor((np.pi / 2.0 - lat) / np.pi * image.height).astype(np.int64), 0, image.height - 1)
        values = image.data[row, col]
    else:
        raise ValueError(f"Unknown sampling mode {mode!r}; expected 'bilinear' or 'nearest'")
    return np.ascontiguousarray(values.T)


def _containment(directions, corners):
    """Signed edge tests d.(a x b), d.(b x c), d.(c x a) for (P, m) candidate faces."""
    a, b, c = corners[..., 0, :], corners[..., 1, :], corners[..., 2, :]
    return np.stack([
        np.einsum('pd,pmd->pm', directions, np.cross(b, c)),
        np.einsum('pd,pmd->pm', directions, np.cross(c, a)),
        np.einsum('pd,pmd->pm', directions, np.cross(a, b)),
    ], axis=-1)


def _pick_face(directions, mesh, candidates):
    tests = _containment(directions, mesh.vertices[mesh.faces[candidates]]).min(axis=-1)
    inside = tests >= -CONTAINMENT_SLACK
    # first containing candidate is the lowest index; fall back to the least-outside face
    pick = np.where(inside.any(axis=1), np.argmax(inside, axis=1), np.argmax(tests, axis=1))
    return candidates[np.arange(len(candidates)), pick]


def locate_faces(directions, level, chunk=16384):
    """Containing level-``level`` face per unit direction, by descent through the nested faces."""
    found = np.empty(len(directions), dtype=np.int64)
    for start in range(0, len(directions), chunk):
        d = directions[start:start + chunk]
        face = _pick_face(d, mesh_at_level(0), np.broadcast_to(np.arange(20), (len(d), 20)))
        for sub in range(1, level + 1):
            face = _pick_face(d, mesh_at_level(sub), 4 * face[:, None] + np.arange(4)[None, :])
        found[start:start + chunk] = face
    return found


def render_equirect(signal, mesh, width, height, mode='barycentric'):
    """Rasterise a per-vertex signal (V,) or (C, V) to a width x height panorama."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim == 1:
        signal = signal[None, :]
    if signal.shape[1] != mesh.n_v:
        raise ValueError(f"Signal has {signal.shape[1]} vertices, mesh has {mesh.n_v}")
    if width < 1 or height < 1:
        raise ValueError(f"Image size must be positive, got {width}x{height}")
    lon_grid, lat_grid = np.meshgrid(*pixel_lonlat(width, height))
    directions = np.stack([
        np.cos(lat_grid) * np.cos(lon_grid), np.cos(lat_grid) * np.sin(lon_grid), np.sin(lat_grid),
    ], axis=-1).reshape(-1, 3)

    faces = mesh.faces[locate_faces(directions, mesh.level)]
    weights = _containment(directions, mesh.vertices[faces][:, None])[:, 0]
    weights = np.maximum(weights, 0.0)
    weights /= weights.sum(axis=1, keepdims=True)
    if mode == 'nearest':
        values = signal[:, faces[np.arange(len(faces)), np.argmax(weights, axis=1)]]
    elif mode == 'barycentric':
        values = np.einsum('pk,cpk->cp', weights, signal[:, faces])
    else:
        raise ValueError(f"Unknown render mode {mode!r}")
    return EquirectImage(np.ascontiguousarray(values.T.reshape(height, width, -1)))


@dataclass(frozen=True, eq=False)
class SphericalSample:
    features: np.ndarray
    label: object
    level: int

    def __post_init__(self):
        expected = level_stats(self.level).n_v
        if self.features.ndim != 2 or self.features.shape[1] != expected:
            raise ValueError(f"Sample features {self.features.shape} do not match level {self.level} (V={expected})")


class SphericalDataset:
    """Features (N, C, V) with per-sample (N,) or per-vertex (N, V) labels."""

    def __init__(self, features, labels, level):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.level = level
        expected = level_stats(level).n_v
        if self.features.ndim != 3 or self.features.shape[2] != expected:
            raise DataFormatError(f"Features {self.features.shape} do not match level {level} (V={expected})")
        if self.labels.shape[0] != self.features.shape[0]:
            raise DataFormatError(f"{self.features.shape[0]} samples but {self.labels.shape[0]} labels")

    @classmethod
    def from_samples(cls, samples):
        if not samples:
            raise ValueError("No samples given")
        return cls(np.stack([s.features for s in samples]), np.stack([np.asarray(s.label) for s in samples]),
                   samples[0].level)

    def __len__(self):
        return self.features.shape[0]

    @property
    def in_channels(self):
        return self.features.shape[1]

    @property
    def per_vertex(self):
        return self.labels.ndim == 2

    def batch(self, indices):
        return self.features[indices], self.labels[indices]

    def label_frequencies(self, num_classes, ignore_index=None):
        labels = self.labels.reshape(-1)
        if ignore_index is not None:
            labels = labels[labels != ignore_index]
        counts = np.bincount(labels, minlength=num_classes)[:num_classes]
        return counts / max(counts.sum(), 1)


def project_digits(images, labels, level, spec):
    mesh = mesh_at_level(level)
    features = np.stack([project_digit(img, spec, mesh) for img in images])[:, None, :]
    return SphericalDataset(features, labels, level)


def harmonic_basis(mesh):
    x, y, z = mesh.vertices.T
    return np.stack([np.ones_like(x), x, y, z, x * y, y * z, x * z, x * x - y * y, 3 * z * z - 1], axis=1)


def synth_segmentation_set(level, classes, count, seed, spectrum=None):
    """Harmonic fixtures: labels are the argmax of per-class ell<=2 fields."""
    if classes < 2:
        raise ValueError(f"Need at least 2 classes, got {classes}")
    spectrum = spectrum or _DEFAULT_SPECTRUM
    mesh = mesh_at_level(level)
    basis = harmonic_basis(mesh)
    scale = np.array([spectrum[int(d)] for d in _HARMONIC_DEGREES])
    rng = RngStreams(seed).stream('synth-data')
    mixing, _ = np.linalg.qr(rng.standard_normal((classes, classes)))
    samples = []
    for _ in range(count):
        fields = (rng.standard_normal((classes, basis.shape[1])) * scale) @ basis.T
        samples.append(SphericalSample(mixing @ fields, np.argmax(fields, axis=0), level))
    return samples


def _level_from_vertex_count(n_v, source):
    for level in range(MAX_LEVEL + 1):
        if level_stats(level).n_v == n_v:
            return level
    raise DataFormatError(f"{source}: {n_v} vertices is not an icosphere vertex count")


def write_dataset(dataset, out_dir):
    """Per-sample .npy feature (and label) files plus a tab-separated manifest."""
    os.makedirs(os.path.join(out_dir, 'features'), exist_ok=True)
    if dataset.per_vertex:
        os.makedirs(os.path.join(out_dir, 'labels'), exist_ok=True)
    lines = []
    for i in range(len(dataset)):
        feature_path = os.path.join('features', f"{i:06d}.npy")
        np.save(os.path.join(out_dir, feature_path), dataset.features[i])
        if dataset.per_vertex:
            label = os.path.join('labels', f"{i:06d}.npy")
            np.save(os.path.join(out_dir, label), dataset.labels[i])
        else:
            label = str(int(dataset.labels[i]))
        lines.append(f"{feature_path}\t{label}\n")
    manifest = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest, 'w', encoding='utf-8', newline='\n') as handle:
        handle.writelines(lines)
    return manifest


def read_manifest(path):
    entries = []
    with open(path, 'r', encoding='utf-8') as handle:
        for number, line in enumerate(handle, 1):
            if not line.strip():
                continue
            parts = line.rstrip('\n').split('\t')
            if len(parts) != 2:
                raise DataFormatError(f"{path}:{number}: expected 'features<TAB>label'")
            entries.append((parts[0], parts[1]))
    return entries


def load_manifest(path, expected_level=None):
    entries = read_manifest(path)
    if not entries:
        raise DataFormatError(f"{path}: manifest is empty")
    root = os.path.dirname(os.path.abspath(path))
    features, labels = [], []
    for feature_path, label in entries:
        features.append(np.load(os.path.join(root, feature_path)))
        labels.append(int(label) if label.lstrip('-').isdigit() else np.load(os.path.join(root, label)))
    features = np.stack(features)
    level = _level_from_vertex_count(features.shape[-1], path)
    if expected_level is not None and level != expected_level:
        raise DataFormatError(f"{path}: data is level {level} (V={features.shape[-1]}), "
                              f"expected level {expected_level}")
    return SphericalDataset(features, np.stack(labels), level)


def write_pnm(path, image):
    """Binary P5 (1 channel) or P6 (3 channels), 8-bit; values clipped to [0, 1]."""
    magic = {1: b'P5', 3: b'P6'}.get(image.channels)
    if magic is None:
        raise ValueError(f"PNM needs 1 or 3 channels, got {image.channels}")
    pixels = np.round(np.clip(image.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, 'wb') as handle:
        handle.write(magic + f"\n{image.width} {image.height}\n255\n".encode('ascii'))
        handle.write(pixels.tobytes())


def read_pnm(path):
    with open(path, 'rb') as handle:
        blob = handle.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b'#':
            pos = blob.find(b'\n', pos) + 1 or len(blob)
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{path}: truncated PNM header")
        tokens.append(blob[start:pos])
    pos += 1
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    channels = {b'P5': 1, b'P6': 3}.get(magic)
    if channels is None:
        raise DataFormatError(f"{path}: unsupported PNM magic {magic!r}")
    if not 0 < maxval <= 255:
        raise DataFormatError(f"{path}: only 8-bit PNM supported, maxval {maxval}")
    size = width * height * channels
    if len(blob) - pos < size:
        raise DataFormatError(f"{path}: expected {size} pixel bytes, found {len(blob) - pos}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=size, offset=pos).reshape(height, width, channels)
    return EquirectImage(pixels / float(maxval))


_PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
    [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212],
    [0, 128, 128], [220, 190, 255], [170, 110, 40], [255, 250, 200], [128, 0, 0], [128, 128, 128],
]) / 255.0


def label_palette(labels):
    """Colour an (H, W) integer label map."""
    labels = np.asarray(labels, dtype=np.int64)
    return EquirectImage(_PALETTE[labels % len(_PALETTE)])
