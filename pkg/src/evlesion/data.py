"""Synthetic anisotropic multi-channel volumes with small lesion blobs.

Each volume mimics a multi-parametric scan of one organ: an ellipsoidal
"organ" of mid intensity on a dark background, 0-3 spherical lesions
defined in millimeter space (so the anisotropic voxel grid visibly squashes
them along the slice axis), channel-specific lesion contrast (bright in
channel 2, dark in channel 1), plus confounders that only volumetric
context can resolve:

  * single-slice distractor blobs with the same in-plane channel signature
    as a true lesion but no extent across slices,
  * a per-volume random gain on every channel,
  * a smooth intensity falloff toward the first and last slices.

Voxel (iz, iy, ix) sits at millimeter position (iz*dz, iy*dy, ix*dx); the
label marks voxels inside any lesion sphere.  The lesion voxel fraction is
kept inside a configured band to reproduce heavy class imbalance.

On-disk format (version 1, little-endian; one file per volume):

    magic   8 bytes  b"EVLVOL01"
    version u32      1
    dims    u32 * 4  slices, channels, height, width
    spacing f64 * 3  dz, dy, dx in mm
    nlesion u32
    image   f32 * (l*c*h*w)   row-major
    label   u8  * (l*h*w)     row-major
    lesions f64 * 4 per lesion: z, y, x (mm), radius (mm)
"""

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

VOLUME_MAGIC = b"EVLVOL01"
VOLUME_VERSION = 1

FRACTION_MIN = 1e-4
FRACTION_MAX = 1e-2


@dataclass(frozen=True)
class Lesion:
    center_mm: tuple  # (z, y, x)
    radius_mm: float


@dataclass
class VolumeSample:
    image: np.ndarray  # (l, c, h, w) float64
    label: np.ndarray  # (l, h, w) uint8
    spacing: tuple  # (dz, dy, dx) mm
    lesions: list


@dataclass
class GeneratorConfig:
    slices: int = 8
    height: int = 64
    width: int = 64
    channels: int = 3
    spacing: tuple = (3.0, 0.5, 0.5)
    lesion_count: tuple = (0, 3)
    lesion_radius: tuple = (2.0, 5.0)
    lesion_contrast: float = 0.45
    distractor_count: tuple = (0, 3)
    noise_sigma: float = 0.05
    gain_jitter: float = 0.15
    slice_falloff: float = 0.3
    organ_margin: float = 0.8  # lesion centers stay inside this fraction of the organ

    def extent_mm(self):
        dz, dy, dx = self.spacing
        return ((self.slices - 1) * dz, (self.height - 1) * dy, (self.width - 1) * dx)


def _voxel_grid_mm(cfg):
    dz, dy, dx = cfg.spacing
    z = np.arange(cfg.slices) * dz
    y = np.arange(cfg.height) * dy
    x = np.arange(cfg.width) * dx
    return z[:, None, None], y[None, :, None], x[None, None, :]


def _ellipsoid_mask(cfg, center, radii):
    zz, yy, xx = _voxel_grid_mm(cfg)
    cz, cy, cx = center
    rz, ry, rx = radii
    return (((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0


def rasterize_lesions(cfg, lesions):
    """Label mask for a lesion list: 1 inside any lesion sphere."""
    label = np.zeros((cfg.slices, cfg.height, cfg.width), dtype=np.uint8)
    for les in lesions:
        r = les.radius_mm
        label |= _ellipsoid_mask(cfg, les.center_mm, (r, r, r)).astype(np.uint8)
    return label


def _organ_geometry(cfg):
    ez, ey, ex = cfg.extent_mm()
    center = (ez / 2, ey / 2, ex / 2)
    radii = (0.42 * ez + 1.5, 0.38 * ey, 0.38 * ex)
    return center, radii


def _sample_point_in_organ(rng, center, radii, shrink):
    while True:
        u = rng.uniform(-1.0, 1.0, size=3)
        if np.sum(u * u) <= 1.0:
            return tuple(c + s * r * shrink for c, r, s in zip(center, radii, u))


def _place_lesions(rng, cfg):
    """Sample a lesion set whose voxel fraction stays inside the band.

    Retries a bounded number of times; on exhaustion drops lesions one by
    one (logged) so generation always succeeds.
    """
    n_target = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
    center, radii = _organ_geometry(cfg)
    total = cfg.slices * cfg.height * cfg.width
    lesions = []
    for _ in range(n_target):
        lesions.append(Lesion(
            _sample_point_in_organ(rng, center, radii, cfg.organ_margin),
            float(rng.uniform(*cfg.lesion_radius)),
        ))
    for attempt in range(50):
        if not lesions:
            return [], np.zeros((cfg.slices, cfg.height, cfg.width), dtype=np.uint8)
        label = rasterize_lesions(cfg, lesions)
        frac = label.sum() / total
        if FRACTION_MIN <= frac <= FRACTION_MAX:
            return lesions, label
        # resample radii (and, when too large, one fewer lesion)
        if frac > FRACTION_MAX and attempt % 2 == 1:
            dropped = lesions.pop()
            log.info("dropping lesion r=%.2f mm to stay under imbalance cap", dropped.radius_mm)
        lesions = [Lesion(
            _sample_point_in_organ(rng, center, radii, cfg.organ_margin),
            float(rng.uniform(*cfg.lesion_radius)),
        ) for _ in lesions]
    log.warning("lesion placement failed after bounded retries; emitting fewer lesions")
    return [], np.zeros((cfg.slices, cfg.height, cfg.width), dtype=np.uint8)


def _synthesize_image(rng, cfg, label, lesions):
    l, h, w = cfg.slices, cfg.height, cfg.width
    center, radii = _organ_geometry(cfg)
    organ = _ellipsoid_mask(cfg, center, radii)
    base = np.array([0.55, 0.50, 0.45])[:cfg.channels]
    image = np.full((l, cfg.channels, h, w), 0.12)
    for c in range(cfg.channels):
        image[:, c][organ] = base[c % 3]

    # lesion contrast: dark in channel 1, bright in channel 2
    sign = np.zeros(cfg.channels)
    if cfg.channels > 1:
        sign[1] = -1.0
    if cfg.channels > 2:
        sign[2] = +1.0
    for c in range(cfg.channels):
        image[:, c][label > 0] += sign[c] * cfg.lesion_contrast

    # single-slice distractors: same in-plane signature, no cross-slice extent
    n_distract = int(rng.integers(cfg.distractor_count[0], cfg.distractor_count[1] + 1))
    dy, dx = cfg.spacing[1], cfg.spacing[2]
    for _ in range(n_distract):
        cz, cy, cx = _sample_point_in_organ(rng, center, radii, cfg.organ_margin)
        s = int(round(cz / cfg.spacing[0]))
        s = min(max(s, 0), l - 1)
        r = float(rng.uniform(*cfg.lesion_radius))
        yy = np.arange(h)[:, None] * dy
        xx = np.arange(w)[None, :] * dx
        disc = ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r
        for c in range(cfg.channels):
            image[s, c][disc] += sign[c] * cfg.lesion_contrast

    # slice-position intensity falloff (center slices brightest)
    if cfg.slice_falloff > 0 and l > 1:
        pos = (np.arange(l) - (l - 1) / 2) / ((l - 1) / 2)
        profile = 1.0 - cfg.slice_falloff * pos ** 2
        image *= profile[:, None, None, None]

    # per-volume channel gains
    if cfg.gain_jitter > 0:
        gains = rng.uniform(1.0 - cfg.gain_jitter, 1.0 + cfg.gain_jitter, size=cfg.channels)
        image *= gains[None, :, None, None]

    if cfg.noise_sigma > 0:
        image += rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    return image


def generate(seed, count, cfg=None):
    """Deterministically generate ``count`` volumes from one seed.

    Volumes get independent child seeds, so any prefix of the dataset is
    stable under a larger ``count``.
    """
    cfg = cfg or GeneratorConfig()
    children = np.random.SeedSequence(seed).spawn(count)
    volumes = []
    for ss in children:
        rng = np.random.default_rng(ss)
        lesions, label = _place_lesions(rng, cfg)
        image = _synthesize_image(rng, cfg, label, lesions)
        volumes.append(VolumeSample(image=image, label=label,
                                    spacing=tuple(cfg.spacing), lesions=lesions))
    return volumes


# --------------------------------------------------------------------------
# file format
# --------------------------------------------------------------------------

def write_volume(path, sample):
    image = np.ascontiguousarray(sample.image, dtype="<f4")
    label = np.ascontiguousarray(sample.label, dtype=np.uint8)
    l, c, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<I", VOLUME_VERSION))
        fh.write(struct.pack("<4I", l, c, h, w))
        fh.write(struct.pack("<3d", *sample.spacing))
        fh.write(struct.pack("<I", len(sample.lesions)))
        fh.write(image.tobytes())
        fh.write(label.tobytes())
        for les in sample.lesions:
            fh.write(struct.pack("<4d", *les.center_mm, les.radius_mm))


def read_volume(path):
    """Read one volume; accepts externally produced files in the same layout."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != VOLUME_MAGIC:
            raise ValueError(f"not a volume file: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VOLUME_VERSION:
            raise ValueError(f"unsupported volume version {version}")
        l, c, h, w = struct.unpack("<4I", fh.read(16))
        spacing = struct.unpack("<3d", fh.read(24))
        (nles,) = struct.unpack("<I", fh.read(4))
        image = np.frombuffer(fh.read(4 * l * c * h * w), dtype="<f4")
        image = image.reshape(l, c, h, w).astype(np.float64)
        label = np.frombuffer(fh.read(l * h * w), dtype=np.uint8).reshape(l, h, w).copy()
        lesions = []
        for _ in range(nles):
            z, y, x, r = struct.unpack("<4d", fh.read(32))
            lesions.append(Lesion((z, y, x), r))
        return VolumeSample(image=image, label=label, spacing=spacing, lesions=lesions)
