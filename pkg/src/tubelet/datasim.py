"""Synthetic multispectral/SAR scenes and artificial cloud masks.

Scenes are cloud-free by construction: a seeded Voronoi class map, one
smooth 11-band x T-date trajectory per class, and a static spatial texture.
SAR is a fixed linear mix of the MSI bands, squashed to [0, 1] and
perturbed by multiplicative speckle, so it carries MSI information under
cloud by construction.

Clouds are unions of thresholded anisotropic Gaussian bumps; masks multiply
MSI only.
"""
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GenerationError

N_BANDS = 11
N_SAR = 2
T_DEFAULT = 6
# Band order: B1 B2 B3 B4 B5 B6 B7 B8 B8A B11 B12.
NIR_ANALOG_BANDS = (5, 6, 7, 8)
TEXTURE_SIGMA = 0.02
MAX_STEP = 0.3
SAR_SPECKLE = 0.05
SAR_GAIN = 8.0
SAR_OFFSET = 0.3
# Rows: VV-like (visible/red-edge heavy), VH-like (NIR/SWIR heavy). Rows sum to 1.
SAR_MIXING = np.array([
    [0.05, 0.10, 0.10, 0.20, 0.15, 0.10, 0.05, 0.05, 0.05, 0.10, 0.05],
    [0.00, 0.02, 0.03, 0.05, 0.05, 0.10, 0.15, 0.20, 0.15, 0.15, 0.10],
])

CLOUD_THRESHOLD = 0.5
CLOUD_SIGMA_RANGE = (0.5, 1.5)
FRACTION_BAND = (0.02, 0.70)
MAX_RETRIES = 20


@dataclass
class Scene:
    msi: np.ndarray  # (T, 11, H, W)
    sar: np.ndarray  # (T, 2, H, W)
    class_map: np.ndarray  # (H, W) int
    trajectories: np.ndarray = field(repr=False)  # (n_classes, T, 11)


@dataclass
class CloudMask:
    mask: np.ndarray  # (T, H, W) in {0, 1}
    cloud_count: int
    cloud_size: float
    seed: int

    @property
    def fraction(self):
        return float(self.mask.mean())


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def squash(z):
    return 1.0 / (1.0 + np.exp(-SAR_GAIN * (z - SAR_OFFSET)))


def sar_from_msi(msi, speckle):
    """SAR backscatter analogue: mixed MSI bands, squashed, times (1 + 0.05 * speckle)."""
    mixed = np.einsum("kc,tchw->tkhw", SAR_MIXING, msi)
    return np.clip(squash(mixed) * (1.0 + SAR_SPECKLE * speckle), 0.0, 1.0)


def _class_trajectories(rng, n_classes, T):
    base = rng.uniform(0.05, 0.45, size=(n_classes, 1, N_BANDS))
    steps = np.clip(rng.normal(0.0, 0.04, size=(n_classes, T - 1, N_BANDS)), -0.1, 0.1)
    trend = np.zeros((n_classes, T - 1, N_BANDS))
    # Greening-up phenology on the NIR-like bands.
    trend[:, :, NIR_ANALOG_BANDS] = rng.uniform(0.0, 0.08, size=(n_classes, 1, 1))
    walk = np.concatenate([np.zeros((n_classes, 1, N_BANDS)), np.cumsum(steps + trend, axis=1)], axis=1)
    return np.clip(base + walk, 0.02, 0.98)


def generate_scene(seed, H=60, W=60, n_classes=6, T=T_DEFAULT):
    if H <= 0 or W <= 0 or H % 5 or W % 5:
        raise ConfigError(f"scene extents must be positive multiples of 5, got {H}x{W}")
    if n_classes < 2:
        raise ConfigError(f"n_classes must be >= 2, got {n_classes}")
    rng = _rng(seed, 0)
    n_sites = 3 * n_classes
    sites = rng.uniform(0, 1, size=(n_sites, 2)) * (H, W)
    site_class = np.concatenate([np.arange(n_classes), rng.integers(0, n_classes, n_sites - n_classes)])
    yy, xx = np.mgrid[0:H, 0:W]
    d2 = (yy[..., None] + 0.5 - sites[:, 0]) ** 2 + (xx[..., None] + 0.5 - sites[:, 1]) ** 2
    class_map = site_class[np.argmin(d2, axis=-1)]

    traj = _class_trajectories(rng, n_classes, T)
    texture = rng.normal(0.0, TEXTURE_SIGMA, size=(N_BANDS, H, W))
    msi = traj[class_map].transpose(2, 3, 0, 1) + texture[None]
    msi = np.clip(msi, 0.0, 1.0)
    speckle = rng.normal(0.0, 1.0, size=(T, N_SAR, H, W))
    sar = sar_from_msi(msi, speckle)
    return Scene(msi.astype(np.float32), sar.astype(np.float32), class_map, traj)


def _cloud_frame(rng, n, H, W, cloud_size):
    field_ = np.zeros((H, W), dtype=bool)
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    for _ in range(n):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        sy, sx = rng.uniform(*CLOUD_SIGMA_RANGE, size=2) * cloud_size * H / 4.0
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = c * (xx - cx) + s * (yy - cy)
        v = -s * (xx - cx) + c * (yy - cy)
        bump = np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
        field_ |= bump >= CLOUD_THRESHOLD
    return field_


def clouds_per_frame(n_clouds, T):
    base, rem = divmod(n_clouds, T)
    return [base + (1 if i < rem else 0) for i in range(T)]


def generate_cloud_mask(seed, T=T_DEFAULT, H=60, W=60, n_clouds=20, cloud_size=0.3):
    """Binary (T, H, W) cloud mask, 1 = occluded.

    Frames whose cloud fraction falls outside [0.02, 0.70] are redrawn from a
    fresh sub-seed, at most 20 times.
    """
    if n_clouds < 0:
        raise ConfigError(f"n_clouds must be >= 0, got {n_clouds}")
    if not 0 < cloud_size <= 1:
        raise ConfigError(f"cloud_size must lie in (0, 1], got {cloud_size}")
    mask = np.zeros((T, H, W), dtype=np.float32)
    for frame, n in enumerate(clouds_per_frame(n_clouds, T)):
        if n == 0:
            continue
        for attempt in range(MAX_RETRIES + 1):
            f = _cloud_frame(_rng(seed, frame, attempt), n, H, W, cloud_size)
            if FRACTION_BAND[0] <= f.mean() <= FRACTION_BAND[1]:
                mask[frame] = f
                break
        else:
            raise GenerationError(
                f"frame {frame}: cloud fraction stayed outside {FRACTION_BAND} after {MAX_RETRIES} retries"
            )
    return CloudMask(mask, n_clouds, cloud_size, seed)


def combine_masks(*masks):
    """Elementwise OR of binary masks (e.g. detected plus artificial clouds)."""
    out = np.zeros_like(np.asarray(masks[0], dtype=np.float32))
    for m in masks:
        out = np.maximum(out, (np.asarray(m) > 0.5).astype(np.float32))
    return out


def apply_cloud_mask(msi, mask):
    """``msi * (1 - mask)`` with the (..., T, H, W) mask repeated over channels."""
    msi = np.asarray(msi)
    m = mask.mask if isinstance(mask, CloudMask) else np.asarray(mask)
    if m.shape != msi.shape[:-3] + msi.shape[-2:]:
        raise ConfigError(f"mask {m.shape} does not match MSI {msi.shape}")
    return msi * (1 - np.expand_dims(m, -3)).astype(msi.dtype)


@dataclass
class Dataset:
    """Stacked samples; index order is generation order."""

    msi_clouded: np.ndarray  # (N, T, 11, H, W)
    sar: np.ndarray  # (N, T, 2, H, W) or None
    mask: np.ndarray  # (N, T, H, W)
    target: np.ndarray  # (N, T, 11, H, W)
    sample_seeds: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.target.shape[0]

    @property
    def n_train(self):
        return split_sizes(len(self))[0]

    @property
    def train_idx(self):
        return np.arange(self.n_train)

    @property
    def val_idx(self):
        return np.arange(self.n_train, len(self))

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return Dataset(
            self.msi_clouded[idx],
            None if self.sar is None else self.sar[idx],
            self.mask[idx],
            self.target[idx],
            [self.sample_seeds[i] for i in idx] if self.sample_seeds else [],
            dict(self.meta),
        )

    def digest(self):
        h = hashlib.sha256()
        for name in ("msi_clouded", "sar", "mask", "target"):
            arr = getattr(self, name)
            h.update(name.encode())
            if arr is not None:
                h.update(str(arr.shape).encode())
                h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()


def split_sizes(n):
    n_train = (4 * n) // 5
    return n_train, n - n_train


def sample_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])




def make_dataset(seed, n_samples, H=60, W=60, clouds=20, cloud_size=0.3, T=T_DEFAULT,
                 n_classes=6, include_sar=True, mask_seed_offset=0):
    """Deterministic dataset of ``n_samples`` scenes with fresh masks per sample.

    Sample ``i`` uses a sub-seed derived from ``(seed, i)``, so content does
    not depend on generation order. The first 80% of indices form the
    training split. ``mask_seed_offset`` redraws the masks over the same
    scenes (used for per-epoch mask resampling and severity comparisons).
    """
    if n_samples < 5:
        raise ConfigError(f"n_samples must be >= 5, got {n_samples}")
    msi_c, sars, masks, targets, seeds = [], [], [], [], []
    for i in range(n_samples):
        s = sample_seed(seed, i)
        scene = generate_scene(s, H, W, n_classes=n_classes, T=T)
        cm = generate_cloud_mask(s + mask_seed_offset, T, H, W, clouds, cloud_size)
        msi_c.append(apply_cloud_mask(scene.msi, cm))
        sars.append(scene.sar)
        masks.append(cm.mask)
        targets.append(scene.msi)
        seeds.append(s)
    meta = {"seed": seed, "n_samples": n_samples, "H": H, "W": W, "T": T,
            "clouds": clouds, "cloud_size": cloud_size, "n_classes": n_classes}
    return Dataset(
        np.stack(msi_c), np.stack(sars) if include_sar else None,
        np.stack(masks), np.stack(targets), seeds, meta,
    )


def remask(dataset, clouds, cloud_size=None, mask_seed_offset=0):
    """Same targets and SAR, new artificial clouds."""
    cloud_size = dataset.meta.get("cloud_size", 0.3) if cloud_size is None else cloud_size
    T, H, W = dataset.mask.shape[1:]
    masks = np.stack([
        generate_cloud_mask(s + mask_seed_offset, T, H, W, clouds, cloud_size).mask
        for s in dataset.sample_seeds
    ])
    meta = dict(dataset.meta, clouds=clouds, cloud_size=cloud_size)
    return Dataset(apply_cloud_mask(dataset.target, masks), dataset.sar, masks, dataset.target,
                   list(dataset.sample_seeds), meta)
