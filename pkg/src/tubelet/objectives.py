"""Training loss and evaluation metrics.

Arrays follow the (N, T, C, H, W) layout; spectral vectors lie along the
channel axis (-3). Losses operate on :class:`~tubelet.tensor.Tensor` and are
differentiable; metrics take plain arrays and compute in double precision.
"""
import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DimensionError

PSNR_CLAMP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

REPORT_COLUMNS = (
    "variant", "clouds", "seed", "split",
    "mse", "sam", "psnr", "ssim",
    "masked_mse", "masked_sam", "masked_psnr", "masked_ssim",
)


@dataclass(frozen=True)
class LossConfig:
    scales: tuple = (1.0, 0.5, 0.25)
    w_mse: float = 0.5
    w_sam: float = 0.5
    sam_epsilon: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if not self.scales:
            raise ConfigError("loss.scales must not be empty")
        for s in self.scales:
            if s not in tn.SUPPORTED_SCALES:
                raise ConfigError(f"loss scale {s} unsupported; expected a subset of {tn.SUPPORTED_SCALES}")
        if self.w_mse < 0 or self.w_sam < 0:
            raise ConfigError("loss weights must be non-negative")


def _check_pair(pred, target, what):
    if pred.shape != target.shape:
        raise DimensionError(f"{what}: prediction {pred.shape} and target {target.shape} differ")


# -- losses ----------------------------------------------------------------

def mse_loss(pred, target):
    pred, target = tn.as_tensor(pred), tn.as_tensor(target)
    _check_pair(pred, target, "mse_loss")
    diff = pred.data - target.data
    n = diff.size
    value = np.asarray(np.mean(diff * diff, dtype=np.float64), dtype=pred.dtype)

    def backward(g):
        gd = diff * (g * (2.0 / n)).astype(diff.dtype)
        return gd, -gd

    return tn._emit(value, (pred, target), backward)


def _cosines(u, v, eps, axis):
    dot = (u * v).sum(axis=axis)
    nu = np.sqrt((u * u).sum(axis=axis))
    nv = np.sqrt((v * v).sum(axis=axis))
    denom = nu * nv + eps
    return dot, nu, nv, denom, np.clip(dot / denom, -1.0, 1.0)


def sam_loss(pred, target, eps=1e-8, axis=-3):
    """Mean spectral angle (radians) between predicted and true spectra."""
    pred, target = tn.as_tensor(pred), tn.as_tensor(target)
    _check_pair(pred, target, "sam_loss")
    p, t = pred.data, target.data
    dot, npn, ntn, denom, cos = _cosines(p, t, eps, axis)
    m = cos.size
    value = np.asarray(np.mean(np.arccos(cos), dtype=np.float64), dtype=pred.dtype)

    def backward(g):
        one_minus = 1.0 - cos * cos
        dtheta = np.where(one_minus > 0, -1.0 / np.sqrt(np.where(one_minus > 0, one_minus, 1.0)), 0.0)
        coef = np.expand_dims((g / m) * dtheta / denom, axis)
        d2 = np.expand_dims(dot / denom, axis)

        def unit(x, nx):
            nx = np.expand_dims(nx, axis)
            return np.divide(x, nx, out=np.zeros_like(x), where=nx > 0)

        gp = coef * (t - d2 * np.expand_dims(ntn, axis) * unit(p, npn))
        gt = None
        if target.requires_grad:
            gt = coef * (p - d2 * np.expand_dims(npn, axis) * unit(t, ntn))
        return gp.astype(p.dtype), (None if gt is None else gt.astype(t.dtype))

    return tn._emit(value, (pred, target), backward)


def multiscale_loss(pred, target, config=LossConfig()):
    """Mean over pyramid levels of ``w_mse * MSE + w_sam * SAM``.

    Both tensors are resized from full resolution at every level.
    """
    pred, target = tn.as_tensor(pred), tn.as_tensor(target)
    _check_pair(pred, target, "multiscale_loss")
    total = None
    for s in config.scales:
        ps = tn.bilinear_resize(pred, s)
        ts = tn.bilinear_resize(target, s)
        term = tn.add(
            tn.scale(mse_loss(ps, ts), config.w_mse),
            tn.scale(sam_loss(ps, ts, config.sam_epsilon), config.w_sam),
        )
        total = term if total is None else tn.add(total, term)
    return tn.scale(total, 1.0 / len(config.scales))


# -- metrics ---------------------------------------------------------------

def mse(pred, target):
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(d * d))


def sam(pred, target, eps=1e-8, axis=-3):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    return float(np.mean(np.arccos(_cosines(p, t, eps, axis)[-1])))


def psnr_from_mse(value):
    if value <= 0:
        return PSNR_CLAMP_DB
    return min(PSNR_CLAMP_DB, 10.0 * math.log10(1.0 / value))


def psnr(pred, target):
    """PSNR in dB for data normalised to [0, 1]; a perfect match reports 100 dB."""
    return psnr_from_mse(mse(pred, target))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _valid_filter_matrix(n, g):
    k = g.size
    m = np.zeros((n - k + 1, n))
    for i in range(n - k + 1):
        m[i, i:i + k] = g
    return m


def ssim_map(pred, target):
    """Per-position SSIM over valid 11x11 Gaussian windows of every 2D image."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    _check_pair(x, y, "ssim")
    h, w = x.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ConfigError(f"ssim: image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    fh = _valid_filter_matrix(h, g)
    fw = _valid_filter_matrix(w, g)

    def blur(a):
        return fh @ a @ fw.T

    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x * mu_x
    syy = blur(y * y) - mu_y * mu_y
    sxy = blur(x * y) - mu_x * mu_y
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def ssim(pred, target):
    return float(np.mean(ssim_map(pred, target)))


def evaluate_all(pred, target, mask, eps=1e-8):
    """Full-image and cloud-only (mask == 1) metrics for (N, T, C, H, W) arrays.

    Cloud-only SSIM averages the SSIM map over windows centred on a masked
    pixel. Cloud-only values are NaN when the mask is empty.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    _check_pair(p, t, "evaluate_all")
    m = np.asarray(mask) > 0.5
    if m.shape != p.shape[:-3] + p.shape[-2:]:
        raise DimensionError(f"evaluate_all: mask {m.shape} does not match data {p.shape}")
    row = {"mse": mse(p, t), "sam": sam(p, t, eps)}
    row["psnr"] = psnr_from_mse(row["mse"])
    smap = ssim_map(p, t)
    row["ssim"] = float(np.mean(smap))
    if not m.any():
        row.update(masked_mse=math.nan, masked_sam=math.nan, masked_psnr=math.nan, masked_ssim=math.nan)
        return row
    sq = ((p - t) ** 2).sum(axis=-3)
    row["masked_mse"] = float(sq[m].sum() / (m.sum() * p.shape[-3]))
    angles = np.arccos(_cosines(p, t, eps, -3)[-1])
    row["masked_sam"] = float(angles[m].mean())
    row["masked_psnr"] = psnr_from_mse(row["masked_mse"])
    half = SSIM_WINDOW // 2
    centre = m[..., half:m.shape[-2] - half, half:m.shape[-1] - half]
    centre = np.broadcast_to(np.expand_dims(centre, -3), smap.shape)
    row["masked_ssim"] = float(smap[centre].mean()) if centre.any() else math.nan
    return row


# -- reporting -------------------------------------------------------------

def _fmt(value, factor=1.0):
    if isinstance(value, float) and math.isnan(value):
        return "nan"
    return f"{value * factor:.3f}"


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)

    def add(self, variant, clouds, seed, split, metrics):
        row = {"variant": variant, "clouds": clouds, "seed": seed, "split": split}
        row.update({k: float(metrics[k]) for k in REPORT_COLUMNS[4:]})
        self.rows.append(row)
        return row

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump([{k: row[k] for k in REPORT_COLUMNS} for row in self.rows], fh, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def render(self):
        """Fixed-width table with MSE scaled by 1e3 and SAM by 10."""
        head = ("Model", "# Cloud", "MSE (x1e-3)", "SAM (x1e-1)", "PSNR", "SSIM")
        lines = ["{:<18} {:>7} {:>12} {:>12} {:>8} {:>7}".format(*head)]
        for row in self.rows:
            lines.append("{:<18} {:>7} {:>12} {:>12} {:>8} {:>7}".format(
                str(row["variant"]), str(row["clouds"]),
                _fmt(row["mse"], 1e3), _fmt(row["sam"], 1e1),
                _fmt(row["psnr"]), _fmt(row["ssim"]),
            ))
        return "\n".join(lines)
