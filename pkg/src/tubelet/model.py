"""Tubelet video vision transformer for masked MSI time-series reconstruction.

Pipeline: channel assembly -> non-overlapping 3D tubelet convolution ->
linear token embedding + learned positional table -> pre-norm multi-head
self-attention encoder -> layer norm + linear patch decoder folded back to
(C_msi, T, H, W).

With temporal span ``t == T`` each spatial anchor sees the whole sequence in
one tubelet, which is the full-aggregation ViT baseline.
"""
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DimensionError

VARIANTS = ("mts-vit", "mts-vivit", "smts-vit", "smts-vivit")
DISPLAY_NAMES = {
    "mts-vit": "MTS-ViT",
    "mts-vivit": "MTS-ViViT",
    "smts-vit": "SMTS-ViT",
    "smts-vivit": "SMTS-ViViT",
}
VIVIT_SPAN = 2


@dataclass(frozen=True)
class ModelConfig:
    T: int = 6
    C_msi: int = 11
    C_sar: int = 2
    use_mask_channel: bool = True
    t: int = 2
    k_s: int = 5
    d_e: int = 64
    depth: int = 6
    heads: int = 8
    ff_dim: int = 256
    H: int = 60
    W: int = 60

    def __post_init__(self):
        self.validate()

    @classmethod
    def for_variant(cls, variant, **overrides):
        """Config for one of the four named variants; ``t`` and SAR usage follow the name."""
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        T = overrides.get("T", cls.T)
        fusion = variant.startswith("smts")
        span = VIVIT_SPAN if variant.endswith("vivit") else T
        if overrides.get("t") not in (None, span):
            raise ConfigError(f"variant {variant} implies t={span}, got t={overrides['t']}")
        if fusion and overrides.get("C_sar") == 0:
            raise ConfigError(f"variant {variant} requires SAR channels")
        overrides = {k: v for k, v in overrides.items() if v is not None}
        overrides["t"] = span
        overrides["C_sar"] = overrides.get("C_sar", 2) if fusion else 0
        return cls(**overrides)

    def validate(self):
        for name in ("T", "C_msi", "t", "k_s", "d_e", "depth", "heads", "ff_dim", "H", "W"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"model.{name} must be a positive integer, got {value!r}")
        if self.C_sar < 0:
            raise ConfigError(f"model.C_sar must be >= 0, got {self.C_sar}")
        if self.T % self.t:
            raise ConfigError(f"T={self.T} is not divisible by temporal span t={self.t}")
        if self.H % self.k_s or self.W % self.k_s:
            raise ConfigError(f"H={self.H}, W={self.W} are not divisible by k_s={self.k_s}")
        if self.d_e % self.heads:
            raise ConfigError(f"d_e={self.d_e} is not divisible by heads={self.heads}")

    @property
    def fusion(self):
        return self.C_sar > 0

    @property
    def c_total(self):
        return self.C_msi + self.C_sar + int(self.use_mask_channel)

    @property
    def grid(self):
        return (self.T // self.t, self.H // self.k_s, self.W // self.k_s)

    @property
    def n_tokens(self):
        a, b, c = self.grid
        return a * b * c

    @property
    def d_k(self):
        return self.d_e // self.heads

    @property
    def patch_dim(self):
        return self.t * self.k_s * self.k_s * self.C_msi

    def to_dict(self):
        return asdict(self)


@dataclass
class TokenGrid:
    tokens: tn.Tensor  # (N, P, d_e)
    anchors: np.ndarray = field(repr=False)  # (P, 3) rows of (t', row, col)


def token_anchors(config):
    a, b, c = config.grid
    ta, ra, ca = np.meshgrid(np.arange(a), np.arange(b), np.arange(c), indexing="ij")
    return np.stack([ta.ravel(), ra.ravel(), ca.ravel()], axis=1)


# -- parameters ------------------------------------------------------------

def param_shapes(config):
    """Ordered mapping of every parameter name to its shape."""
    d, ff = config.d_e, config.ff_dim
    shapes = OrderedDict()
    shapes["embed.tubelet.weight"] = (d, config.c_total, config.t, config.k_s, config.k_s)
    shapes["embed.tubelet.bias"] = (d,)
    shapes["embed.linear.weight"] = (d, d)
    shapes["embed.linear.bias"] = (d,)
    shapes["embed.pos"] = (config.n_tokens, d)
    for i in range(config.depth):
        p = f"enc.{i}"
        shapes[f"{p}.norm1.gain"] = (d,)
        shapes[f"{p}.norm1.shift"] = (d,)
        for proj in ("q", "k", "v", "out"):
            shapes[f"{p}.attn.{proj}.weight"] = (d, d)
            shapes[f"{p}.attn.{proj}.bias"] = (d,)
        shapes[f"{p}.norm2.gain"] = (d,)
        shapes[f"{p}.norm2.shift"] = (d,)
        shapes[f"{p}.ffn.fc1.weight"] = (ff, d)
        shapes[f"{p}.ffn.fc1.bias"] = (ff,)
        shapes[f"{p}.ffn.fc2.weight"] = (d, ff)
        shapes[f"{p}.ffn.fc2.bias"] = (d,)
    shapes["dec.norm.gain"] = (d,)
    shapes["dec.norm.shift"] = (d,)
    shapes["dec.linear.weight"] = (config.patch_dim, d)
    shapes["dec.linear.bias"] = (config.patch_dim,)
    return shapes


def param_count(config):
    return sum(math.prod(s) for s in param_shapes(config).values())


def init_params(config, seed, dtype=np.float32):
    """Seeded initialisation.

    Weights are uniform in +-1/sqrt(fan_in), biases and norm shifts zero,
    norm gains one, and the positional table normal(0, 0.02).
    """
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name == "embed.pos":
            value = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith(".weight"):
            bound = 1.0 / math.sqrt(math.prod(shape[1:]))
            value = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gain"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = tn.parameter(value.astype(dtype), name=name)
    return params


def cast_params(params, dtype):
    return OrderedDict((k, tn.parameter(v.data.astype(dtype), name=k)) for k, v in params.items())


# -- input assembly --------------------------------------------------------

def assemble_input(msi_clouded, sar, mask, config):
    """Channel-first model input [MSI | SAR | mask].

    Accepts (T, C, H, W) rasters with a (T, H, W) mask, or the same with a
    leading batch axis; returns (N?, C_total, T, H, W). SAR is copied
    verbatim and never touched by the mask.
    """
    msi_clouded = np.asarray(msi_clouded)
    batched = msi_clouded.ndim == 5
    if not config.fusion and sar is not None:
        raise ConfigError("SAR input supplied to a non-fusion (MSI-only) model config")
    if config.fusion and sar is None:
        raise ConfigError("fusion model config requires SAR input, none supplied")
    parts = [msi_clouded]
    if config.fusion:
        sar = np.asarray(sar)
        if sar.shape[-3] != config.C_sar:
            raise DimensionError(f"SAR has {sar.shape[-3]} channels, config expects {config.C_sar}")
        parts.append(sar.astype(msi_clouded.dtype, copy=False))
    if config.use_mask_channel:
        parts.append(np.expand_dims(np.asarray(mask, dtype=msi_clouded.dtype), -3))
    stacked = np.concatenate(parts, axis=-3)
    expected = (config.T, config.c_total, config.H, config.W)
    if stacked.shape[-4:] != expected:
        raise DimensionError(f"assembled input {stacked.shape[-4:]} does not match config {expected}")
    axes = (0, 2, 1, 3, 4) if batched else (1, 0, 2, 3)
    return np.ascontiguousarray(stacked.transpose(axes))


# -- network ---------------------------------------------------------------

def tubelet_embed(x, params, config, positional=True):
    """Tubelet tokens (N, P, d_e) from channel-first input (N?, C_total, T, H, W)."""
    x = tn.as_tensor(x)
    if x.ndim == 4:
        x = tn.reshape(x, (1,) + x.shape)
    feats = tn.conv3d(x, params["embed.tubelet.weight"], params["embed.tubelet.bias"])
    n = feats.shape[0]
    tokens = tn.reshape(tn.transpose(feats, (0, 2, 3, 4, 1)), (n, config.n_tokens, config.d_e))
    tokens = tn.linear(tokens, params["embed.linear.weight"], params["embed.linear.bias"])
    if positional:
        tokens = tn.add(tokens, params["embed.pos"])
    return TokenGrid(tokens, token_anchors(config))


def multi_head_attention(x, params, prefix, config, record=None):
    n, p, d = x.shape
    h, dk = config.heads, config.d_k

    def project(name):
        return tn.linear(x, params[f"{prefix}.{name}.weight"], params[f"{prefix}.{name}.bias"])

    # 1/sqrt(d_k) is applied to Q rather than to the (P, P) score matrix.
    q = tn.scale(project("q"), 1.0 / math.sqrt(dk))
    q = tn.transpose(tn.reshape(q, (n, p, h, dk)), (0, 2, 1, 3))
    k_t = tn.transpose(tn.reshape(project("k"), (n, p, h, dk)), (0, 2, 3, 1))
    v = tn.transpose(tn.reshape(project("v"), (n, p, h, dk)), (0, 2, 1, 3))
    weights = tn.softmax(tn.matmul(q, k_t), axis=-1)
    if record is not None:
        record.append(weights.data)
    heads = tn.matmul(weights, v)
    merged = tn.reshape(tn.transpose(heads, (0, 2, 1, 3)), (n, p, d))
    return tn.linear(merged, params[f"{prefix}.out.weight"], params[f"{prefix}.out.bias"])


def encoder_forward(grid, params, config, attention=None):
    """Pre-norm encoder stack with joint attention over all tokens.

    If ``attention`` is a list, each layer's (N, heads, P, P) weights are
    appended to it.
    """
    x = grid.tokens
    for i in range(config.depth):
        p = f"enc.{i}"
        h = tn.layer_norm(x, params[f"{p}.norm1.gain"], params[f"{p}.norm1.shift"])
        x = tn.add(x, multi_head_attention(h, params, f"{p}.attn", config, attention))
        h = tn.layer_norm(x, params[f"{p}.norm2.gain"], params[f"{p}.norm2.shift"])
        h = tn.gelu(tn.linear(h, params[f"{p}.ffn.fc1.weight"], params[f"{p}.ffn.fc1.bias"]))
        x = tn.add(x, tn.linear(h, params[f"{p}.ffn.fc2.weight"], params[f"{p}.ffn.fc2.bias"]))
    return TokenGrid(x, grid.anchors)


def decode_patches(grid, params, config):
    h = tn.layer_norm(grid.tokens, params["dec.norm.gain"], params["dec.norm.shift"])
    patches = tn.linear(h, params["dec.linear.weight"], params["dec.linear.bias"])
    return tn.fold_tubelets(patches, config.C_msi, config.T, config.H, config.W, config.t, config.k_s)


def forward(x, params, config, attention=None):
    """Reconstruction (N?, C_msi, T, H, W) from an assembled input tensor."""
    x = tn.as_tensor(x)
    single = x.ndim == 4
    grid = encoder_forward(tubelet_embed(x, params, config), params, config, attention)
    out = decode_patches(grid, params, config)
    if single:
        out = tn.reshape(out, out.shape[1:])
    return out


def model_forward(msi_clouded, sar, mask, params, config, attention=None):
    dtype = params["embed.tubelet.weight"].dtype
    x = assemble_input(np.asarray(msi_clouded, dtype=dtype), sar, mask, config)
    return forward(tn.Tensor(x, dtype=dtype), params, config, attention)
