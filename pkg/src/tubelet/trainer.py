"""Adam training, evaluation, and the multi-seed robustness protocol."""
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import datasim
from . import model as mdl
from . import objectives as obj
from . import tensor as tn
from .errors import ConfigError, NumericalError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    gamma: float = 0.95
    decay_every: int = 10
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    val_every: int = 10
    checkpoint_every: int = 0
    resample_masks: bool = False

    def __post_init__(self):
        for name in ("epochs", "batch_size", "decay_every", "val_every"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"train.{name} must be a positive integer, got {value!r}")
        if self.checkpoint_every < 0:
            raise ConfigError("train.checkpoint_every must be >= 0")
        if not self.lr > 0 or not 0 < self.gamma <= 1:
            raise ConfigError("train.lr must be > 0 and train.gamma in (0, 1]")

    def to_dict(self):
        return asdict(self)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )


def lr_at(epoch, config):
    return config.lr * config.gamma ** (epoch // config.decay_every)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place. ``grads`` maps names to arrays."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}; step aborted")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= update.astype(p.dtype, copy=False)
    return params, state


# -- batching --------------------------------------------------------------

def batches(indices, batch_size):
    """Split into consecutive batches; a trailing partial batch of one sample is dropped."""
    chunks = [indices[i:i + batch_size] for i in range(0, len(indices), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < min(2, batch_size):
        chunks.pop()
    return chunks


def _batch_inputs(dataset, idx, config):
    sar = dataset.sar[idx] if config.fusion else None
    return mdl.assemble_input(dataset.msi_clouded[idx], sar, dataset.mask[idx], config)


def check_compatible(dataset, config):
    if config.fusion and dataset.sar is None:
        raise ConfigError("fusion variant requested but the dataset carries no SAR channels")
    shape = dataset.target.shape[1:]
    expected = (config.T, config.C_msi, config.H, config.W)
    if shape != expected:
        raise ConfigError(f"dataset samples {shape} do not match model config {expected}")


def batch_loss(params, config, loss_config, x, target):
    pred = mdl.forward(tn.Tensor(x, dtype=x.dtype), params, config)
    pred = tn.transpose(pred, (0, 2, 1, 3, 4))
    return obj.multiscale_loss(pred, tn.Tensor(target, dtype=x.dtype), loss_config)


def predict(params, config, dataset, idx=None, batch_size=8):
    """Reconstructions in (N, T, C, H, W) layout."""
    idx = np.arange(len(dataset)) if idx is None else np.asarray(idx)
    dtype = params["embed.tubelet.weight"].dtype
    out = []
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        x = _batch_inputs(dataset, chunk, config).astype(dtype, copy=False)
        y = mdl.forward(tn.Tensor(x, dtype=dtype), params, config)
        out.append(y.data.transpose(0, 2, 1, 3, 4))
    return np.concatenate(out) if out else np.zeros((0,) + dataset.target.shape[1:], dtype=dtype)


def evaluate(params, config, dataset, idx=None):
    idx = np.arange(len(dataset)) if idx is None else np.asarray(idx)
    pred = predict(params, config, dataset, idx)
    return obj.evaluate_all(pred, dataset.target[idx], dataset.mask[idx])


# -- training --------------------------------------------------------------

@dataclass
class TrainResult:
    params: dict
    state: OptimizerState
    losses: list = field(default_factory=list)
    val_log: list = field(default_factory=list)
    epoch: int = 0


def _epoch_order(seed, epoch, train_idx):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), 1]))
    return train_idx[rng.permutation(len(train_idx))]


def train(dataset, model_config, train_config=TrainConfig(), loss_config=obj.LossConfig(),
          resume=None, checkpoint_path=None, progress=print, stop_after=None):
    """Train from scratch (or from ``resume``, a loaded checkpoint).

    Shuffles are derived from ``(seed, epoch)`` and optimizer moments are
    checkpointed, so a resumed run reproduces an uninterrupted one exactly.
    ``stop_after`` ends the run early after that many completed epochs.
    """
    check_compatible(dataset, model_config)
    if len(dataset.train_idx) == 0:
        raise ConfigError("dataset has no training samples")
    if resume is None:
        params = mdl.init_params(model_config, train_config.seed)
        result = TrainResult(params, OptimizerState.zeros_like(params))
    else:
        result = TrainResult(resume.params, resume.state, list(resume.losses),
                             list(resume.val_log), resume.epoch)
    params, state = result.params, result.state
    names = list(params)
    sources = [params[k] for k in names]
    train_idx = dataset.train_idx
    data = dataset
    last = train_config.epochs if stop_after is None else min(train_config.epochs, stop_after)

    for epoch in range(result.epoch, last):
        if train_config.resample_masks:
            data = datasim.remask(dataset, dataset.meta.get("clouds", 20), mask_seed_offset=epoch + 1)
        lr = lr_at(epoch, train_config)
        total, count = 0.0, 0
        for b, chunk in enumerate(batches(_epoch_order(train_config.seed, epoch, train_idx),
                                          train_config.batch_size)):
            x = _batch_inputs(data, chunk, model_config)
            with tn.GradientTape() as tape:
                loss = batch_loss(params, model_config, loss_config, x, data.target[chunk])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = dict(zip(names, tape.gradient(loss, sources)))
            adam_step(params, grads, state, lr, train_config.beta1, train_config.beta2,
                      train_config.adam_epsilon)
            total += value
            count += 1
        result.losses.append(total / count)
        result.epoch = epoch + 1
        line = f"epoch {epoch + 1:4d}  lr {lr:.6g}  loss {result.losses[-1]:.6f}"
        if len(dataset.val_idx) and ((epoch + 1) % train_config.val_every == 0 or epoch + 1 == train_config.epochs):
            metrics = evaluate(params, model_config, data, dataset.val_idx)
            result.val_log.append({"epoch": epoch + 1, **metrics})
            line += f"  val_mse {metrics['mse']:.6f}  val_ssim {metrics['ssim']:.4f}"
        if progress is not None:
            progress(line)
        if checkpoint_path is not None and (
            (train_config.checkpoint_every and (epoch + 1) % train_config.checkpoint_every == 0)
            or epoch + 1 == last
        ):
            from . import dataio
            dataio.save_checkpoint(checkpoint_path, model_config, train_config, result,
                                   loss_config=loss_config)
    return result


# -- protocol --------------------------------------------------------------

def variant_name(config):
    vivit = config.t != config.T
    return ("smts" if config.fusion else "mts") + ("-vivit" if vivit else "-vit")


def summarize(cells):
    """Average per-seed rows into per-(variant, clouds) rows plus per-variant AVG rows."""
    metrics = obj.REPORT_COLUMNS[4:]
    table = obj.MetricsReport()
    variants = list(dict.fromkeys(r["variant"] for r in cells.rows))
    for v in variants:
        clouds = list(dict.fromkeys(r["clouds"] for r in cells.rows if r["variant"] == v))
        for c in clouds:
            group = [r for r in cells.rows if r["variant"] == v and r["clouds"] == c]
            table.add(v, c, "mean", group[0]["split"], {k: float(np.mean([r[k] for r in group])) for k in metrics})
    for v in variants:
        group = [r for r in table.rows if r["variant"] == v]
        table.add(f"{v} (AVG)", "-", "mean", group[0]["split"],
                  {k: float(np.mean([r[k] for r in group])) for k in metrics})
    return table


def run_protocol(variants=mdl.VARIANTS, cloud_counts=(20, 30), seeds=(0, 1, 2), data_seed=42,
                 n_samples=16, H=60, W=60, cloud_size=0.3, model_overrides=None,
                 train_config=TrainConfig(), loss_config=obj.LossConfig(), progress=None):
    """Train and evaluate every (variant, clouds, seed) cell on the validation split.

    Returns ``(cells, table)``: one row per cell, and the report layout of
    per-(variant, clouds) means followed by one AVG row per variant.
    """
    if len(seeds) < 1:
        raise ConfigError("run_protocol needs at least one seed")
    model_overrides = dict(model_overrides or {})
    T = model_overrides.get("T", datasim.T_DEFAULT)
    cells = obj.MetricsReport()
    for clouds in cloud_counts:
        dataset = datasim.make_dataset(data_seed, n_samples, H, W, clouds, cloud_size, T=T)
        for variant in variants:
            config = mdl.ModelConfig.for_variant(variant, H=H, W=W, **model_overrides)
            for seed in seeds:
                tc = TrainConfig(**{**train_config.to_dict(), "seed": seed})
                result = train(dataset, config, tc, loss_config, progress=progress)
                metrics = evaluate(result.params, config, dataset, dataset.val_idx)
                cells.add(mdl.DISPLAY_NAMES[variant], clouds, seed, "val", metrics)
    return cells, summarize(cells)
