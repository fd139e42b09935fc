"""Mini-batch training (Adam + cosine LR + early stopping) and checkpoints.

The checkpoint wire format is fixed: magic ``CADCKPT1``, a u64-length-
prefixed UTF-8 key=value header (version, hyperparameters, variant, seed,
scaler arrays), then each parameter as u64-length-prefixed name, u64 rank,
u64 extents, and raw little-endian float32 values in row-major order.
"""

from __future__ import annotations

import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Scaler, WindowSet
from .errors import ConfigError, DataError, NumericError
from .model import CadModel, ModelConfig, build_model
from .numcore import AdamState, CosineSchedule, Tape, Tensor, adam_step, cosine_lr, square, sub, tmean

CHECKPOINT_MAGIC = b"CADCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; defaults are the reference SMD settings."""

    l: int = 16
    h: int = 3
    experts: int = 5
    kernels: int = 16
    epsilon: float = 0.7
    variant: str = "full"
    lr0: float = 0.001
    lr_min: float = 0.0
    batch: int = 128
    max_epochs: int = 10
    early_stop_patience: int | None = 2
    val_fraction: float = 0.1
    seed: int = 0
    scale: bool = True
    clip: bool = True
    embed_dim: int = 128
    tower_hidden: int = 32
    dropout_rate: float = 0.1
    dtype: str = "float32"

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            l=self.l,
            h=self.h,
            experts=self.experts,
            kernels=self.kernels,
            epsilon=self.epsilon,
            variant=self.variant,
            embed_dim=self.embed_dim,
            tower_hidden=self.tower_hidden,
            dropout_rate=self.dropout_rate,
            dtype=self.dtype,
        )

    def validate(self) -> None:
        self.model_config().validate()
        bad = []
        if self.lr0 <= 0:
            bad.append(f"lr0={self.lr0} (need > 0)")
        if self.lr_min < 0:
            bad.append(f"lr_min={self.lr_min} (need >= 0)")
        if self.batch < 1:
            bad.append(f"batch={self.batch} (need >= 1)")
        if self.max_epochs < 1:
            bad.append(f"max_epochs={self.max_epochs} (need >= 1)")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            bad.append(f"early_stop_patience={self.early_stop_patience} (need >= 1 or none)")
        if not 0.0 <= self.val_fraction <= 0.5:
            bad.append(f"val_fraction={self.val_fraction} (need 0 <= f <= 0.5)")
        if bad:
            raise ConfigError("invalid train config: " + "; ".join(bad))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float | None
    lr: float
    wall_time: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    stopping_reason: str = "max_epochs"


def mse_loss(y, yhat) -> Tensor:
    """Mean of squared per-metric errors; doubles as the anomaly score."""
    y = y if isinstance(y, Tensor) else Tensor(y)
    yhat = yhat if isinstance(yhat, Tensor) else Tensor(yhat)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: y {y.shape} vs yhat {yhat.shape}")
    return tmean(square(sub(y, yhat)))


def _eval_loss(model: CadModel, windows: np.ndarray, targets: np.ndarray, batch: int) -> float:
    """Mean per-sample loss in eval mode, chunked to bound memory."""
    total = 0.0
    for start in range(0, len(windows), batch):
        xb = windows[start : start + batch]
        yb = targets[start : start + batch].astype(model.config.np_dtype)
        pred = model.forward_batch(xb, mode="eval")
        err = pred.data - yb
        total += float((err * err).mean(axis=1).sum())
    return total / len(windows)


def train_model(model: CadModel, windows: WindowSet, cfg: TrainConfig) -> tuple[CadModel, TrainHistory]:
    """Train in place: shuffled mini-batches over the chronologically first
    1 - val_fraction of samples, Adam with a cosine schedule over all batch
    steps, early stop when validation stops improving."""
    cfg.validate()
    if len(windows) == 0:
        raise DataError("empty window set")
    n_val = int(len(windows) * cfg.val_fraction)
    n_train = len(windows) - n_val
    train_x, train_y = windows.windows[:n_train], windows.targets[:n_train]
    val_x, val_y = windows.windows[n_train:], windows.targets[n_train:]

    batches_per_epoch = (n_train + cfg.batch - 1) // cfg.batch
    sched = CosineSchedule(
        lr0=cfg.lr0, lr_min=cfg.lr_min, total_steps=batches_per_epoch * cfg.max_epochs
    )
    shuffle_rng, dropout_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2)
    )

    params = model.parameters()
    state = AdamState.for_params(params)
    history = TrainHistory()
    best_val = np.inf
    stale_epochs = 0
    step = 0

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n_train)
        epoch_lr = cosine_lr(step, sched)
        loss_sum = 0.0
        for start in range(0, n_train, cfg.batch):
            idx = order[start : start + cfg.batch]
            xb = train_x[idx]
            yb = Tensor(train_y[idx].astype(model.config.np_dtype))
            lr = cosine_lr(step, sched)
            with Tape() as tape:
                tape.watch(*params)
                pred = model.forward_batch(xb, mode="train", rng=dropout_rng)
                loss = mse_loss(yb, pred)
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch + 1}"
                )
            grads = tape.grad(loss, params)
            adam_step(state, params, grads, lr)
            step += 1
            loss_sum += loss_value * len(idx)

        val_loss = _eval_loss(model, val_x, val_y, cfg.batch) if n_val else None
        history.epochs.append(
            EpochStats(
                epoch=epoch,
                train_loss=loss_sum / n_train,
                val_loss=val_loss,
                lr=epoch_lr,
                wall_time=time.perf_counter() - t0,
            )
        )
        if val_loss is not None:
            if val_loss < best_val:
                best_val = val_loss
                stale_epochs = 0
            else:
                stale_epochs += 1
            if cfg.early_stop_patience is not None and stale_epochs >= cfg.early_stop_patience:
                history.stopping_reason = "early_stop"
                break
    return model, history


def write_history(history: TrainHistory, path) -> None:
    """Deterministic history file: per-epoch rows plus the stopping reason.

    Wall time is intentionally omitted so fixed-seed runs are byte-identical.
    """
    lines = ["epoch\ttrain_loss\tval_loss\tlr"]
    for e in history.epochs:
        val = repr(e.val_loss) if e.val_loss is not None else "-"
        lines.append(f"{e.epoch}\t{e.train_loss!r}\t{val}\t{e.lr!r}")
    lines.append(f"stopping\t{history.stopping_reason}")
    _atomic_write_text(path, "\n".join(lines) + "\n")


# --- checkpoint persistence ---------------------------------------------------


def _atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _header_text(model: CadModel, scaler: Scaler | None, cfg: TrainConfig | None) -> str:
    c = model.config
    pairs = [
        ("version", CHECKPOINT_VERSION),
        ("variant", c.variant),
        ("n_metrics", model.n_metrics),
        ("l", c.l),
        ("h", c.h),
        ("experts", c.experts),
        ("kernels", c.kernels),
        ("epsilon", repr(c.epsilon)),
        ("embed_dim", c.embed_dim),
        ("tower_hidden", c.tower_hidden),
        ("dropout_rate", repr(c.dropout_rate)),
        ("dtype", c.dtype),
        ("seed", cfg.seed if cfg is not None else model.seed),
        ("params", len(model.named_parameters())),
    ]
    if scaler is None:
        pairs.append(("scaler", "none"))
    else:
        pairs.append(("scaler", "minmax"))
        pairs.append(("scaler_clip", int(scaler.clip)))
        pairs.append(("scaler_min", ",".join(repr(float(v)) for v in scaler.mins)))
        pairs.append(("scaler_max", ",".join(repr(float(v)) for v in scaler.maxs)))
    return "".join(f"{k}={v}\n" for k, v in pairs)


def save_checkpoint(model: CadModel, scaler: Scaler | None, path, cfg: TrainConfig | None = None) -> None:
    """Write the checkpoint atomically (no partial file on failure)."""
    header = _header_text(model, scaler, cfg).encode("utf-8")
    blob = [CHECKPOINT_MAGIC, struct.pack("<Q", len(header)), header]
    for name, tensor in model.named_parameters():
        encoded = name.encode("utf-8")
        blob.append(struct.pack("<Q", len(encoded)))
        blob.append(encoded)
        blob.append(struct.pack("<Q", tensor.ndim))
        blob.append(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
        blob.append(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(blob))
    os.replace(tmp, path)


def _read_exact(fh, n: int, path) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"{path}: truncated checkpoint")
    return buf


def _parse_header(text: str, path) -> dict[str, str]:
    header: dict[str, str] = {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}: malformed checkpoint header line {line!r}")
        header[key] = value
    return header


def read_checkpoint_header(path) -> dict[str, str]:
    """The raw key=value hyperparameter block (inspection helper)."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CHECKPOINT_MAGIC), path)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: bad magic bytes, not a checkpoint")
        (header_len,) = struct.unpack("<Q", _read_exact(fh, 8, path))
        return _parse_header(_read_exact(fh, header_len, path).decode("utf-8"), path)


def load_checkpoint(path) -> tuple[CadModel, Scaler | None]:
    """Rebuild the model and overwrite its parameters with the stored values."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CHECKPOINT_MAGIC), path)
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: bad magic bytes, not a checkpoint")
        (header_len,) = struct.unpack("<Q", _read_exact(fh, 8, path))
        header = _parse_header(_read_exact(fh, header_len, path).decode("utf-8"), path)
        try:
            version = int(header["version"])
            if version != CHECKPOINT_VERSION:
                raise DataError(f"{path}: unsupported checkpoint version {version}")
            config = ModelConfig(
                l=int(header["l"]),
                h=int(header["h"]),
                experts=int(header["experts"]),
                kernels=int(header["kernels"]),
                epsilon=float(header["epsilon"]),
                variant=header["variant"],
                embed_dim=int(header["embed_dim"]),
                tower_hidden=int(header["tower_hidden"]),
                dropout_rate=float(header["dropout_rate"]),
                dtype=header["dtype"],
            )
            n_metrics = int(header["n_metrics"])
            n_params = int(header["params"])
            seed = int(header["seed"])
            scaler = None
            if header["scaler"] == "minmax":
                scaler = Scaler(
                    mins=np.array([float(v) for v in header["scaler_min"].split(",")]),
                    maxs=np.array([float(v) for v in header["scaler_max"].split(",")]),
                    clip=bool(int(header["scaler_clip"])),
                )
        except KeyError as exc:
            raise DataError(f"{path}: checkpoint header missing key {exc}") from None

        model = build_model(config, n_metrics=n_metrics, rng_seed=seed)
        expected = dict(model.named_parameters())
        if n_params != len(expected):
            raise DataError(
                f"{path}: header promises {n_params} parameters,"
                f" model has {len(expected)}"
            )
        for _ in range(n_params):
            (name_len,) = struct.unpack("<Q", _read_exact(fh, 8, path))
            name = _read_exact(fh, name_len, path).decode("utf-8")
            if name not in expected:
                raise DataError(f"{path}: unexpected parameter {name!r}")
            (rank,) = struct.unpack("<Q", _read_exact(fh, 8, path))
            extents = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, path))
            tensor = expected.pop(name)
            if extents != tensor.shape:
                raise DataError(
                    f"{path}: parameter {name!r} has shape {extents},"
                    f" expected {tensor.shape}"
                )
            count = int(np.prod(extents, dtype=np.int64)) if rank else 1
            raw = np.frombuffer(_read_exact(fh, 4 * count, path), dtype="<f4")
            tensor.data = raw.reshape(extents).astype(config.np_dtype)
        if expected:
            raise DataError(f"{path}: missing parameters {sorted(expected)}")
        if fh.read(1):
            raise DataError(f"{path}: trailing data after last parameter")
    return model, scaler
