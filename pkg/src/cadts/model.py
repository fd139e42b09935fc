"""The conflict-aware detector network.

M convolutional experts read the full K x l window; one gate per metric,
blending a shared matrix with a per-metric personalized matrix over the
metric's own local window, mixes the expert embeddings; a per-metric tower
condenses the mixed embedding into one predicted value.

Variant wiring (ablations, selectable at build time):

    full          experts + dual gate on the metric's local window
    no_gate       shared-bottom: unweighted mean of expert embeddings
    no_selection  dual gate, but fed the flattened full window
    no_sgate      personalized gate only
    no_pgate      shared gate only
    no_conv       experts are two dense layers on the flattened window
    single_task   one isolated expert+tower per metric, input is only
                  that metric's own window

Forward passes are vectorized over the batch; towers and personalized gate
matrices are stored stacked along the metric axis so the per-metric work is
a handful of batched matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .numcore import (
    Tensor,
    conv_rows,
    dropout,
    matmul,
    relu,
    reshape,
    softmax,
    stack,
    tmean,
    transpose,
)

VARIANTS = ("full", "no_gate", "no_selection", "no_sgate", "no_pgate", "no_conv", "single_task")

EMBED_DIM = 128


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults follow the reference setup."""

    l: int = 16
    h: int = 3
    experts: int = 5
    kernels: int = 16
    epsilon: float = 0.7
    variant: str = "full"
    embed_dim: int = EMBED_DIM
    tower_hidden: int = 32
    dropout_rate: float = 0.1
    dtype: str = "float32"

    def validate(self) -> None:
        bad = []
        if self.variant not in VARIANTS:
            bad.append(f"variant={self.variant!r} (known: {', '.join(VARIANTS)})")
        if self.l < 1:
            bad.append(f"l={self.l} (need >= 1)")
        if self.h < 1:
            bad.append(f"h={self.h} (need >= 1)")
        if self.experts < 1:
            bad.append(f"experts={self.experts} (need >= 1)")
        if self.kernels < 1:
            bad.append(f"kernels={self.kernels} (need >= 1)")
        if self.variant in ("full", "no_selection") and not 0.5 < self.epsilon <= 1.0:
            bad.append(f"epsilon={self.epsilon} (need 0.5 < epsilon <= 1)")
        if self.embed_dim < 1:
            bad.append(f"embed_dim={self.embed_dim} (need >= 1)")
        if self.tower_hidden < 1:
            bad.append(f"tower_hidden={self.tower_hidden} (need >= 1)")
        if not 0.0 <= self.dropout_rate < 1.0:
            bad.append(f"dropout_rate={self.dropout_rate} (need 0 <= rate < 1)")
        if self.dtype not in ("float32", "float64"):
            bad.append(f"dtype={self.dtype!r} (float32 or float64)")
        if bad:
            raise ConfigError("invalid model config: " + "; ".join(bad))

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class ExpertNet:
    """Conv layer (absent for no_conv) + two dense layers -> embedding."""

    kernels: Tensor | None
    ff1_w: Tensor
    ff1_b: Tensor
    ff2_w: Tensor
    ff2_b: Tensor


@dataclass
class GateBank:
    """Shared and per-metric gate matrices (either may be absent)."""

    shared: Tensor | None
    personalized: Tensor | None  # stacked (K, gate_in, M)
    epsilon: float
    n_metrics: int


@dataclass
class TowerBank:
    """Per-metric towers stacked along the metric axis."""

    w1: Tensor  # (K, embed, hidden)
    b1: Tensor  # (K, 1, hidden)
    w2: Tensor  # (K, hidden, 1)
    b2: Tensor  # (K, 1, 1)


class _Init:
    """uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), drawn in a fixed order."""

    def __init__(self, seed: int, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def __call__(self, shape: tuple[int, ...], fan_in: int, name: str) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(self.rng.uniform(-bound, bound, size=shape).astype(self.dtype), name=name)


def _embed_batch(expert: ExpertNet, win: Tensor, batch: int) -> Tensor:
    """Embedding (B, W) of windows (B, rows, l); geometry read off the expert."""
    if expert.kernels is None:
        flat = reshape(win, (batch, expert.ff1_w.shape[0]))
    else:
        conv = relu(conv_rows(win, expert.kernels))  # (B, rows, N)
        flat = reshape(conv, (batch, expert.ff1_w.shape[0]))
    hidden = relu(matmul(flat, expert.ff1_w) + expert.ff1_b)
    return matmul(hidden, expert.ff2_w) + expert.ff2_b


@dataclass
class CadModel:
    config: ModelConfig
    n_metrics: int
    experts: list[ExpertNet]
    gates: GateBank | None
    towers: TowerBank
    seed: int = 0

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, ex in enumerate(self.experts):
            if ex.kernels is not None:
                out.append((f"expert.{i}.kernels", ex.kernels))
            out.append((f"expert.{i}.ff1_w", ex.ff1_w))
            out.append((f"expert.{i}.ff1_b", ex.ff1_b))
            out.append((f"expert.{i}.ff2_w", ex.ff2_w))
            out.append((f"expert.{i}.ff2_b", ex.ff2_b))
        if self.gates is not None:
            if self.gates.shared is not None:
                out.append(("gate.shared", self.gates.shared))
            if self.gates.personalized is not None:
                out.append(("gate.personalized", self.gates.personalized))
        out.append(("tower.w1", self.towers.w1))
        out.append(("tower.b1", self.towers.b1))
        out.append(("tower.w2", self.towers.w2))
        out.append(("tower.b2", self.towers.b2))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def n_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    # --- forward --------------------------------------------------------

    def forward_batch(
        self,
        windows: np.ndarray,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Predictions (B, K) for a batch of windows (B, K, l).

        ``mode='train'`` enables tower dropout and requires ``rng``; eval
        mode is a pure function of (parameters, input).
        """
        cfg = self.config
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        windows = np.asarray(windows)
        if windows.ndim != 3 or windows.shape[1:] != (self.n_metrics, cfg.l):
            raise ValueError(
                f"windows must have shape (B, {self.n_metrics}, {cfg.l}), got {windows.shape}"
            )
        use_dropout = mode == "train" and cfg.dropout_rate > 0.0
        if use_dropout and rng is None:
            raise ValueError("train-mode forward needs an rng for dropout")
        win = Tensor(np.ascontiguousarray(windows, dtype=cfg.np_dtype))
        batch = windows.shape[0]

        if cfg.variant == "single_task":
            mixed = self._isolated_embeddings(win, batch)  # (K, B, W)
        else:
            # expert outputs are computed once and reused across all metrics
            embeddings = stack(
                [_embed_batch(ex, win, batch) for ex in self.experts], axis=1
            )  # (B, M, W)
            if cfg.variant == "no_gate":
                mean_embed = tmean(embeddings, axis=1)  # (B, W)
                mixed = reshape(mean_embed, (1, batch, cfg.embed_dim))
            else:
                gate = self._gate_weights_batch(win, batch)  # (B, K, M)
                blended = matmul(gate, embeddings)  # (B, K, W)
                mixed = transpose(blended, (1, 0, 2))  # (K, B, W)

        hidden = relu(matmul(mixed, self.towers.w1) + self.towers.b1)  # (K, B, hidden)
        if use_dropout:
            hidden = dropout(hidden, cfg.dropout_rate, rng)
        raw = matmul(hidden, self.towers.w2) + self.towers.b2  # (K, B, 1)
        return transpose(reshape(raw, (self.n_metrics, batch)), (1, 0))

    def _isolated_embeddings(self, win: Tensor, batch: int) -> Tensor:
        """single_task: expert k sees only metric k's (1, l) window."""
        per_metric = []
        for k, expert in enumerate(self.experts):
            metric_win = Tensor(win.data[:, k : k + 1, :])
            per_metric.append(_embed_batch(expert, metric_win, batch))
        return stack(per_metric, axis=0)  # (K, B, W)

    def _gate_weights_batch(self, win: Tensor, batch: int) -> Tensor:
        cfg = self.config
        gates = self.gates
        if cfg.variant == "no_selection":
            flat = reshape(win, (batch, 1, self.n_metrics * cfg.l))
            shared_in = flat  # (B, 1, K*l)
            pers_in = transpose(flat, (1, 0, 2))  # (1, B, K*l)
        else:
            shared_in = win  # (B, K, l): shared matrix applied to each metric's own window
            pers_in = transpose(win, (1, 0, 2))  # (K, B, l)

        if gates.shared is not None and gates.personalized is not None:
            shared = matmul(shared_in, gates.shared)  # (B, K|1, M)
            pers = transpose(matmul(pers_in, gates.personalized), (1, 0, 2))  # (B, K, M)
            logits = shared * gates.epsilon + pers * (1.0 - gates.epsilon)
        elif gates.shared is not None:  # no_pgate
            logits = matmul(shared_in, gates.shared)
        else:  # no_sgate
            logits = transpose(matmul(pers_in, gates.personalized), (1, 0, 2))
        return softmax(logits, axis=-1)


# --- public single-window operations -----------------------------------------


def expert_forward(expert: ExpertNet, window: np.ndarray) -> Tensor:
    """Embedding (embed_dim,) of one window; traced if a tape is active.

    The window must match the expert's geometry: (rows, kernel width) for
    convolutional experts, any (rows, l) flattening to ff1's input size
    otherwise.
    """
    window = np.asarray(window)
    if window.ndim != 2:
        raise ValueError(f"window must be 2-D, got shape {window.shape}")
    flat_in = expert.ff1_w.shape[0]
    if expert.kernels is not None:
        n, width = expert.kernels.shape
        rows = flat_in // n
        if window.shape != (rows, width):
            raise ValueError(f"window must have shape ({rows}, {width}), got {window.shape}")
    elif window.size != flat_in:
        raise ValueError(f"window must flatten to {flat_in} values, got {window.shape}")
    win = Tensor(window[None].astype(expert.ff1_w.dtype))
    out = _embed_batch(expert, win, 1)
    return reshape(out, (out.shape[1],))


def expert_embeddings(model: CadModel, windows: np.ndarray) -> np.ndarray:
    """Eval-mode embeddings, shape (n_windows, n_experts, embed_dim).

    For single_task models expert k embeds only metric k's rows, matching
    the forward pass.
    """
    cfg = model.config
    windows = np.asarray(windows)
    if windows.ndim != 3 or windows.shape[1:] != (model.n_metrics, cfg.l):
        raise ValueError(
            f"windows must have shape (B, {model.n_metrics}, {cfg.l}), got {windows.shape}"
        )
    batch = np.ascontiguousarray(windows, dtype=cfg.np_dtype)
    out = np.empty((len(batch), len(model.experts), cfg.embed_dim), dtype=cfg.np_dtype)
    for idx, expert in enumerate(model.experts):
        if cfg.variant == "single_task":
            win = Tensor(batch[:, idx : idx + 1, :])
        else:
            win = Tensor(batch)
        out[:, idx, :] = _embed_batch(expert, win, len(batch)).data
    return out


def gate_weights(gates: GateBank, metric_window: np.ndarray, k: int) -> np.ndarray:
    """Simplex weights (M,) for metric ``k`` given only its own gate input.

    Inspection helper (eval-only, not traced); training gradients flow
    through the batched forward instead.
    """
    if not 0 <= k < gates.n_metrics:
        raise IndexError(f"metric index {k} out of range [0, {gates.n_metrics})")
    any_matrix = gates.shared if gates.shared is not None else gates.personalized
    gate_in = any_matrix.shape[-2]
    w = np.asarray(metric_window, dtype=any_matrix.dtype).reshape(-1)
    if w.shape != (gate_in,):
        raise ValueError(f"gate input must have length {gate_in}, got {len(w)}")
    if gates.shared is not None and gates.personalized is not None:
        logits = gates.epsilon * (w @ gates.shared.data) + (1.0 - gates.epsilon) * (
            w @ gates.personalized.data[k]
        )
    elif gates.shared is not None:
        logits = w @ gates.shared.data
    else:
        logits = w @ gates.personalized.data[k]
    return softmax(Tensor(logits)).data


def model_forward(
    model: CadModel,
    window: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Predictions (K,) for a single (K, l) window; traced if a tape is active."""
    window = np.asarray(window)
    if window.shape != (model.n_metrics, model.config.l):
        raise ValueError(
            f"window must have shape ({model.n_metrics}, {model.config.l}), got {window.shape}"
        )
    out = model.forward_batch(window[None], mode=mode, rng=rng)
    return reshape(out, (model.n_metrics,))


def build_model(config: ModelConfig, n_metrics: int, rng_seed: int = 0) -> CadModel:
    """Wire a model per ``config.variant``; parameters drawn from the seed."""
    config.validate()
    if n_metrics < 1:
        raise ConfigError(f"n_metrics must be >= 1, got {n_metrics}")
    init = _Init(rng_seed, config.np_dtype)
    k, l, m, n, w = n_metrics, config.l, config.experts, config.kernels, config.embed_dim

    def make_expert(idx: int, conv: bool, in_rows: int) -> ExpertNet:
        prefix = f"expert.{idx}"
        if conv:
            kernels = init((n, l), fan_in=l, name=f"{prefix}.kernels")
            flat_in = in_rows * n
        else:
            kernels = None
            flat_in = in_rows * l
        return ExpertNet(
            kernels=kernels,
            ff1_w=init((flat_in, w), fan_in=flat_in, name=f"{prefix}.ff1_w"),
            ff1_b=init((w,), fan_in=flat_in, name=f"{prefix}.ff1_b"),
            ff2_w=init((w, w), fan_in=w, name=f"{prefix}.ff2_w"),
            ff2_b=init((w,), fan_in=w, name=f"{prefix}.ff2_b"),
        )

    if config.variant == "single_task":
        experts = [make_expert(i, conv=True, in_rows=1) for i in range(k)]
    else:
        experts = [
            make_expert(i, conv=(config.variant != "no_conv"), in_rows=k) for i in range(m)
        ]

    gates: GateBank | None = None
    if config.variant not in ("no_gate", "single_task"):
        gate_in = k * l if config.variant == "no_selection" else l
        shared = None
        personalized = None
        if config.variant != "no_sgate":
            shared = init((gate_in, m), fan_in=gate_in, name="gate.shared")
        if config.variant != "no_pgate":
            personalized = init((k, gate_in, m), fan_in=gate_in, name="gate.personalized")
        gates = GateBank(shared=shared, personalized=personalized, epsilon=config.epsilon, n_metrics=k)

    hidden = config.tower_hidden
    towers = TowerBank(
        w1=init((k, w, hidden), fan_in=w, name="tower.w1"),
        b1=init((k, 1, hidden), fan_in=w, name="tower.b1"),
        w2=init((k, hidden, 1), fan_in=hidden, name="tower.w2"),
        b2=init((k, 1, 1), fan_in=hidden, name="tower.b2"),
    )
    return CadModel(
        config=config, n_metrics=n_metrics, experts=experts, gates=gates, towers=towers,
        seed=rng_seed,
    )
