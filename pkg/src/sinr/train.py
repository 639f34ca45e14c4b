"""Deterministic minibatch training with checkpoint/resume.

A run is fully determined by its :class:`TrainConfig`: all randomness
(parameter init, batch draws, pseudo-locations, sampled negative species,
dropout masks) flows from independent generators spawned off the single
``master_seed``, and a checkpoint captures every piece of mutable state, so
an interrupted-and-resumed run produces bit-identical parameters to an
uninterrupted one.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import (
    EnvRasterStack,
    ObservationSet,
    SamplerConfig,
    assemble_inputs,
    sample_batch,
    sample_uniform_locations,
    subsample_cap,
)
from .geo import InputLayout, input_dim
from .losses import LossConfig, LossVariant, compute_loss, needs_pseudo_negatives
from .net import (
    AdamState,
    ModelFormatError,
    NetConfig,
    NetParams,
    _Reader,
    _rebuild,
    adam_step,
    backward,
    forward,
    init_adam,
    init_params,
    model_from_bytes,
    model_to_bytes,
)

#: Per-epoch multiplicative learning-rate decay factor.
LR_DECAY = 0.98

_CKPT_MAGIC = b"CKPT"
_CKPT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, epoch: int, step: int, value: float):
        super().__init__(
            f"non-finite loss {value!r} at epoch {epoch}, step {step}; "
            "training aborted before the parameter update"
        )
        self.epoch = epoch
        self.step = step


class CheckpointFormatError(ModelFormatError):
    """The checkpoint file is malformed or inconsistent."""


def lr_at_epoch(initial_lr: float, epoch: int) -> float:
    """Learning rate for a 0-based epoch: ``initial_lr * LR_DECAY ** epoch``."""
    if not (np.isfinite(initial_lr) and initial_lr > 0):
        raise ValueError(f"initial_lr must be positive and finite, got {initial_lr}")
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return initial_lr * LR_DECAY**epoch


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run."""

    net: NetConfig
    loss: LossConfig
    sampler: SamplerConfig
    epochs: int = 10
    batch_size: int = 2048
    initial_lr: float = 5e-4
    master_seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not (np.isfinite(self.initial_lr) and self.initial_lr > 0):
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.batch_size != self.sampler.batch_size:
            raise ValueError(
                f"batch_size {self.batch_size} disagrees with sampler batch_size "
                f"{self.sampler.batch_size}"
            )


@dataclass(frozen=True)
class TrainingLog:
    """Per-step loss values for the completed epochs of a run."""

    step_losses: np.ndarray
    steps_per_epoch: int

    @property
    def n_epochs(self) -> int:
        return int(self.step_losses.shape[0]) // self.steps_per_epoch

    def epoch_means(self) -> np.ndarray:
        """Mean loss of each completed epoch, in order."""
        n = self.n_epochs * self.steps_per_epoch
        return self.step_losses[:n].reshape(self.n_epochs, self.steps_per_epoch).mean(axis=1)


@dataclass
class TrainState:
    """Mutable mid-run state; exactly what a checkpoint stores."""

    cfg: TrainConfig
    species_ids: tuple[str, ...]
    params: NetParams
    adam: AdamState
    epochs_done: int
    step_losses: list[float] = field(default_factory=list)
    rng_batch: np.random.Generator = None
    rng_locations: np.random.Generator = None
    rng_negatives: np.random.Generator = None
    rng_dropout: np.random.Generator = None


@dataclass(frozen=True)
class TrainResult:
    """Final parameters plus the loss trajectory that produced them."""

    params: NetParams
    cfg: TrainConfig
    species_ids: tuple[str, ...]
    log: TrainingLog
    adam: AdamState
    n_records_used: int


def _seed_u64(seed: int) -> int:
    return int(seed) & 0xFFFFFFFFFFFFFFFF


def _spawn_rngs(master_seed: int) -> list[np.random.Generator]:
    """Four independent streams: batches, pseudo-locations, sampled negative
    species, dropout — in that fixed order."""
    children = np.random.SeedSequence(_seed_u64(master_seed)).spawn(4)
    return [np.random.default_rng(c) for c in children]


def _effective_obs(cfg: TrainConfig, obs: ObservationSet) -> ObservationSet:
    """Apply the sampler's per-species cap (when set) to the corpus."""
    cap = cfg.sampler.cap_per_species
    if cap is None:
        return obs
    return subsample_cap(obs, cap, cfg.sampler.subsample_seed)


def _check_inputs(cfg: TrainConfig, obs: ObservationSet, env: EnvRasterStack | None) -> None:
    if obs.n_records == 0:
        raise ValueError("cannot train on an empty observation set")
    if obs.n_species != cfg.net.n_species:
        raise ValueError(
            f"model expects {cfg.net.n_species} species but the corpus has {obs.n_species}"
        )
    layout = cfg.sampler.input_layout
    if layout is not InputLayout.COORDS and env is None:
        raise ValueError(f"input layout {layout.value!r} requires environmental rasters")
    expected = input_dim(layout, env.n_layers if env is not None else 0)
    if cfg.net.input_dim != expected:
        raise ValueError(
            f"net input_dim {cfg.net.input_dim} does not match layout "
            f"{layout.value!r} (expected {expected})"
        )


def steps_per_epoch(n_records: int, batch_size: int) -> int:
    """Number of optimizer steps per epoch: ``ceil(n_records / batch_size)``."""
    return math.ceil(n_records / batch_size)


def _pseudo_bounds(env: EnvRasterStack | None, layout: InputLayout):
    if layout is InputLayout.COORDS or env is None:
        return (-180.0, 180.0, -90.0, 90.0)
    # With environmental inputs the model's domain is the raster extent, so
    # pseudo-locations are drawn over it rather than the full globe.
    return (env.lon_min, env.lon_max, env.lat_min, env.lat_max)


def _run(
    state: TrainState,
    obs: ObservationSet,
    env: EnvRasterStack | None,
    checkpoint_path=None,
    stop_after_epoch: int | None = None,
    on_epoch=None,
) -> TrainResult:
    cfg = state.cfg
    if stop_after_epoch is not None and not (1 <= stop_after_epoch <= cfg.epochs):
        raise ValueError(
            f"stop_after_epoch must lie in [1, {cfg.epochs}], got {stop_after_epoch}"
        )
    n_steps = steps_per_epoch(obs.n_records, cfg.batch_size)
    layout = cfg.sampler.input_layout
    pseudo = needs_pseudo_negatives(cfg.loss.variant)
    bounds = _pseudo_bounds(env, layout)
    b = cfg.batch_size

    for epoch in range(state.epochs_done, cfg.epochs):
        lr = lr_at_epoch(cfg.initial_lr, epoch)
        for step in range(n_steps):
            x, targets, _ = sample_batch(obs, cfg.sampler, state.rng_batch, env)
            if pseudo:
                plons, plats = sample_uniform_locations(b, state.rng_locations, bounds)
                x = np.concatenate([x, assemble_inputs(plons, plats, layout, env)])
            _, y_all, cache = forward(
                state.params, cfg.net, x, mode="train", rng=state.rng_dropout,
                return_cache=True,
            )
            result = compute_loss(
                cfg.loss,
                y_all[:b],
                targets,
                y_hat_rand=y_all[b:] if pseudo else None,
                rng=state.rng_negatives,
            )
            if not np.isfinite(result.value):
                raise TrainingDivergedError(epoch, step, result.value)
            d_y = (
                np.concatenate([result.d_y_hat, result.d_y_hat_rand])
                if pseudo
                else result.d_y_hat
            )
            grads = backward(state.params, cfg.net, cache, d_y_hat=d_y)
            state.params, state.adam = adam_step(state.params, grads, state.adam, lr)
            state.step_losses.append(result.value)
        state.epochs_done = epoch + 1
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(state.step_losses[-n_steps:])), lr)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, state)
        if stop_after_epoch is not None and state.epochs_done >= stop_after_epoch:
            break

    return TrainResult(
        params=state.params,
        cfg=cfg,
        species_ids=state.species_ids,
        log=TrainingLog(np.asarray(state.step_losses, dtype=np.float64), n_steps),
        adam=state.adam,
        n_records_used=obs.n_records,
    )


def train(
    cfg: TrainConfig,
    obs: ObservationSet,
    env: EnvRasterStack | None = None,
    *,
    checkpoint_path=None,
    stop_after_epoch: int | None = None,
    on_epoch=None,
) -> TrainResult:
    """Train a fresh model; optionally checkpoint after every epoch.

    ``stop_after_epoch`` halts the run once that many epochs have completed
    (for later :func:`resume`); otherwise all ``cfg.epochs`` are run.
    ``on_epoch(epoch_index, mean_loss, lr)`` is called as each epoch ends.
    """
    obs = _effective_obs(cfg, obs)
    _check_inputs(cfg, obs, env)
    rngs = _spawn_rngs(cfg.master_seed)
    params = init_params(cfg.net)
    state = TrainState(
        cfg=cfg,
        species_ids=obs.species_ids,
        params=params,
        adam=init_adam(params),
        epochs_done=0,
        rng_batch=rngs[0],
        rng_locations=rngs[1],
        rng_negatives=rngs[2],
        rng_dropout=rngs[3],
    )
    return _run(state, obs, env, checkpoint_path, stop_after_epoch, on_epoch)


def resume(
    checkpoint_path,
    obs: ObservationSet,
    env: EnvRasterStack | None = None,
    *,
    expect_cfg: TrainConfig | None = None,
    stop_after_epoch: int | None = None,
    on_epoch=None,
) -> TrainResult:
    """Continue a checkpointed run to completion.

    With the same corpus and rasters, the result is bit-identical to the
    uninterrupted run. ``expect_cfg`` guards against resuming under a
    different configuration.
    """
    state = load_checkpoint(checkpoint_path)
    if expect_cfg is not None and expect_cfg != state.cfg:
        raise ValueError("checkpoint configuration does not match the expected one")
    obs = _effective_obs(state.cfg, obs)
    _check_inputs(state.cfg, obs, env)
    if obs.species_ids != state.species_ids:
        raise ValueError("checkpoint species catalog does not match the corpus")
    return _run(state, obs, env, checkpoint_path, stop_after_epoch, on_epoch)


# ---------------------------------------------------------------------------
# Config serialization (checkpoints, manifests)
# ---------------------------------------------------------------------------


def train_config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["loss"]["variant"] = cfg.loss.variant.value
    d["sampler"]["input_layout"] = cfg.sampler.input_layout.value
    return d


def train_config_from_dict(d: dict) -> TrainConfig:
    return TrainConfig(
        net=NetConfig(**d["net"]),
        loss=LossConfig(variant=LossVariant(d["loss"]["variant"]), lam=d["loss"]["lam"]),
        sampler=SamplerConfig(
            batch_size=d["sampler"]["batch_size"],
            input_layout=InputLayout(d["sampler"]["input_layout"]),
            cap_per_species=d["sampler"].get("cap_per_species"),
            subsample_seed=d["sampler"].get("subsample_seed", 0),
        ),
        epochs=d["epochs"],
        batch_size=d["batch_size"],
        initial_lr=d["initial_lr"],
        master_seed=d["master_seed"],
    )


# ---------------------------------------------------------------------------
# Checkpoint file: model blob, then a "CKPT" section with optimizer moments,
# rng states, loss history, and the full TrainConfig.
# ---------------------------------------------------------------------------


def _pack_json(obj) -> bytes:
    raw = json.dumps(obj).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _take_json(r: _Reader):
    (n,) = struct.unpack("<I", r.take(4))
    return json.loads(r.take(n).decode("utf-8"))


def save_checkpoint(path, state: TrainState) -> None:
    """Write the complete training state; atomic via write-then-rename."""
    cfg = state.cfg
    out = [
        model_to_bytes(
            state.params, cfg.net, cfg.sampler.input_layout, state.species_ids
        ),
        _CKPT_MAGIC,
        struct.pack("<II", _CKPT_VERSION, state.epochs_done),
        struct.pack("<Q", state.adam.t),
    ]
    for tree in (state.adam.m, state.adam.v):
        for arr in tree.flat():
            out.append(np.ascontiguousarray(arr, dtype=np.float32).tobytes())
    losses = np.asarray(state.step_losses, dtype=np.float64)
    out.append(struct.pack("<Q", losses.size))
    out.append(losses.tobytes())
    for rng in (state.rng_batch, state.rng_locations, state.rng_negatives, state.rng_dropout):
        out.append(_pack_json(rng.bit_generator.state))
    out.append(_pack_json(train_config_to_dict(cfg)))
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(out))
    os.replace(tmp, path)


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as fh:
        buf = fh.read()
    model, consumed = model_from_bytes(buf)
    r = _Reader(buf)
    r.pos = consumed
    if r.take(4) != _CKPT_MAGIC:
        raise CheckpointFormatError("missing checkpoint section after model data")
    version, epochs_done = struct.unpack("<II", r.take(8))
    if version != _CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (t,) = struct.unpack("<Q", r.take(8))

    def read_tree() -> NetParams:
        arrays = []
        for ref in model.params.flat():
            data = np.frombuffer(r.take(4 * ref.size), dtype="<f4").astype(np.float32)
            arrays.append(data.reshape(ref.shape))
        return _rebuild(model.params, arrays)

    m_tree = read_tree()
    v_tree = read_tree()
    (n_losses,) = struct.unpack("<Q", r.take(8))
    losses = np.frombuffer(r.take(8 * n_losses), dtype="<f8").tolist()

    rngs = []
    for _ in range(4):
        rng_state = _take_json(r)
        bitgen = rng_state.get("bit_generator")
        rng = np.random.default_rng()
        if rng.bit_generator.state["bit_generator"] != bitgen:
            raise CheckpointFormatError(f"unsupported random generator {bitgen!r}")
        rng.bit_generator.state = rng_state
        rngs.append(rng)

    cfg = train_config_from_dict(_take_json(r))
    if r.pos != len(buf):
        raise CheckpointFormatError(
            f"{len(buf) - r.pos} unexpected trailing bytes in checkpoint"
        )
    if model.species_ids and len(model.species_ids) != cfg.net.n_species:
        raise CheckpointFormatError("species catalog size disagrees with configuration")
    if epochs_done > cfg.epochs:
        raise CheckpointFormatError("checkpoint claims more epochs than configured")
    return TrainState(
        cfg=cfg,
        species_ids=model.species_ids,
        params=model.params,
        adam=AdamState(m=m_tree, v=v_tree, t=int(t)),
        epochs_done=int(epochs_done),
        step_losses=losses,
        rng_batch=rngs[0],
        rng_locations=rngs[1],
        rng_negatives=rngs[2],
        rng_dropout=rngs[3],
    )
