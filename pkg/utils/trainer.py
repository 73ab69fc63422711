# =====================================================
# utils/trainer.py
# =====================================================

"""
Training loop for the mapping network: seeded batching, pseudo triplet
construction, AdamW with linear warmup, JSON-lines step log and checkpoints.

Checkpoint layout (little-endian):

    magic        4 bytes  b"DI2K"
    version      uint16
    header size  uint32
    header       utf-8 JSON (config, next step, shapes, skip counter, ...)
    payload      float64 arrays: parameters, first moments, second moments
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from utils.config import TrainConfig, config_hash, config_to_dict, substream, train_config_from_dict
from utils.embedding_store import CaptionRecord, EmbeddingStore, ImageRecord
from utils.encoders import FrozenEncoders
from utils.errors import (
    BadMagicError,
    DimensionMismatchError,
    InvalidInputError,
    NonFiniteGradientError,
    StoreError,
    TrainingAbortedError,
    TruncatedStoreError,
    UnsupportedVersionError,
)
from utils.pcm import PARAM_NAMES, MappingParams, grad_norm, init_mapping, total_loss_and_grads
from utils.ptc import FilterStats, construct_pseudo_triplets

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DI2K"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHI")
_F64 = np.dtype("<f8")


# -----------------------------------------------------
# Schedule and optimizer
# -----------------------------------------------------

def lr_at_step(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to the base rate over ``warmup_steps``, constant after."""
    if step < 0:
        raise InvalidInputError(f"step must be >= 0, got {step}")
    if config.warmup_steps == 0:
        return config.learning_rate
    return config.learning_rate * min(1.0, step / config.warmup_steps)


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params: MappingParams, config: TrainConfig) -> OptimizerState:
    zeros = {name: np.zeros_like(arr) for name, arr in params.arrays().items()}
    return OptimizerState(
        m=zeros,
        v={name: np.zeros_like(arr) for name, arr in params.arrays().items()},
        beta1=config.beta1, beta2=config.beta2, eps=config.eps,
    )


def adamw_step(params: MappingParams, grads: Dict[str, np.ndarray], state: OptimizerState,
               lr: float, config: TrainConfig) -> Tuple[MappingParams, OptimizerState]:
    """
    One AdamW update, in place.

    The decay term ``lr * weight_decay * theta`` uses the pre-update parameters
    and is kept out of the moment estimates.

    Args:
        params: Mapping parameters (updated in place, generation bumped)
        grads: Gradient per parameter name
        state: Moment accumulators (updated in place)
        lr: Learning rate for this step
        config: Weight decay

    Returns:
        tuple: (params, state)
    """
    for name in PARAM_NAMES:
        g = grads.get(name)
        if g is None or g.shape != getattr(params, name).shape:
            raise DimensionMismatchError(f"gradient for {name} missing or mis-shaped")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name} at optimizer step {state.step + 1}")

    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for name in PARAM_NAMES:
        theta = getattr(params, name)
        g = grads[name].astype(theta.dtype, copy=False)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        update = m_hat / (np.sqrt(v_hat) + state.eps) + config.weight_decay * theta
        theta -= (lr * update).astype(theta.dtype, copy=False)
    params.bump()
    return params, state


# -----------------------------------------------------
# Checkpoints
# -----------------------------------------------------

@dataclass
class Checkpoint:
    params: MappingParams
    state: OptimizerState
    config: TrainConfig
    step: int
    consecutive_skips: int = 0
    encoder_fingerprint: str = ""


def save_checkpoint(path: str, checkpoint: Checkpoint) -> int:
    params, state = checkpoint.params, checkpoint.state
    header = {
        "config": config_to_dict(checkpoint.config),
        "config_hash": config_hash(checkpoint.config),
        "step": checkpoint.step,
        "optimizer_step": state.step,
        "consecutive_skips": checkpoint.consecutive_skips,
        "activation": params.activation,
        "shapes": {name: list(getattr(params, name).shape) for name in PARAM_NAMES},
        "encoder_fingerprint": checkpoint.encoder_fingerprint,
    }
    raw_header = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(raw_header)), raw_header]
    for group in (params.arrays(), state.m, state.v):
        for name in PARAM_NAMES:
            chunks.append(np.ascontiguousarray(group[name], dtype=_F64).tobytes())
    payload = b"".join(chunks)
    try:
        with open(path, "wb") as f:
            f.write(payload)
    except OSError as e:
        raise StoreError(f"Checkpoint write failed: {e}") from e
    logger.info(f"Saved checkpoint {path} at step {checkpoint.step}")
    return len(payload)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as e:
        raise StoreError(f"Checkpoint read failed: {e}") from e
    if len(payload) < _CKPT_HEADER.size:
        raise TruncatedStoreError("checkpoint shorter than its header")
    magic, version, header_len = _CKPT_HEADER.unpack_from(payload)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    offset = _CKPT_HEADER.size
    if len(payload) < offset + header_len:
        raise TruncatedStoreError("checkpoint header truncated")
    header = json.loads(payload[offset:offset + header_len].decode("utf-8"))
    offset += header_len

    config = train_config_from_dict(header["config"])
    shapes = {name: tuple(header["shapes"][name]) for name in PARAM_NAMES}
    groups = []
    for _ in range(3):
        group = {}
        for name in PARAM_NAMES:
            size = int(np.prod(shapes[name]))
            end = offset + 8 * size
            if end > len(payload):
                raise TruncatedStoreError(f"checkpoint payload truncated in {name}")
            group[name] = np.frombuffer(payload[offset:end], dtype=_F64).reshape(shapes[name]).astype(config.dtype)
            offset = end
        groups.append(group)
    if offset != len(payload):
        raise StoreError(f"{len(payload) - offset} trailing bytes in checkpoint")

    values, m, v = groups
    params = MappingParams(*(values[name] for name in PARAM_NAMES), activation=header["activation"])
    state = OptimizerState(m, v, int(header["optimizer_step"]), config.beta1, config.beta2, config.eps)
    return Checkpoint(params, state, config, int(header["step"]), int(header["consecutive_skips"]),
                      header.get("encoder_fingerprint", ""))


# -----------------------------------------------------
# Training loop
# -----------------------------------------------------

@dataclass
class TrainResult:
    params: MappingParams
    state: OptimizerState
    log: List[Dict] = field(default_factory=list)
    stats: FilterStats = field(default_factory=FilterStats)
    steps_run: int = 0
    skipped_steps: int = 0
    encoder_fingerprint_before: str = ""
    encoder_fingerprint_after: str = ""
    checkpoints: List[str] = field(default_factory=list)


def training_pairs(store: EmbeddingStore) -> List[Tuple[ImageRecord, List[CaptionRecord]]]:
    pairs = [(img, store.captions_for(img.id)) for img in store.captioned_images()]
    if not pairs:
        raise StoreError("store has no captioned images to train on")
    return pairs


def epoch_order(pairs, seed: int, epoch: int) -> List[Tuple[ImageRecord, CaptionRecord]]:
    rng = substream(seed, "batch", epoch)
    order = rng.permutation(len(pairs))
    picked = []
    for idx in order:
        image, captions = pairs[int(idx)]
        picked.append((image, captions[int(rng.integers(len(captions)))]))
    return picked


def train(store: EmbeddingStore, encoders: FrozenEncoders, config: TrainConfig,
          log_path: Optional[str] = None, checkpoint_dir: Optional[str] = None,
          resume_from: Optional[str] = None) -> TrainResult:
    """
    Train the mapping network on pseudo triplets built from ``store``.

    Every random choice comes from ``substream(config.seed, ...)`` keyed by
    epoch or step, so a run resumed from a checkpoint follows the same
    trajectory as an uninterrupted one.

    Args:
        store: Captioned images with crop candidates
        encoders: Frozen encoders (never modified)
        config: Training settings
        log_path: Optional JSON-lines step log (appended to when resuming)
        checkpoint_dir: Where ``step_XXXXXX.di2k`` and ``final.di2k`` go
        resume_from: Checkpoint to continue from

    Returns:
        TrainResult
    """
    config.validate()
    if store.d != encoders.d:
        raise DimensionMismatchError(f"store d={store.d} but encoders d={encoders.d}")
    pairs = training_pairs(store)
    if len(pairs) < config.batch_size:
        raise InvalidInputError(f"{len(pairs)} captioned images cannot fill a batch of {config.batch_size}")
    steps_per_epoch = len(pairs) // config.batch_size
    fingerprint = encoders.fingerprint()

    if resume_from:
        ckpt = load_checkpoint(resume_from)
        if ckpt.encoder_fingerprint != fingerprint:
            raise TrainingAbortedError(
                f"{resume_from} was trained against different frozen encoders "
                f"(fingerprint {ckpt.encoder_fingerprint[:12] or 'none'} vs {fingerprint[:12]})")
        if config_hash(ckpt.config) != config_hash(config):
            logger.warning("Resuming with a config that differs from the checkpoint's")
        params, state, start, consecutive = ckpt.params, ckpt.state, ckpt.step, ckpt.consecutive_skips
        if params.W1.dtype != config.dtype:
            params = params.astype(config.dtype)
            state.m = {name: arr.astype(config.dtype) for name, arr in state.m.items()}
            state.v = {name: arr.astype(config.dtype) for name, arr in state.v.items()}
        logger.info(f"Resumed from {resume_from} at step {start}")
    else:
        params = init_mapping(encoders.d, encoders.token_dim, substream(config.seed, "init"),
                              config.mapping.hidden_dim, config.mapping.activation, config.dtype)
        state = init_optimizer(params, config)
        start, consecutive = 0, 0

    result = TrainResult(params, state, encoder_fingerprint_before=fingerprint)
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
    log_file = open(log_path, "a" if resume_from else "w", encoding="utf-8") if log_path else None
    epoch, order = -1, []
    try:
        for step in range(start, config.total_steps):
            if step // steps_per_epoch != epoch:
                epoch = step // steps_per_epoch
                order = epoch_order(pairs, config.seed, epoch)
            pos = (step % steps_per_epoch) * config.batch_size
            batch = order[pos:pos + config.batch_size]

            triplets = construct_pseudo_triplets(
                batch, substream(config.seed, "crop", step), config.ptc,
                mixture_rng=substream(config.seed, "mixture", step), stats=result.stats)

            entry = {"step": step, "n_triplets": len(triplets)}
            if len(triplets) < 2:
                consecutive += 1
                result.skipped_steps += 1
                entry.update(l_compose=None, l_align=None, l_total=None, grad_norm=None, skipped=True)
                if consecutive > config.max_skipped_steps:
                    raise TrainingAbortedError(
                        f"{consecutive} consecutive batches kept fewer than 2 pseudo triplets "
                        f"(last at step {step}); check the crop range and filters")
            else:
                consecutive = 0
                breakdown, grads = total_loss_and_grads(params, triplets, encoders, config.loss)
                entry.update(l_compose=breakdown.l_compose, l_align=breakdown.l_align,
                             l_total=breakdown.l_total, grad_norm=grad_norm(grads), skipped=False)
                adamw_step(params, grads, state, lr_at_step(step + 1, config), config)

            result.log.append(entry)
            result.steps_run += 1
            if log_file:
                log_file.write(json.dumps(entry, sort_keys=True) + "\n")
            if config.log_every and (step + 1) % config.log_every == 0:
                logger.info(f"step {step + 1}/{config.total_steps}: l_total={entry['l_total']} "
                            f"triplets={len(triplets)}")
            if checkpoint_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                path = os.path.join(checkpoint_dir, f"step_{step + 1:06d}.di2k")
                save_checkpoint(path, Checkpoint(params, state, config, step + 1, consecutive, fingerprint))
                result.checkpoints.append(path)
    finally:
        if log_file:
            log_file.close()

    if checkpoint_dir:
        path = os.path.join(checkpoint_dir, "final.di2k")
        save_checkpoint(path, Checkpoint(params, state, config, max(start, config.total_steps),
                                         consecutive, fingerprint))
        result.checkpoints.append(path)

    result.encoder_fingerprint_after = encoders.fingerprint()
    if result.encoder_fingerprint_after != fingerprint:
        raise TrainingAbortedError("frozen encoder parameters changed during training")
    logger.info(f"Training finished: {result.steps_run} steps run, {result.skipped_steps} skipped")
    return result
