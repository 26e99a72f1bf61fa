"""Deterministic training loop, Adam optimizer, checkpoints and prediction.

Checkpoint file layout (version 1): magic ``SUNC``, uint16 version, a
uint32-length-prefixed UTF-8 header of ``key=value`` lines describing the
model config and step count, a uint32 record count, then one record per
tensor (uint32 name length, name, uint32 rank, uint32 dims, float32
little-endian data) covering the trainable parameters followed by the
batch-norm running buffers, and finally the trainer RNG state as four
little-endian uint64 words (PCG64 state and increment, low word first).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import NODATA, BitemporalTile
from .errors import (
    CheckpointFormatError,
    ConfigError,
    ContractError,
    NonFiniteLossError,
    ShapeError,
)
from .losses import LossConfig, auto_pos_weight, dice_loss, weighted_bce
from .model import ModelConfig, SiameseUNet, init_model
from .tensor import Tensor, no_grad

CKPT_MAGIC = b"SUNC"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    steps: int = 300
    batch_size: int = 4
    patch_size: int = 64
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    log_every: int = 10

    def validate(self) -> None:
        if self.lr <= 0 or self.adam_eps <= 0:
            raise ConfigError("lr and adam_eps must be positive")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if self.steps < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ConfigError("steps, batch_size and log_every must be positive")
        if self.patch_size % 32:
            raise ConfigError(
                f"patch_size must be a multiple of 32, got {self.patch_size}"
            )
        self.loss.validate()


@dataclass
class TrainLogRecord:
    step: int
    loss: float
    bce: float
    dice: float
    burn_frac: float


@dataclass
class TrainLog:
    records: list[TrainLogRecord] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "loss", "bce", "dice", "burn_frac"])
            for r in self.records:
                writer.writerow(
                    [r.step, repr(r.loss), repr(r.bce), repr(r.dice), repr(r.burn_frac)]
                )


# -- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> None:
    """One Adam update with bias correction; params and moments are
    modified in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError(
            f"adam_step length mismatch: {len(params)} params, "
            f"{len(grads)} grads, {len(state.m)} moment slots"
        )
    b1, b2 = cfg.betas
    state.t += 1
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ContractError(
                f"adam_step shape mismatch: param {p.data.shape}, "
                f"grad {g.shape}, moment {m.shape}"
            )
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


# -- checkpoints --------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    step: int
    rng_words: tuple[int, int, int, int]
    version: int = CKPT_VERSION


def _rng_words(rng: np.random.Generator) -> tuple[int, int, int, int]:
    st = rng.bit_generator.state["state"]
    mask = (1 << 64) - 1
    return (
        st["state"] & mask,
        (st["state"] >> 64) & mask,
        st["inc"] & mask,
        (st["inc"] >> 64) & mask,
    )


def restore_rng(words: tuple[int, int, int, int]) -> np.random.Generator:
    bitgen = np.random.PCG64()
    state = bitgen.state
    state["state"]["state"] = words[0] | (words[1] << 64)
    state["state"]["inc"] = words[2] | (words[3] << 64)
    bitgen.state = state
    return np.random.Generator(bitgen)


def checkpoint_from_model(
    model: SiameseUNet, step: int = 0, rng: np.random.Generator | None = None
) -> Checkpoint:
    words = _rng_words(rng) if rng is not None else (0, 0, 0, 0)
    return Checkpoint(
        config=model.config,
        params={k: v.data.copy() for k, v in model.parameter_list()},
        buffers={k: v.copy() for k, v in model.buffers.items()},
        step=step,
        rng_words=words,
    )


def model_from_checkpoint(ckpt: Checkpoint) -> SiameseUNet:
    model = init_model(ckpt.config, seed=0)
    restore_model(model, ckpt)
    return model


def restore_model(model: SiameseUNet, ckpt: Checkpoint) -> None:
    """Load checkpoint tensors into an existing model; a differing config
    is an error, never a silent reshape."""
    if model.config != ckpt.config:
        raise ConfigError(
            f"checkpoint config {ckpt.config} does not match model config {model.config}"
        )
    if set(ckpt.params) != set(model.params):
        missing = set(model.params) - set(ckpt.params)
        extra = set(ckpt.params) - set(model.params)
        raise CheckpointFormatError(
            f"parameter name mismatch: missing {sorted(missing)}, extra {sorted(extra)}"
        )
    for name, arr in ckpt.params.items():
        model.params[name].data[...] = arr
    for name, arr in ckpt.buffers.items():
        if name not in model.buffers:
            raise CheckpointFormatError(f"unknown buffer {name!r} in checkpoint")
        model.buffers[name][...] = arr


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = (
        f"in_channels={ckpt.config.in_channels}\n"
        f"base_width={ckpt.config.base_width}\n"
        f"step={ckpt.step}\n"
    ).encode()
    chunks = [
        CKPT_MAGIC,
        struct.pack("<H", ckpt.version),
        struct.pack("<I", len(header)),
        header,
    ]
    records = list(ckpt.params.items()) + list(ckpt.buffers.items())
    chunks.append(struct.pack("<I", len(records)))
    for name, arr in records:
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4", copy=False).tobytes())
    chunks.append(struct.pack("<4Q", *ckpt.rng_words))
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()

    def need(off: int, count: int, what: str) -> None:
        if off + count > len(blob):
            raise CheckpointFormatError(
                f"truncated checkpoint: {what} at byte {off} needs {count} bytes, "
                f"file ends at {len(blob)}"
            )

    need(0, 6, "magic and version")
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(
            f"bad magic {blob[:4]!r} at byte 0, expected {CKPT_MAGIC!r}"
        )
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointFormatError(
            f"unsupported checkpoint version {version}, expected {CKPT_VERSION}"
        )
    off = 6
    need(off, 4, "header length")
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    need(off, hlen, "header")
    fields_: dict[str, int] = {}
    for line in blob[off : off + hlen].decode().splitlines():
        key, _, value = line.partition("=")
        fields_[key] = int(value)
    off += hlen
    try:
        config = ModelConfig(
            in_channels=fields_["in_channels"], base_width=fields_["base_width"]
        )
        step = fields_["step"]
    except KeyError as e:
        raise CheckpointFormatError(f"header missing key {e}") from None

    need(off, 4, "record count")
    (n_records,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_records):
        need(off, 4, "name length")
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        need(off, nlen, "name")
        name = blob[off : off + nlen].decode()
        off += nlen
        need(off, 4, "rank")
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        if rank > 8:
            raise CheckpointFormatError(f"implausible rank {rank} at byte {off - 4}")
        need(off, 4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        need(off, 4 * count, f"data of {name!r}")
        tensors[name] = (
            np.frombuffer(blob, dtype="<f4", count=count, offset=off)
            .reshape(dims)
            .copy()
        )
        off += 4 * count
    need(off, 32, "rng state")
    words = struct.unpack_from("<4Q", blob, off)
    off += 32
    if off != len(blob):
        raise CheckpointFormatError(
            f"trailing {len(blob) - off} bytes after byte {off}"
        )

    params = {k: v for k, v in tensors.items() if "running_" not in k}
    buffers = {k: v for k, v in tensors.items() if "running_" in k}
    return Checkpoint(
        config=config, params=params, buffers=buffers, step=step, rng_words=words
    )


# -- training loop ------------------------------------------------------------


class _TileSampler:
    """Epoch-style tile order: a seeded shuffle, reshuffled when exhausted,
    so every tile is visited equally often."""

    def __init__(self, n_tiles: int, rng: np.random.Generator):
        self.n = n_tiles
        self.rng = rng
        self.queue: list[int] = []

    def next_index(self) -> int:
        if not self.queue:
            self.queue = list(self.rng.permutation(self.n))
        return self.queue.pop(0)


def _assemble_batch(
    tiles: list[BitemporalTile],
    cfg: TrainConfig,
    sampler: _TileSampler,
    rng: np.random.Generator,
):
    pre, post, tgt = [], [], []
    ps = cfg.patch_size
    for _ in range(cfg.batch_size):
        tile = tiles[sampler.next_index()]
        if tile.height < ps or tile.width < ps:
            raise ShapeError(
                f"tile {tile.height}x{tile.width} smaller than patch_size {ps}"
            )
        y = int(rng.integers(0, tile.height - ps + 1))
        x = int(rng.integers(0, tile.width - ps + 1))
        pre.append(tile.pre[:, y : y + ps, x : x + ps])
        post.append(tile.post[:, y : y + ps, x : x + ps])
        tgt.append(tile.mask[None, y : y + ps, x : x + ps])
    return np.stack(pre), np.stack(post), np.stack(tgt)


def train(
    model: SiameseUNet, tiles: list[BitemporalTile], cfg: TrainConfig
) -> tuple[Checkpoint, TrainLog]:
    """Run cfg.steps Adam iterations of the hybrid loss on random patches.

    Deterministic in (model init, cfg.seed).  A non-finite loss aborts with
    the failing step and the last finite loss value.
    """
    cfg.validate()
    if not tiles:
        raise ContractError("train requires at least one tile")
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    sampler = _TileSampler(len(tiles), rng)
    params = [t for _, t in model.parameter_list()]
    state = AdamState.for_params(params)
    log = TrainLog()
    last_finite: float | None = None

    for step in range(1, cfg.steps + 1):
        pre_b, post_b, tgt = _assemble_batch(tiles, cfg, sampler, rng)
        model.zero_grad()
        probs = model.forward(Tensor(pre_b), Tensor(post_b), mode="train")

        alpha = cfg.loss.alpha
        w = (
            cfg.loss.pos_weight
            if cfg.loss.pos_weight is not None
            else auto_pos_weight(tgt)
        )
        bce = weighted_bce(probs, tgt, w)
        dce = dice_loss(probs, tgt, cfg.loss.dice_eps)
        total = alpha * bce + (1.0 - alpha) * dce

        loss_val = total.item()
        if not np.isfinite(loss_val):
            raise NonFiniteLossError(step, last_finite)
        last_finite = loss_val

        total.backward()
        adam_step(params, [p.grad for p in params], state, cfg)

        if step == 1 or step % cfg.log_every == 0 or step == cfg.steps:
            valid = tgt != NODATA
            burn = float((tgt == 1).sum() / max(valid.sum(), 1))
            log.records.append(
                TrainLogRecord(step, loss_val, bce.item(), dce.item(), burn)
            )

    return checkpoint_from_model(model, step=cfg.steps, rng=rng), log


def predict(model: SiameseUNet, tile: BitemporalTile, threshold: float = 0.5) -> np.ndarray:
    """Eval-mode forward pass binarized at the threshold; nodata pixels in
    the tile mask propagate to the output as 255."""
    if not 0.0 <= threshold < 1.0:
        raise ConfigError(f"threshold must lie in [0, 1), got {threshold}")
    with no_grad():
        probs = model.forward(
            Tensor(tile.pre[None]), Tensor(tile.post[None]), mode="eval"
        )
    out = (probs.data[0, 0] >= threshold).astype(np.uint8)
    out[tile.mask == NODATA] = NODATA
    return out
