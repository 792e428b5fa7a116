"""Loss, optimizers, deterministic training loop and binary checkpoints.

The segmentation loss is BCE + Dice on the dense probability map.  Training
is fully deterministic given (model seed, data seed, train seed): the batch
order for epoch e is drawn from a generator derived from (seed, e), so a
resumed run continues the identical trajectory.
"""

from __future__ import annotations

import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dataset import load_split
from .model import Model, ModelConfig, build_model, forward
from .tensor import Tensor

BCE_EPS = 1e-7
DICE_SMOOTH = 1.0

CHECKPOINT_MAGIC = b"ATSK"
CHECKPOINT_VERSION = 1
_TAG_F64 = 0
_TAG_JSON = 1


class CheckpointError(RuntimeError):
    """Corrupt, truncated or incompatible checkpoint file."""


class TrainingError(RuntimeError):
    """Training aborted (NaN loss or I/O failure)."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    optimizer: str = "sgd"
    lr: float | None = None  # defaults: sgd 0.01, adam 0.001
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    w_bce: float = 1.0
    w_dice: float = 1.0
    checkpoint_path: str = "model.ckpt"
    checkpoint_every: int = 0  # 0 = only at the end

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr is None:
            self.lr = 0.01 if self.optimizer == "sgd" else 0.001
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


def seg_loss(prob: Tensor, gt_mask: Tensor,
             w_bce: float = 1.0, w_dice: float = 1.0) -> Tensor:
    """w_bce*BCE + w_dice*Dice on a probability map and a binary target.

    BCE clamps p to [eps, 1-eps] with eps=1e-7; Dice uses smoothing 1.
    """
    if prob.shape != gt_mask.shape:
        raise T.ShapeError(f"seg_loss: shapes differ, {prob.shape} vs {gt_mask.shape}")
    n = prob.data.size
    g = gt_mask.data

    p = T.clamp(prob, BCE_EPS, 1.0 - BCE_EPS)
    log_p = T.log(p)
    log_1p = T.log(T.affine(p, -1.0, 1.0))
    ll = T.elementwise(T.elementwise(T.tensor(g), log_p, "mul"),
                       T.elementwise(T.tensor(1.0 - g), log_1p, "mul"), "add")
    bce = T.affine(T.sum_all(ll), -1.0 / n)

    inter = T.sum_all(T.elementwise(prob, gt_mask, "mul"))
    num = T.affine(inter, 2.0, DICE_SMOOTH)
    den = T.affine(T.sum_all(prob), 1.0, DICE_SMOOTH + float(g.sum()))
    dice = T.affine(T.sdiv(num, den), -1.0, 1.0)

    return T.elementwise(T.affine(bce, w_bce), T.affine(dice, w_dice), "add")


# ---------------------------------------------------------------------------
# optimizers


def init_optimizer_state(params: dict[str, Tensor], cfg: TrainConfig) -> dict:
    state: dict = {"step": 0}
    for name, p in params.items():
        state[f"{name}/m"] = np.zeros_like(p.data)
        if cfg.optimizer == "adam":
            state[f"{name}/v"] = np.zeros_like(p.data)
    return state


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                   state: dict, cfg: TrainConfig) -> None:
    """One in-place SGD-with-momentum or bias-corrected Adam update."""
    state["step"] += 1
    t = state["step"]
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if cfg.optimizer == "sgd":
            v = state[f"{name}/m"]
            v *= cfg.momentum
            v += g
            p.data -= cfg.lr * v
        else:
            m = state[f"{name}/m"]
            v = state[f"{name}/v"]
            m *= cfg.adam_beta1
            m += (1 - cfg.adam_beta1) * g
            v *= cfg.adam_beta2
            v += (1 - cfg.adam_beta2) * g * g
            m_hat = m / (1 - cfg.adam_beta1 ** t)
            v_hat = v / (1 - cfg.adam_beta2 ** t)
            p.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# checkpoints


def _pack_entry(name: str, tag: int, payload: bytes, extents=()) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<BB", tag, len(extents))
    head += b"".join(struct.pack("<I", e) for e in extents)
    return head + struct.pack("<Q", len(payload)) + payload


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    opt_state: dict
    epoch: int
    seed: int
    train_seed: int
    input_size: int
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, model: Model, opt_state: dict, epoch: int,
                    train_seed: int, input_size: int) -> None:
    """Little-endian binary dump: magic, version, entry count, then per
    entry name, dtype tag, rank, extents and raw float64 data (JSON payloads
    use tag 1)."""
    import json

    entries: list[bytes] = []
    meta = {
        "config": model.config.to_dict(),
        "epoch": epoch,
        "model_seed": model.seed,
        "train_seed": train_seed,
        "input_size": input_size,
        "opt_step": opt_state.get("step", 0),
    }
    entries.append(_pack_entry("meta", _TAG_JSON,
                               json.dumps(meta, sort_keys=True).encode("utf-8")))
    for name, p in model.params.items():
        data = np.ascontiguousarray(p.data, dtype="<f8")
        entries.append(_pack_entry(f"param/{name}", _TAG_F64, data.tobytes(),
                                   data.shape))
    for key, val in opt_state.items():
        if key == "step":
            continue
        arr = np.ascontiguousarray(val, dtype="<f8")
        entries.append(_pack_entry(f"opt/{key}", _TAG_F64, arr.tobytes(), arr.shape))

    blob = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(entries))
    blob += b"".join(entries)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint file")
    return data


def load_checkpoint(path) -> Checkpoint:
    import json

    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        raw: dict[str, tuple[int, tuple, bytes]] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
            if nlen > 1 << 20:
                raise CheckpointError(f"{path}: implausible name length {nlen}")
            name = _read_exact(fh, nlen).decode("utf-8")
            tag, rank = struct.unpack("<BB", _read_exact(fh, 2))
            extents = tuple(struct.unpack("<I", _read_exact(fh, 4))[0]
                            for _ in range(rank))
            (plen,) = struct.unpack("<Q", _read_exact(fh, 8))
            if plen > 1 << 32:
                raise CheckpointError(f"{path}: implausible payload length {plen}")
            raw[name] = (tag, extents, _read_exact(fh, plen))
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last entry")

    if "meta" not in raw:
        raise CheckpointError(f"{path}: missing meta entry")
    meta = json.loads(raw["meta"][2].decode("utf-8"))
    config = ModelConfig.from_dict(meta["config"])

    params: dict[str, np.ndarray] = {}
    opt_state: dict = {"step": meta.get("opt_step", 0)}
    for name, (tag, extents, payload) in raw.items():
        if name == "meta":
            continue
        if tag != _TAG_F64:
            raise CheckpointError(f"{path}: unexpected tag {tag} for entry {name!r}")
        arr = np.frombuffer(payload, dtype="<f8").reshape(extents).copy()
        if name.startswith("param/"):
            params[name[len("param/"):]] = arr
        elif name.startswith("opt/"):
            opt_state[name[len("opt/"):]] = arr
        else:
            raise CheckpointError(f"{path}: unknown entry {name!r}")
    return Checkpoint(config=config, params=params, opt_state=opt_state,
                      epoch=meta["epoch"], seed=meta["model_seed"],
                      train_seed=meta["train_seed"],
                      input_size=meta["input_size"], meta=meta)


def restore_model(ckpt: Checkpoint) -> Model:
    """Rebuild the Model and overwrite its parameters from a checkpoint."""
    model = build_model(ckpt.config, ckpt.seed, input_size=ckpt.input_size)
    for name, p in model.params.items():
        if name not in ckpt.params:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        if ckpt.params[name].shape != p.data.shape:
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {ckpt.params[name].shape} "
                f"!= model shape {p.data.shape}")
        p.data[...] = ckpt.params[name]
    return model


# ---------------------------------------------------------------------------
# training loop


def _stack_batch(images, ann_lists, indices):
    imgs = np.stack([images[i] for i in indices])
    size = imgs.shape[-1]
    masks = np.zeros((len(indices), 1, size, size))
    for row, i in enumerate(indices):
        for ann in ann_lists[i]:
            masks[row, 0][ann.mask] = 1.0
    return T.tensor(imgs), T.tensor(masks)


def _epoch_order(seed: int, epoch: int, n: int) -> list[int]:
    rng = np.random.default_rng((seed, epoch))
    order = list(range(n))
    rng.shuffle(order)
    return order


def train(model: Model, data_dir, cfg: TrainConfig,
          start_epoch: int = 0, opt_state: dict | None = None,
          input_size: int | None = None):
    """Train on the manifest's train split; returns (model, per-epoch log).

    The log is a list of dicts with epoch index, mean loss and wall seconds.
    Determinism: the shuffle for epoch e depends only on (cfg.seed, e).
    """
    images, ann_lists, _ids = load_split(data_dir, "train")
    if input_size is None:
        input_size = images[0].shape[-1]
    if opt_state is None:
        opt_state = init_optimizer_state(model.params, cfg)
    n = len(images)
    log: list[dict] = []
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        order = _epoch_order(cfg.seed, epoch, n)
        losses = []
        for b0 in range(0, n, cfg.batch_size):
            batch_idx = order[b0:b0 + cfg.batch_size]
            x, gt = _stack_batch(images, ann_lists, batch_idx)
            prob = forward(model, x)
            loss = seg_loss(prob, gt, cfg.w_bce, cfg.w_dice)
            val = loss.item()
            if not np.isfinite(val):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {b0 // cfg.batch_size}")
            T.backward(loss)
            grads = {name: p.grad for name, p in model.params.items()}
            optimizer_step(model.params, grads, opt_state, cfg)
            for p in model.params.values():
                p.zero_grad()
            losses.append(val)
        seconds = time.perf_counter() - t0
        log.append({"epoch": epoch, "mean_loss": float(np.mean(losses)),
                    "seconds": seconds})
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(cfg.checkpoint_path, model, opt_state, epoch + 1,
                            cfg.seed, input_size)
    save_checkpoint(cfg.checkpoint_path, model, opt_state, cfg.epochs,
                    cfg.seed, input_size)
    return model, log


def write_log_csv(path, log) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,mean_loss,seconds\n")
        for row in log:
            fh.write(f"{row['epoch']},{row['mean_loss']:.12g},{row['seconds']:.4f}\n")
