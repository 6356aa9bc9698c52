"""Compact encoder-decoder segmentation: model, loss, training, metrics,
checkpoints.

One configurable skip-connection network (base_width and depth as the
capacity knobs) serves all four QC tasks. GroupNorm keeps the forward pass
batch-independent; initialization, batching, cropping, and augmentation all
derive from explicit seeds, so single-threaded runs are bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .collage import Dataset, JitterParams, color_jitter
from .compare import dice as mask_dice

CHECKPOINT_MAGIC = b"SQCM"
CHECKPOINT_VERSION = 1

TASK_CLASS_COUNTS = {"tissue": 3, "blur": 8, "fold": 2, "pen": 2}


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class SegModelConfig:
    class_count: int
    base_width: int = 16
    depth: int = 3
    in_channels: int = 3
    seed: int = 0
    task: str = ""

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.base_width < 1 or self.in_channels < 1:
            raise ValueError("base_width and in_channels must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 600
    batch_size: int = 4
    lr: float = 0.05
    momentum: float = 0.9
    dice_weight: float = 0.5
    crop: int = 256          # random square crop side; 0 trains on full images
    augment: bool = True     # flips/rot90 + color jitter
    val_every: int = 0       # 0 disables periodic validation
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.dice_weight <= 1.0:
            raise ValueError("dice_weight must be in [0, 1]")


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(channels, 8), channels)


class _ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = _gn(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = _gn(cout)

    def forward(self, x):
        x = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.norm2(self.conv2(x)))


class SegModel(nn.Module):
    """Encoder-decoder with skip connections; logits keep the input's
    spatial dims (sides must be divisible by 2^depth)."""

    def __init__(self, config: SegModelConfig):
        super().__init__()
        self.config = config
        self.step = 0
        w, d = config.base_width, config.depth
        widths = [w * 2**i for i in range(d)]
        self.encoders = nn.ModuleList()
        cin = config.in_channels
        for cw in widths:
            self.encoders.append(_ConvBlock(cin, cw))
            cin = cw
        self.bottleneck = _ConvBlock(widths[-1], w * 2**d)
        self.decoders = nn.ModuleList()
        cin = w * 2**d
        for cw in reversed(widths):
            self.decoders.append(_ConvBlock(cin + cw, cw))
            cin = cw
        self.head = nn.Conv2d(widths[0], config.class_count, 1)
        _init_weights(self, config.seed)

    def forward(self, x):
        n, c, h, wdt = x.shape
        div = 2 ** self.config.depth
        if c != self.config.in_channels:
            raise ValueError(f"expected {self.config.in_channels} input channels, got {c}")
        if h % div or wdt % div:
            raise ValueError(f"input sides {h}x{wdt} must be divisible by {div}")
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x)


def _init_weights(model: nn.Module, seed: int) -> None:
    """Fan-in-scaled normal init (std = sqrt(2 / fan_in)) for conv kernels,
    zero biases, unit norm gains; deterministic per seed."""
    g = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            with torch.no_grad():
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=g)
                m.bias.zero_()
        elif isinstance(m, nn.GroupNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def init_model(cfg: SegModelConfig) -> SegModel:
    return SegModel(cfg)


def segmentation_loss(logits: torch.Tensor, target: torch.Tensor,
                      dice_weight: float = 0.5) -> torch.Tensor:
    """(1 - w) * mean pixel cross-entropy + w * (1 - mean soft-Dice).

    Soft-Dice is computed per class over the whole batch with +1 smoothing,
    so it is exactly 1 for a perfect one-hot prediction.
    """
    if not 0.0 <= dice_weight <= 1.0:
        raise ValueError("dice_weight must be in [0, 1]")
    c = logits.shape[1]
    if target.min() < 0 or target.max() >= c:
        raise ValueError(f"label ids must be in [0, {c}), got "
                         f"[{int(target.min())}, {int(target.max())}]")
    ce = F.cross_entropy(logits, target)
    probs = F.softmax(logits, dim=1)
    onehot = F.one_hot(target, c).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    soft = (2.0 * (probs * onehot).sum(dims) + 1.0) / (probs.sum(dims) + onehot.sum(dims) + 1.0)
    return (1.0 - dice_weight) * ce + dice_weight * (1.0 - soft.mean())


# -- training ---------------------------------------------------------------------


def cosine_lr(base_lr: float, step: int, total: int) -> float:
    if total <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total))


def make_optimizer(model: SegModel, tcfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=tcfg.lr, momentum=tcfg.momentum)


def _augmented(img: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
               tcfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    if tcfg.crop:
        h, w = mask.shape
        if h < tcfg.crop or w < tcfg.crop:
            raise ValueError(f"sample {w}x{h} smaller than crop {tcfg.crop}")
        y0 = int(rng.integers(0, h - tcfg.crop + 1))
        x0 = int(rng.integers(0, w - tcfg.crop + 1))
        img = img[y0 : y0 + tcfg.crop, x0 : x0 + tcfg.crop]
        mask = mask[y0 : y0 + tcfg.crop, x0 : x0 + tcfg.crop]
    if tcfg.augment:
        k = int(rng.integers(0, 4))
        if k:
            img = np.rot90(img, k, axes=(0, 1))
            mask = np.rot90(mask, k)
        if rng.integers(0, 2):
            img = img[:, ::-1]
            mask = mask[:, ::-1]
        img = color_jitter(np.ascontiguousarray(img),
                           JitterParams(seed=int(rng.integers(0, 2**63))))
    return np.ascontiguousarray(img), np.ascontiguousarray(mask)


def _to_batch(images: list[np.ndarray], masks: list[np.ndarray]):
    x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float().div_(255.0)
    y = torch.from_numpy(np.stack(masks).astype(np.int64))
    return x, y


def train_step(model: SegModel, images: list[np.ndarray], masks: list[np.ndarray],
               tcfg: TrainConfig, optimizer: torch.optim.Optimizer,
               lr_now: float | None = None) -> float:
    if lr_now is not None:
        for grp in optimizer.param_groups:
            grp["lr"] = lr_now
    x, y = _to_batch(images, masks)
    loss = segmentation_loss(model(x), y, tcfg.dice_weight)
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite loss {float(loss.detach())} at step {model.step} "
                           f"(lr={lr_now if lr_now is not None else tcfg.lr})")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    model.step += 1
    return float(loss.detach())


def train(model: SegModel, train_ds: Dataset, tcfg: TrainConfig,
          val_ds: Dataset | None = None, metrics_path=None) -> dict:
    """SGD with momentum and a cosine-decayed lr; loss history plus metric
    snapshots at every validation event (appended to metrics_path as JSON
    lines when given)."""
    if len(train_ds) == 0:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(tcfg.seed)
    optimizer = make_optimizer(model, tcfg)
    history = {"loss": [], "val": []}
    mf = open(metrics_path, "a") if metrics_path else None
    try:
        for step in range(tcfg.steps):
            idx = rng.integers(0, len(train_ds), size=tcfg.batch_size)
            pairs = [_augmented(train_ds.images[i], train_ds.masks[i], rng, tcfg) for i in idx]
            lr_now = cosine_lr(tcfg.lr, step, tcfg.steps)
            loss = train_step(model, [p[0] for p in pairs], [p[1] for p in pairs],
                              tcfg, optimizer, lr_now)
            history["loss"].append(loss)
            last = step + 1 == tcfg.steps
            if val_ds is not None and tcfg.val_every and ((step + 1) % tcfg.val_every == 0 or last):
                m = evaluate(model, val_ds, model.config.task or train_ds.task)
                event = {"step": model.step, "loss": loss, "mean_dice": m.mean_dice,
                         "per_class_dice": m.per_class_dice}
                if m.auc is not None:
                    event["auc"] = m.auc
                history["val"].append(event)
                if mf:
                    mf.write(json.dumps(event, sort_keys=True) + "\n")
                    mf.flush()
    finally:
        if mf:
            mf.close()
    return history


def split_pool_ids(slide_ids, val_fraction: float = 0.2, seed=0) -> tuple[list[str], list[str]]:
    """Slide-level 80/20 partition: whole source slides, never patches, so no
    slide contributes to both halves."""
    ids = sorted(set(slide_ids))
    if len(ids) < 2:
        raise ValueError("need at least 2 slides to split")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_val = min(len(ids) - 1, max(1, round(val_fraction * len(ids))))
    val = sorted(ids[i] for i in order[:n_val])
    train_ = sorted(ids[i] for i in order[n_val:])
    return train_, val


# -- metrics -----------------------------------------------------------------------


@dataclass
class Metrics:
    task: str
    per_class_dice: list[float]
    mean_dice: float
    auc: float | None = None          # blur: sharp-vs-blurred discrimination
    mae_class: float | None = None    # blur: mean absolute class error
    within_one: float | None = None   # blur: fraction of pixels within +-1 class
    losses: list[float] = field(default_factory=list)


def auc_roc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Exact rank-based AUC with average ranks over ties; None when one
    class is absent."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    npos = int(labels.sum())
    nneg = labels.size - npos
    if npos == 0 or nneg == 0:
        return None
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        ranks[i : j + 1] = 0.5 * (i + j) + 1.0  # average of 1-based ranks i+1..j+1
        i = j + 1
    pos_rank_sum = float(ranks[labels[order]].sum())
    return (pos_rank_sum - npos * (npos + 1) / 2.0) / (npos * nneg)


BLUR_POSITIVE_THRESHOLD = 4  # class >= 4 counts as blurred


def predict_probs(model: SegModel, image: np.ndarray) -> np.ndarray:
    """Softmax class probabilities for one HxWx3 uint8 image, as HxWxC
    float32."""
    x, _ = _to_batch([image], [np.zeros(image.shape[:2], dtype=np.uint8)])
    with torch.no_grad():
        probs = F.softmax(model(x), dim=1)
    return probs[0].permute(1, 2, 0).numpy().astype(np.float32)


def evaluate(model: SegModel, ds: Dataset, task: str) -> Metrics:
    """Per-class Dice on argmax masks pooled over the dataset; blur adds
    expected-class AUC (positive = class >= 4), mean absolute class error,
    and the within-one-class pixel fraction."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    c = model.config.class_count
    preds, truths = [], []
    scores = [] if task == "blur" else None
    with torch.no_grad():
        for img, mask in zip(ds.images, ds.masks):
            x, _ = _to_batch([img], [mask])
            probs = F.softmax(model(x), dim=1)[0]
            preds.append(probs.argmax(dim=0).numpy().astype(np.uint8))
            truths.append(mask)
            if scores is not None:
                k = torch.arange(c, dtype=probs.dtype).view(c, 1, 1)
                scores.append((probs * k).sum(dim=0).numpy())
    # Row-concatenated into one raster so pooled per-class counts feed dice.
    pred = np.stack(preds).reshape(-1, preds[0].shape[-1])
    truth = np.stack(truths).reshape(-1, truths[0].shape[-1])
    per_class = [mask_dice((pred == i).astype(np.uint8), (truth == i).astype(np.uint8))
                 for i in range(c)]
    m = Metrics(task, per_class, float(np.mean(per_class)))
    if scores is not None:
        sc = np.stack(scores)
        m.auc = auc_roc(sc, truth >= BLUR_POSITIVE_THRESHOLD)
        diff = np.abs(pred.astype(np.int64) - truth.astype(np.int64))
        m.mae_class = float(diff.mean())
        m.within_one = float((diff <= 1).mean())
    return m


# -- checkpoints --------------------------------------------------------------------


def _state_arrays(model: SegModel) -> list[tuple[str, np.ndarray]]:
    return [(name, t.detach().numpy().astype("<f4"))
            for name, t in model.state_dict().items()]


def model_fingerprint(model: SegModel) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(asdict(model.config), sort_keys=True).encode())
    for name, arr in _state_arrays(model):
        h.update(name.encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(model: SegModel, path) -> Path:
    """magic | version | header length | JSON header | raw little-endian
    float32 blobs | sha256 of everything before it."""
    arrays = _state_arrays(model)
    header = json.dumps({
        "config": asdict(model.config),
        "step": model.step,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }, sort_keys=True).encode()
    payload = bytearray()
    payload += CHECKPOINT_MAGIC
    payload += struct.pack("<I", CHECKPOINT_VERSION)
    payload += struct.pack("<I", len(header))
    payload += header
    for _n, a in arrays:
        payload += a.tobytes()
    payload += hashlib.sha256(bytes(payload)).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(payload))
    return path


def load_checkpoint(path, task: str | None = None,
                    class_count: int | None = None) -> SegModel:
    raw = Path(path).read_bytes()
    if len(raw) < 44 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    if hashlib.sha256(raw[:-32]).digest() != raw[-32:]:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode())
    cfg = SegModelConfig(**header["config"])
    if class_count is not None and cfg.class_count != class_count:
        raise CheckpointError(f"{path}: config mismatch: checkpoint has "
                              f"class_count {cfg.class_count}, task needs {class_count}")
    if task is not None and cfg.task and cfg.task != task:
        raise CheckpointError(f"{path}: config mismatch: checkpoint trained for "
                              f"{cfg.task!r}, requested {task!r}")
    model = SegModel(cfg)
    model.step = int(header["step"])
    offset = 12 + hlen
    state = {}
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        end = offset + 4 * n
        if end > len(raw) - 32:
            raise CheckpointError(f"{path}: blob for {spec['name']} overruns file")
        arr = np.frombuffer(raw[offset:end], dtype="<f4").reshape(spec["shape"])
        state[spec["name"]] = torch.from_numpy(arr.copy())
        offset = end
    expected = model.state_dict()
    if set(state) != set(expected):
        raise CheckpointError(f"{path}: weight names do not match architecture")
    for name, t in expected.items():
        if tuple(state[name].shape) != tuple(t.shape):
            raise CheckpointError(f"{path}: shape mismatch for {name}: "
                                  f"{tuple(state[name].shape)} vs {tuple(t.shape)}")
    model.load_state_dict(state)
    return model
