"""
Small encoder-decoder lesion segmenter written directly in numpy.

Topology (channels, spatial size):

    x (1, H) -> conv3x3 8 -> ReLU = e1 (8, H) -> maxpool
             -> conv3x3 16 -> ReLU = e2 (16, H/2) -> maxpool
             -> conv3x3 16 (bottleneck, linear) (16, H/4)
             -> upsample, concat e2 -> conv3x3 8 -> ReLU (8, H/2)
             -> upsample, concat e1 -> conv3x3 8 -> ReLU (8, H)
             -> conv1x1 2 -> softmax

Weights are stored as float32; every forward and backward pass runs in
float64. Gradients are exact derivatives of the soft dice loss.
"""
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, model_validator

from motionbias.curriculum import OrderingStrategy, order_epoch
from motionbias.dataset import AugmentConfig, augment_random
from motionbias.errors import ShapeError, ValidationError
from motionbias.logger import logger
from motionbias.rng import Stream, make_rng
from motionbias.tensors import CaseRecord, as_image, as_mask, read_tensor, write_tensor

SegmenterParams = Dict[str, np.ndarray]

PARAM_SHAPES: Dict[str, Tuple[int, ...]] = {
    "enc1.weight": (8, 1, 3, 3),
    "enc1.bias": (8,),
    "enc2.weight": (16, 8, 3, 3),
    "enc2.bias": (16,),
    "bottleneck.weight": (16, 16, 3, 3),
    "bottleneck.bias": (16,),
    "dec1.weight": (8, 32, 3, 3),
    "dec1.bias": (8,),
    "dec2.weight": (8, 16, 3, 3),
    "dec2.bias": (8,),
    "head.weight": (2, 8, 1, 1),
    "head.bias": (2,),
}

DICE_SMOOTH = 1.0


def parameter_count() -> int:
    return int(sum(np.prod(shape) for shape in PARAM_SHAPES.values()))


def describe() -> List[Tuple[str, Tuple[int, ...]]]:
    return list(PARAM_SHAPES.items())


def init_params(rng: np.random.Generator) -> SegmenterParams:
    """He-uniform weights, zero biases."""
    params: SegmenterParams = {}
    for name, shape in PARAM_SHAPES.items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return params


def zero_params(dtype=np.float32) -> SegmenterParams:
    return {name: np.zeros(shape, dtype=dtype) for name, shape in PARAM_SHAPES.items()}


def _check_params(params: SegmenterParams) -> None:
    for name, shape in PARAM_SHAPES.items():
        if name not in params:
            raise ValidationError(f"missing parameter {name}")
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"parameter {name} has shape {params[name].shape}, expected {shape}")


# ---------------------------------------------------------------------------
# Layers (N, C, H, W)
# ---------------------------------------------------------------------------

def _conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    n, c, h, w = x.shape
    out_channels, _, k, _ = weight.shape
    pad = k // 2
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))  # (N, C, H, W, k, k)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)
    wmat = weight.reshape(out_channels, -1)
    out = cols @ wmat.T + bias
    return out.reshape(n, h, w, out_channels).transpose(0, 3, 1, 2), (x.shape, cols, wmat, k)


def _conv_backward(dout: np.ndarray, cache, need_dx: bool = True):
    (n, c, h, w), cols, wmat, k = cache
    out_channels = wmat.shape[0]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, out_channels)
    dweight = (d2.T @ cols).reshape(out_channels, c, k, k)
    dbias = d2.sum(axis=0)
    if not need_dx:
        return None, dweight, dbias
    pad = k // 2
    dcols = (d2 @ wmat).reshape(n, h, w, c, k, k)
    dpadded = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            dpadded[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dpadded[:, :, pad:pad + h, pad:pad + w], dweight, dbias


def _pool_forward(x: np.ndarray):
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def _pool_backward(dout: np.ndarray, cache):
    (n, c, h, w), idx = cache
    dblocks = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(dblocks, idx[..., None], dout[..., None], axis=-1)
    return dblocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def _upsample(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def _upsample_backward(dout: np.ndarray) -> np.ndarray:
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _as_batch(images) -> np.ndarray:
    batch = np.asarray(images, dtype=np.float64)
    if batch.ndim == 2:
        batch = batch[None]
    if batch.ndim != 3:
        raise ShapeError(f"expected (N, H, W) images, got shape {batch.shape}")
    _, h, w = batch.shape
    if h % 4 or w % 4:
        raise ShapeError(f"image dimensions {h}x{w} must be divisible by 4")
    return batch[:, None]


def _forward_cached(params: SegmenterParams, x: np.ndarray):
    p = {k: v.astype(np.float64) for k, v in params.items()}
    cache = {}
    z1, cache["enc1"] = _conv_forward(x, p["enc1.weight"], p["enc1.bias"])
    a1 = np.maximum(z1, 0.0)
    p1, cache["pool1"] = _pool_forward(a1)
    z2, cache["enc2"] = _conv_forward(p1, p["enc2.weight"], p["enc2.bias"])
    a2 = np.maximum(z2, 0.0)
    p2, cache["pool2"] = _pool_forward(a2)
    zb, cache["bottleneck"] = _conv_forward(p2, p["bottleneck.weight"], p["bottleneck.bias"])
    c1 = np.concatenate([_upsample(zb), a2], axis=1)
    z3, cache["dec1"] = _conv_forward(c1, p["dec1.weight"], p["dec1.bias"])
    a3 = np.maximum(z3, 0.0)
    c2 = np.concatenate([_upsample(a3), a1], axis=1)
    z4, cache["dec2"] = _conv_forward(c2, p["dec2.weight"], p["dec2.bias"])
    a4 = np.maximum(z4, 0.0)
    logits, cache["head"] = _conv_forward(a4, p["head.weight"], p["head.bias"])
    cache.update(z1=z1, z2=z2, z3=z3, z4=z4)
    return _softmax(logits), cache


def _backward_cached(dlogits: np.ndarray, cache) -> SegmenterParams:
    grads: SegmenterParams = {}
    da4, grads["head.weight"], grads["head.bias"] = _conv_backward(dlogits, cache["head"])
    dz4 = da4 * (cache["z4"] > 0)
    dc2, grads["dec2.weight"], grads["dec2.bias"] = _conv_backward(dz4, cache["dec2"])
    up2_channels = dc2.shape[1] // 2
    da3 = _upsample_backward(dc2[:, :up2_channels])
    da1_skip = dc2[:, up2_channels:]
    dz3 = da3 * (cache["z3"] > 0)
    dc1, grads["dec1.weight"], grads["dec1.bias"] = _conv_backward(dz3, cache["dec1"])
    up1_channels = dc1.shape[1] // 2
    dzb = _upsample_backward(dc1[:, :up1_channels])
    da2_skip = dc1[:, up1_channels:]
    dp2, grads["bottleneck.weight"], grads["bottleneck.bias"] = _conv_backward(dzb, cache["bottleneck"])
    dz2 = (_pool_backward(dp2, cache["pool2"]) + da2_skip) * (cache["z2"] > 0)
    dp1, grads["enc2.weight"], grads["enc2.bias"] = _conv_backward(dz2, cache["enc2"])
    dz1 = (_pool_backward(dp1, cache["pool1"]) + da1_skip) * (cache["z1"] > 0)
    _, grads["enc1.weight"], grads["enc1.bias"] = _conv_backward(dz1, cache["enc1"], need_dx=False)
    return {name: grads[name] for name in PARAM_SHAPES}


# ---------------------------------------------------------------------------
# Public model API
# ---------------------------------------------------------------------------

def forward(params: SegmenterParams, image) -> np.ndarray:
    """Per-pixel class probabilities, shape (H, W, 2); channel 1 is lesion."""
    _check_params(params)
    probs, _ = _forward_cached(params, _as_batch(as_image(image)))
    return probs[0].transpose(1, 2, 0)


def forward_batch(params: SegmenterParams, images) -> np.ndarray:
    """Lesion probabilities for a stack of images, shape (N, H, W)."""
    _check_params(params)
    probs, _ = _forward_cached(params, _as_batch(images))
    return probs[:, 1]


def soft_dice_loss(probs, target, smooth: float = DICE_SMOOTH) -> float:
    """1 - (2 sum(p g) + s) / (sum(p^2) + sum(g^2) + s)."""
    p = np.asarray(probs, dtype=np.float64)
    g = np.asarray(target, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"probabilities {p.shape} and target {g.shape} differ in shape")
    numerator = 2.0 * np.sum(p * g) + smooth
    denominator = np.sum(p * p) + np.sum(g * g) + smooth
    return float(1.0 - numerator / denominator)


def _dice_grad(p: np.ndarray, g: np.ndarray, smooth: float) -> np.ndarray:
    numerator = 2.0 * np.sum(p * g) + smooth
    denominator = np.sum(p * p) + np.sum(g * g) + smooth
    return -(2.0 * g * denominator - numerator * 2.0 * p) / denominator ** 2


def batch_loss(params: SegmenterParams, images, targets, smooth: float = DICE_SMOOTH) -> float:
    """Mean per-image soft dice loss."""
    fg = forward_batch(params, images)
    g = np.asarray(targets, dtype=np.float64).reshape(fg.shape)
    return float(np.mean([soft_dice_loss(fg[i], g[i], smooth) for i in range(len(fg))]))


def loss_and_grads(params: SegmenterParams, images, targets,
                   smooth: float = DICE_SMOOTH) -> Tuple[float, SegmenterParams]:
    """Mean per-image soft dice loss and its exact gradient for a batch."""
    _check_params(params)
    x = _as_batch(images)
    g = np.asarray(targets, dtype=np.float64).reshape(x.shape[0], *x.shape[2:])
    probs, cache = _forward_cached(params, x)
    fg = probs[:, 1]
    count = fg.shape[0]
    losses = [soft_dice_loss(fg[i], g[i], smooth) for i in range(count)]
    dfg = np.stack([_dice_grad(fg[i], g[i], smooth) for i in range(count)]) / count
    # two-class softmax: d p1 / d z1 = p1 (1 - p1) = -d p1 / d z0
    local = dfg * fg * (1.0 - fg)
    dlogits = np.stack([-local, local], axis=1)
    return float(np.mean(losses)), _backward_cached(dlogits, cache)


def backward(params: SegmenterParams, image, target) -> SegmenterParams:
    """Gradient of soft_dice_loss(forward(params, image)[..., 1], target)."""
    _, grads = loss_and_grads(params, as_image(image)[None], as_mask(target)[None])
    return grads


def predict_mask(params: SegmenterParams, image) -> np.ndarray:
    """Argmax over the two classes; ties go to background. No post-processing."""
    probs = forward(params, image)
    return (probs[..., 1] > probs[..., 0]).astype(np.uint8)


def predict_masks(params: SegmenterParams, images: Sequence[np.ndarray], threads: int = 1) -> List[np.ndarray]:
    """predict_mask over many images; results keep input order for any thread count."""
    if threads <= 1:
        return [predict_mask(params, image) for image in images]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda image: predict_mask(params, image), images))


def evaluate_loss(params: SegmenterParams, images: Sequence[np.ndarray], targets: Sequence[np.ndarray],
                  threads: int = 1) -> float:
    """Mean soft dice loss; per-image losses are reduced in input order."""
    def one(pair):
        image, target = pair
        return soft_dice_loss(forward(params, image)[..., 1], target)

    pairs = list(zip(images, targets))
    if threads <= 1:
        losses = [one(p) for p in pairs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            losses = list(pool.map(one, pairs))
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: Dict[str, np.ndarray], lr: float = 1e-3) -> "AdamState":
        zeros = {k: np.zeros(np.shape(p), dtype=np.float64) for k, p in params.items()}
        return cls(lr=lr, m=zeros, v={k: z.copy() for k, z in zeros.items()})


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: AdamState) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are not modified."""
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(value) or state.m[name].shape != g.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {np.shape(value)}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        theta = np.asarray(value, dtype=np.float64) - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        new_params[name] = theta.astype(np.asarray(value).dtype)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(state.lr, state.beta1, state.beta2, state.epsilon, t, new_m, new_v)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    max_epochs: int = Field(default=30, ge=1)
    patience: int = Field(default=7, ge=1)
    batch_size: int = Field(default=8, ge=4, le=16)
    lr: float = Field(default=1e-3, gt=0)
    strategy: OrderingStrategy = OrderingStrategy.SHUFFLED
    seed: int = Field(default=7, ge=0, le=2**64 - 1)
    min_delta: float = Field(default=1e-6, ge=0)
    staged_curriculum: bool = False
    augment: AugmentConfig = AugmentConfig()
    threads: int = Field(default=1, ge=1)


class TrainLog(BaseModel):
    train_loss: List[float] = []
    val_loss: List[float] = []
    # seconds per epoch, left out of every dump
    wall_time: List[float] = Field(default=[], exclude=True)
    stopped_epoch: int = 0
    best_epoch: int = 0

    @model_validator(mode="after")
    def _consistent(self):
        if len(self.train_loss) != len(self.val_loss):
            raise ValueError("per-epoch series must have equal length")
        if self.wall_time and len(self.wall_time) != len(self.train_loss):
            raise ValueError("wall_time must be empty or one entry per epoch")
        if self.best_epoch > self.stopped_epoch:
            raise ValueError("best_epoch cannot come after stopped_epoch")
        return self


class EarlyStopping:
    """Stop once validation loss has not strictly improved for ``patience`` epochs."""

    def __init__(self, patience: int, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best_loss = float("inf")
        self.best_epoch = 0
        self.stale_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record an epoch; returns True when it is the new best."""
        if loss < self.best_loss - self.min_delta:
            self.best_loss = loss
            self.best_epoch = epoch
            self.stale_epochs = 0
            return True
        self.stale_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale_epochs >= self.patience


def fit(train_cases: Sequence[CaseRecord], val_cases: Sequence[CaseRecord],
        cfg: TrainConfig = TrainConfig()) -> Tuple[SegmenterParams, TrainLog]:
    """Train from scratch; returns the parameters of the best validation epoch."""
    if not train_cases or not val_cases:
        raise ValidationError(
            f"training needs non-empty train and val sets, got {len(train_cases)} and {len(val_cases)}"
        )
    _as_batch(train_cases[0].image)

    params = init_params(make_rng(cfg.seed, Stream.INIT))
    state = AdamState.fresh(params, cfg.lr)
    best_params = {k: v.copy() for k, v in params.items()}
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    val_images = [c.image for c in val_cases]
    val_targets = [c.lesion_mask for c in val_cases]
    train_loss, val_loss, wall_time = [], [], []

    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        order = order_epoch(train_cases, cfg.strategy, epoch - 1,
                            make_rng(cfg.seed, Stream.ORDER, epoch), staged=cfg.staged_curriculum)
        aug_rng = make_rng(cfg.seed, Stream.AUGMENT, epoch)
        weighted = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            pairs = [augment_random(c.image, c.lesion_mask, aug_rng, cfg.augment) for c in batch]
            images = np.stack([p[0] for p in pairs])
            targets = np.stack([p[1] for p in pairs])
            loss, grads = loss_and_grads(params, images, targets)
            params, state = adam_step(params, grads, state)
            weighted += loss * len(batch)

        train_loss.append(weighted / max(len(order), 1))
        val_loss.append(evaluate_loss(params, val_images, val_targets, cfg.threads))
        wall_time.append(time.perf_counter() - started)
        improved = stopper.update(epoch, val_loss[-1])
        if improved:
            best_params = {k: v.copy() for k, v in params.items()}
        logger.epoch(epoch, cfg.max_epochs, train_loss[-1], val_loss[-1], improved, wall_time[-1])
        if stopper.should_stop:
            logger.early_stop(epoch, stopper.best_epoch, stopper.best_loss)
            break

    log = TrainLog(train_loss=train_loss, val_loss=val_loss, wall_time=wall_time,
                   stopped_epoch=epoch, best_epoch=stopper.best_epoch)
    return best_params, log


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(directory, params: SegmenterParams, extra: Optional[Dict] = None) -> None:
    """One MRT1 matrix per parameter plus index.json with the true shapes."""
    _check_params(params)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, shape in PARAM_SHAPES.items():
        filename = f"{name}.mrt"
        matrix = np.asarray(params[name], dtype=np.float32).reshape(shape[0] if len(shape) > 1 else 1, -1)
        write_tensor(directory / filename, matrix)
        entries.append({"name": name, "file": filename, "shape": list(shape)})
    index = {"format_version": CHECKPOINT_VERSION, "tensors": entries}
    if extra:
        index["extra"] = extra
    (directory / "index.json").write_text(json.dumps(index, indent=2) + "\n")


def load_checkpoint(directory) -> SegmenterParams:
    directory = Path(directory)
    try:
        index = json.loads((directory / "index.json").read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"{directory}/index.json is not valid JSON ({e})") from e
    if index.get("format_version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {index.get('format_version')}")
    params = {}
    for entry in index["tensors"]:
        matrix = read_tensor(directory / entry["file"])
        params[entry["name"]] = matrix.reshape(entry["shape"]).astype(np.float32)
    _check_params(params)
    return params
