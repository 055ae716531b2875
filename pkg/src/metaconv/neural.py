"""Shallow hybrid classifier: 12x(7x7) conv -> 2x2 maxpool -> ReLU -> FC.

The convolution layer is the part executed optically; everything else stays
digital.  Training is plain Adam on the negative log-likelihood plus a
balance penalty that drives each kernel's positive and negative total
weight toward equality (a physical requirement of the polarization
subtraction, which assumes equal per-polarization throughput).
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from . import conv as conv_backend
from .errors import DegenerateInputError, DimensionError, FormatError, NumericError

N_CHANNELS = 12
KERNEL_PX = 7
IMAGE_PX = 28
POOLED_PX = IMAGE_PX // 2
FLAT_SIZE = N_CHANNELS * POOLED_PX * POOLED_PX
N_CLASSES = 10
PAD = KERNEL_PX // 2


@dataclass
class HybridModel:
    """Trainable parameters plus training metadata."""

    conv_kernels: np.ndarray          # (12, 7, 7)
    fc_weights: np.ndarray            # (10, 2352)
    fc_bias: np.ndarray               # (10,)
    norm_constant: float = 1.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.conv_kernels.shape != (N_CHANNELS, KERNEL_PX, KERNEL_PX):
            raise DimensionError(
                f"conv kernels must be {(N_CHANNELS, KERNEL_PX, KERNEL_PX)}, "
                f"got {self.conv_kernels.shape}")
        if self.fc_weights.shape != (N_CLASSES, FLAT_SIZE):
            raise DimensionError(f"fc weights must be {(N_CLASSES, FLAT_SIZE)}")
        if self.fc_bias.shape != (N_CLASSES,):
            raise DimensionError("fc bias must have 10 entries")

    def kernels_signed(self):
        from .synthesis import SignedKernel
        return [SignedKernel(self.conv_kernels[c], c) for c in range(N_CHANNELS)]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 128
    balance_weight: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DimensionError("learning rate must be positive")
        if self.epochs < 1:
            raise DimensionError("epochs must be >= 1")


def init_model(seed: int = 0, n_channels: int = N_CHANNELS,
               kernel_px: int = KERNEL_PX, image_px: int = IMAGE_PX) -> HybridModel:
    """Uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)] initialization, seeded."""
    rng = np.random.default_rng(seed)
    flat = n_channels * (image_px // 2) ** 2
    k = rng.uniform(-1, 1, (n_channels, kernel_px, kernel_px)) / kernel_px
    w = rng.uniform(-1, 1, (N_CLASSES, flat)) / np.sqrt(flat)
    b = rng.uniform(-1, 1, N_CLASSES) / np.sqrt(flat)
    return HybridModel(k, w, b, metadata={"seed": seed})


def _forward_batch(model, images: np.ndarray, backend=conv_backend):
    """Shape-generic forward pass; works for the production model and for
    micro-models used in gradient checking (any odd kernel, even image)."""
    B, H, W = images.shape
    kh = model.conv_kernels.shape[1]
    conv = backend.conv2d_forward(np.ascontiguousarray(images),
                                  np.ascontiguousarray(model.conv_kernels),
                                  kh // 2)
    pooled, arg = backend.maxpool2_forward(conv)
    relu = np.maximum(pooled, 0.0)
    flat = relu.reshape(B, -1)
    if flat.shape[1] != model.fc_weights.shape[1]:
        raise DimensionError(
            f"flattened features {flat.shape[1]} != fc input {model.fc_weights.shape[1]}")
    logits = flat @ model.fc_weights.T + model.fc_bias
    return logits, (conv, pooled, arg, relu, flat)


def forward(model, image: np.ndarray, backend=conv_backend):
    """Logits for one image (or a batch); also returns the conv feature maps."""
    img = np.asarray(image, dtype=float)
    single = img.ndim == 2
    batch = img[None] if single else img
    if batch.shape[1] % 2 or batch.shape[2] % 2:
        raise DimensionError("image sides must be even for 2x2 pooling")
    logits, cache = _forward_batch(model, batch, backend)
    feature_maps = cache[0]
    if single:
        return logits[0], feature_maps[0]
    return logits, feature_maps


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss(logits: np.ndarray, labels: np.ndarray, model: HybridModel,
         balance_weight: float) -> float:
    """NLL of the log-softmax plus the per-channel |sum w| balance penalty."""
    lg = np.atleast_2d(logits)
    lab = np.atleast_1d(labels)
    ls = _log_softmax(lg)
    nll = -ls[np.arange(len(lab)), lab].mean()
    bal = np.abs(model.conv_kernels.sum(axis=(1, 2))).sum()
    return float(nll + balance_weight * bal)


def loss_and_grads(model, images: np.ndarray, labels: np.ndarray,
                   balance_weight: float, backend=conv_backend):
    """Total loss and analytic gradients for every parameter group."""
    B, H, W = images.shape
    kh = model.conv_kernels.shape[1]
    logits, (conv, pooled, arg, relu, flat) = _forward_batch(model, images, backend)
    ls = _log_softmax(logits)
    nll = -ls[np.arange(B), labels].mean()
    bal = np.abs(model.conv_kernels.sum(axis=(1, 2)))
    total = float(nll + balance_weight * bal.sum())

    dlogits = np.exp(ls)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    d_fc_w = dlogits.T @ flat
    d_fc_b = dlogits.sum(axis=0)
    dflat = dlogits @ model.fc_weights
    drelu = dflat.reshape(relu.shape)
    dpool = drelu * (pooled > 0.0)
    dconv = backend.maxpool2_backward(np.ascontiguousarray(dpool), arg, H, W)
    d_k = backend.conv2d_weight_grad(np.ascontiguousarray(images), dconv,
                                     kh, kh, kh // 2)
    d_k += balance_weight * np.sign(model.conv_kernels.sum(axis=(1, 2)))[:, None, None]
    return total, {"conv_kernels": d_k, "fc_weights": d_fc_w, "fc_bias": d_fc_b}


def predict(model: HybridModel, images: np.ndarray, batch: int = 512,
            backend=conv_backend) -> np.ndarray:
    out = np.empty(len(images), dtype=np.int64)
    for i in range(0, len(images), batch):
        logits, _ = _forward_batch(model, images[i:i + batch], backend)
        out[i:i + batch] = logits.argmax(axis=1)
    return out


def accuracy(model: HybridModel, images: np.ndarray, labels: np.ndarray,
             backend=conv_backend) -> float:
    return float((predict(model, images, backend=backend) == labels).mean())


def train(dataset, cfg: TrainConfig, test_set=None, backend=conv_backend,
          progress=None) -> HybridModel:
    """Adam training, deterministic for a fixed seed and backend.

    ``dataset`` (and ``test_set``) expose .images (N,28,28) in [0,1] and
    .labels (N,).  Per-epoch metrics land in model.metadata["epochs"].
    """
    images = np.ascontiguousarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels)
    model = init_model(cfg.seed)
    params = {"conv_kernels": model.conv_kernels,
              "fc_weights": model.fc_weights, "fc_bias": model.fc_bias}
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(cfg.seed + 1)
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        t0 = time.time()
        order = rng.permutation(len(images))
        epoch_loss = 0.0
        n_batches = 0
        for i in range(0, len(images), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            total, grads = loss_and_grads(model, images[idx], labels[idx],
                                          cfg.balance_weight, backend)
            if not np.isfinite(total):
                raise NumericError(
                    f"training diverged at epoch {epoch} step {step}: loss={total}; "
                    f"learning_rate={cfg.learning_rate}, seed={cfg.seed}")
            epoch_loss += total
            n_batches += 1
            step += 1
            b1c = 1.0 - cfg.beta1**step
            b2c = 1.0 - cfg.beta2**step
            for key, g in grads.items():
                m1[key] *= cfg.beta1
                m1[key] += (1.0 - cfg.beta1) * g
                m2[key] *= cfg.beta2
                m2[key] += (1.0 - cfg.beta2) * (g * g)
                params[key] -= (cfg.learning_rate * (m1[key] / b1c)
                                / (np.sqrt(m2[key] / b2c) + cfg.eps_adam))
        entry = {"epoch": epoch + 1, "train_loss": epoch_loss / max(n_batches, 1),
                 "seconds": round(time.time() - t0, 2)}
        if test_set is not None:
            entry["test_accuracy"] = accuracy(model, test_set.images,
                                              test_set.labels, backend)
        history.append(entry)
        if progress is not None:
            progress(entry)
    model.metadata.update({"epochs": history, "train_config": vars(cfg) | {},
                           "backend": backend.BACKEND
                           if hasattr(backend, "BACKEND") else backend.NAME})
    return model


def normalize_for_optics(model: HybridModel) -> HybridModel:
    """Divide kernels by s = max |w| and scale FC weights by s.

    Max pooling and ReLU are positively homogeneous, so scaling the conv
    output by 1/s and the FC weights by s leaves every pre-bias activation
    identical; argmax decisions are preserved exactly.
    """
    s = float(np.abs(model.conv_kernels).max())
    if s == 0.0:
        raise DegenerateInputError("all conv kernels are zero; cannot normalize")
    return HybridModel(model.conv_kernels / s, model.fc_weights * s,
                       model.fc_bias.copy(), norm_constant=s,
                       metadata=dict(model.metadata))


def digital_tail(model, feature_maps: np.ndarray,
                 backend=conv_backend) -> np.ndarray:
    """Pool -> ReLU -> FC applied to externally supplied conv outputs."""
    fm = np.asarray(feature_maps, dtype=float)
    single = fm.ndim == 3
    if single:
        fm = fm[None]
    if fm.shape[1] != model.conv_kernels.shape[0]:
        raise DimensionError(
            f"feature maps carry {fm.shape[1]} channels, model has "
            f"{model.conv_kernels.shape[0]}")
    pooled, _ = backend.maxpool2_forward(np.ascontiguousarray(fm))
    relu = np.maximum(pooled, 0.0)
    logits = relu.reshape(fm.shape[0], -1) @ model.fc_weights.T + model.fc_bias
    return logits[0] if single else logits


def hybrid_infer(model: HybridModel, images: np.ndarray, optics,
                 backend=conv_backend) -> np.ndarray:
    """Inference with the conv layer replaced by the optical front-end.

    ``optics`` is either a list of per-channel effective kernels (each
    normalized to unit peak; they are rescaled by the digital kernel's own
    per-channel peak, i.e. detector gain calibration) or a callable
    mapping a batch of images to feature maps (B, 12, 28, 28).
    """
    imgs = np.asarray(images, dtype=float)
    single = imgs.ndim == 2
    if single:
        imgs = imgs[None]
    if callable(optics):
        fm = optics(imgs)
    else:
        from .imaging import EffectiveKernel
        ks = []
        for ch, k in enumerate(optics):
            w = k.weights if isinstance(k, EffectiveKernel) else np.asarray(k, float)
            ks.append(w * np.abs(model.conv_kernels[ch]).max())
        kstack = np.ascontiguousarray(np.stack(ks))
        n_ch = model.conv_kernels.shape[0]
        if kstack.shape[0] != n_ch:
            raise DimensionError(f"need {n_ch} channels, got {kstack.shape[0]}")
        fm = backend.conv2d_forward(np.ascontiguousarray(imgs), kstack,
                                    kstack.shape[1] // 2)
    logits = digital_tail(model, fm, backend)
    return logits[0] if single else logits


def count_flops(model: Optional[HybridModel] = None) -> Dict[str, float]:
    """Closed-form operation counts (MAC = 2 FLOPs; compare/ReLU = 1 op)."""
    conv = 2 * N_CHANNELS * IMAGE_PX * IMAGE_PX * KERNEL_PX * KERNEL_PX
    fc = 2 * FLAT_SIZE * N_CLASSES
    pool = 3 * N_CHANNELS * POOLED_PX * POOLED_PX
    relu = N_CHANNELS * POOLED_PX * POOLED_PX
    digital = fc + pool + relu
    return {"conv_flops": conv, "fc_flops": fc, "pool_flops": pool,
            "relu_flops": relu, "digital_flops": digital,
            "optical_fraction": conv / (conv + digital)}


# ---------------------------------------------------------------------------
# .hmod checkpoint: one JSON header line + little-endian f64 parameter blob.

_FIELD_ORDER = ("conv_kernels", "fc_weights", "fc_bias")


def save_model(model: HybridModel, path) -> None:
    header = {
        "format": "hmod",
        "arch": {"channels": N_CHANNELS, "kernel_px": KERNEL_PX,
                 "image_px": IMAGE_PX, "classes": N_CLASSES},
        "norm_constant": model.norm_constant,
        "metadata": model.metadata,
        "fields": [[name, list(getattr(model, name).shape)]
                   for name in _FIELD_ORDER],
        "dtype": "f64le",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("ascii") + b"\n")
        for name in _FIELD_ORDER:
            arr = getattr(model, name).astype("<f8", copy=False)
            fh.write(arr.tobytes(order="C"))


def load_model(path) -> HybridModel:
    with open(path, "rb") as fh:
        try:
            header = json.loads(fh.readline().decode("ascii"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad .hmod header: {exc}") from exc
        if header.get("format") != "hmod":
            raise FormatError("not an .hmod checkpoint")
        blobs = {}
        for name, shape in header["fields"]:
            count = int(np.prod(shape))
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise FormatError(f"truncated parameter blob for {name}")
            blobs[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return HybridModel(blobs["conv_kernels"], blobs["fc_weights"],
                       blobs["fc_bias"], header.get("norm_constant", 1.0),
                       header.get("metadata", {}))
