"""A small self-contained convolutional segmentation net with manual gradients.

Architecture: 3x3 conv (1 -> C_h, pad 1) + ReLU, 3x3 conv (C_h -> C_h, pad 1)
+ ReLU, 1x1 head (C_h -> C_out). C_out = 1 trains a sigmoid foreground head;
C_out = K+1 trains the softmax ordinal-consensus head. Convolutions are
implemented as im2col matmuls; backward passes are exact reverse-mode
gradients, verified against finite differences in the test suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import (
    DTYPE_F32,
    ForegroundProbMap,
    Grid2D,
    RaterStack,
    read_container,
    write_container,
)
from .fusion import FusionConfig, fuse, fuse_staple
from .ordinal import LossConfig, OrdinalProbMap, aggregate_foreground, hybrid_loss, orc_encode

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


class ArchitectureMismatch(Exception):
    pass


class EmptyTrainSplit(Exception):
    pass


class NonFiniteLoss(Exception):
    pass


@dataclass
class TrainConfig:
    loss: str = "hybrid_rps"  # or "bce_vs_fused"
    alpha: float = 0.8
    lr: float = 0.01
    epochs: int = 20
    batch_size: int = 4
    seed: int = 0
    fusion: FusionConfig = field(default_factory=FusionConfig)
    hidden_channels: int = 16

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loss not in ("hybrid_rps", "bce_vs_fused"):
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class TinyNet:
    """Parameter container; out_channels 1 = sigmoid head, K+1 = softmax head."""

    params: dict[str, np.ndarray]
    hidden_channels: int
    out_channels: int

    @classmethod
    def init(cls, out_channels: int, hidden_channels: int = 16, seed: int = 0) -> "TinyNet":
        """Kaiming-uniform weights (seeded), zero biases."""
        rng = np.random.default_rng(seed)
        c = hidden_channels

        def kaiming(shape, fan_in):
            bound = np.sqrt(6.0 / fan_in)
            return rng.uniform(-bound, bound, size=shape)

        params = {
            "w1": kaiming((c, 1, 3, 3), 9),
            "b1": np.zeros(c),
            "w2": kaiming((c, c, 3, 3), 9 * c),
            "b2": np.zeros(c),
            "w3": kaiming((out_channels, c, 1, 1), c),
            "b3": np.zeros(out_channels),
        }
        return cls(params=params, hidden_channels=c, out_channels=out_channels)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [self.params[name].ravel() for name in PARAM_NAMES]
        ).astype(np.float32)

    def load_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_params():
            raise ArchitectureMismatch(
                f"flat vector has {flat.size} values, expected {self.num_params()}"
            )
        offset = 0
        for name in PARAM_NAMES:
            p = self.params[name]
            self.params[name] = flat[offset : offset + p.size].reshape(p.shape)
            offset += p.size


def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x: (C_in, H, W); w: (C_out, C_in, 3, 3). Zero padding 1."""
    c_in, h, wd = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))  # (C_in, H, W, 3, 3)
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(h * wd, c_in * 9)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.T.reshape(w.shape[0], h, wd)


def _conv3x3_backward(x: np.ndarray, w: np.ndarray, d_out: np.ndarray):
    """Gradients of a padded 3x3 conv: returns (d_x, d_w, d_b)."""
    c_in, h, wd = x.shape
    c_out = w.shape[0]
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(h * wd, c_in * 9)
    d_flat = d_out.reshape(c_out, h * wd)
    d_w = (d_flat @ cols).reshape(w.shape)
    d_b = d_flat.sum(axis=1)
    # input gradient = correlation of d_out with the flipped kernel
    d_pad = np.pad(d_out, ((0, 0), (1, 1), (1, 1)))
    d_windows = sliding_window_view(d_pad, (3, 3), axis=(1, 2))
    d_cols = d_windows.transpose(1, 2, 0, 3, 4).reshape(h * wd, c_out * 9)
    w_flip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, c_out * 9)
    d_x = (d_cols @ w_flip.T).T.reshape(c_in, h, wd)
    return d_x, d_w, d_b


def _forward_logits(net: TinyNet, image: np.ndarray):
    """Raw head outputs (C_out, H, W) plus the caches backward needs."""
    x0 = image[None]  # (1, H, W)
    z1 = _conv3x3(x0, net.params["w1"], net.params["b1"])
    a1 = np.maximum(z1, 0.0)
    z2 = _conv3x3(a1, net.params["w2"], net.params["b2"])
    a2 = np.maximum(z2, 0.0)
    w3 = net.params["w3"][:, :, 0, 0]  # (C_out, C_h)
    logits = np.einsum("oc,chw->ohw", w3, a2) + net.params["b3"][:, None, None]
    cache = {"x0": x0, "z1": z1, "a1": a1, "z2": z2, "a2": a2}
    return logits, cache


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def forward(net: TinyNet, image: Grid2D):
    """Run the net; softmax head returns an OrdinalProbMap, sigmoid head a
    ForegroundProbMap."""
    if image.height < 3 or image.width < 3:
        raise ValueError("image must be at least 3x3")
    logits, _ = _forward_logits(net, image.data)
    if net.out_channels == 1:
        return ForegroundProbMap.from_array(1.0 / (1.0 + np.exp(-logits[0])))
    return OrdinalProbMap(_softmax(logits), num_raters=net.out_channels - 1)


def backward(net: TinyNet, cache: dict, d_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given the loss gradient at the head logits."""
    a2 = cache["a2"]
    w3 = net.params["w3"][:, :, 0, 0]
    d_w3 = np.einsum("ohw,chw->oc", d_logits, a2)[:, :, None, None]
    d_b3 = d_logits.sum(axis=(1, 2))
    d_a2 = np.einsum("oc,ohw->chw", w3, d_logits)
    d_z2 = d_a2 * (cache["z2"] > 0)
    d_a1, d_w2, d_b2 = _conv3x3_backward(cache["a1"], net.params["w2"], d_z2)
    d_z1 = d_a1 * (cache["z1"] > 0)
    _, d_w1, d_b1 = _conv3x3_backward(cache["x0"], net.params["w1"], d_z1)
    return {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2, "w3": d_w3, "b3": d_b3}


def _sigmoid_bce(logit: np.ndarray, target: np.ndarray, clamp: float = 1e-7):
    """BCE of sigmoid(logit) against a (possibly soft) target in [0,1].

    Returns (loss, gradient w.r.t. the logit). The gradient p - t is exact
    for the unclamped loss; the clamp only guards the log evaluation.
    """
    p = 1.0 / (1.0 + np.exp(-logit))
    pc = np.clip(p, clamp, 1.0 - clamp)
    loss = float((-(target * np.log(pc) + (1.0 - target) * np.log(1.0 - pc))).mean())
    grad = (p - target) / target.size
    return loss, grad


@dataclass
class Checkpoint:
    """Trained parameters plus enough metadata to rebuild the net."""

    hidden_channels: int
    out_channels: int
    num_raters: int
    flat_params: np.ndarray
    config: dict
    loss_trace: list[float]
    seed: int
    extra: dict = field(default_factory=dict)

    def build_net(self) -> TinyNet:
        net = TinyNet.init(self.out_channels, self.hidden_channels, seed=0)
        net.load_flat(self.flat_params)
        return net

    def save(self, path) -> None:
        """MRC1 f32 1-D parameter vector plus a .json sidecar."""
        path = Path(path)
        flat = np.asarray(self.flat_params, dtype=np.float32)
        write_container(DTYPE_F32, (flat.size,), flat, path)
        sidecar = {
            "architecture": {
                "hidden_channels": self.hidden_channels,
                "out_channels": self.out_channels,
                "num_raters": self.num_raters,
                "num_params": int(flat.size),
            },
            "config": self.config,
            "loss_trace": self.loss_trace,
            "seed": self.seed,
            "extra": self.extra,
        }
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        _, dims, flat = read_container(path)
        sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        arch = sidecar["architecture"]
        if int(np.prod(dims)) != arch["num_params"]:
            raise ArchitectureMismatch(
                f"{path}: {int(np.prod(dims))} params on disk, descriptor says "
                f"{arch['num_params']}"
            )
        return cls(
            hidden_channels=arch["hidden_channels"],
            out_channels=arch["out_channels"],
            num_raters=arch["num_raters"],
            flat_params=np.asarray(flat, dtype=np.float32),
            config=sidecar["config"],
            loss_trace=sidecar["loss_trace"],
            seed=sidecar["seed"],
            extra=sidecar.get("extra", {}),
        )


def _fused_target(sample, cfg: TrainConfig, step: int) -> np.ndarray:
    fused = fuse(sample.annotations, cfg.fusion, step=step)
    return fused.data.astype(np.float64)


def train(samples, cfg: TrainConfig) -> Checkpoint:
    """Plain SGD over the train split; returns a checkpoint with loss trace.

    hybrid_rps trains the K+1 softmax head against ordinal consensus
    targets. bce_vs_fused trains the 1-channel sigmoid head against the
    configured fusion target; random-sampling targets are redrawn every
    epoch at step = epoch * len(samples) + index.
    """
    samples = list(samples)
    if not samples:
        raise EmptyTrainSplit("train split is empty")
    k = samples[0].annotations.num_raters
    for s in samples:
        if s.annotations.num_raters != k:
            raise ArchitectureMismatch(
                f"sample {s.id!r} has K={s.annotations.num_raters}, expected {k}"
            )

    if cfg.loss == "hybrid_rps":
        out_channels = k + 1
        targets = {s.id: orc_encode(s.annotations) for s in samples}
    else:
        out_channels = 1
        if cfg.fusion.method != "rs":
            targets = {
                s.id: _fused_target(s, cfg, step=0) for s in samples
            }
        else:
            targets = None  # redrawn per (epoch, index)

    net = TinyNet.init(out_channels, cfg.hidden_channels, seed=cfg.seed)
    loss_cfg = LossConfig(alpha=cfg.alpha)
    rng = np.random.default_rng(cfg.seed + 1)
    trace = []

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        epoch_losses = []
        batch_grads = None
        batch_count = 0

        for pos, idx in enumerate(order):
            sample = samples[int(idx)]
            logits, cache = _forward_logits(net, sample.image.data)
            if cfg.loss == "hybrid_rps":
                probs = OrdinalProbMap(_softmax(logits), num_raters=k)
                loss, d_logits = hybrid_loss(probs, targets[sample.id], loss_cfg)
            else:
                if targets is None:
                    step = epoch * len(samples) + int(idx)
                    target = _fused_target(sample, cfg, step=step)
                else:
                    target = targets[sample.id]
                loss, d_logits = _sigmoid_bce(logits[0], target)
                d_logits = d_logits[None]
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}: loss is not finite")
            epoch_losses.append(loss)

            grads = backward(net, cache, d_logits)
            if batch_grads is None:
                batch_grads = grads
            else:
                for name in PARAM_NAMES:
                    batch_grads[name] = batch_grads[name] + grads[name]
            batch_count += 1

            if batch_count == cfg.batch_size or pos == len(order) - 1:
                for name in PARAM_NAMES:
                    net.params[name] = net.params[name] - cfg.lr * (
                        batch_grads[name] / batch_count
                    )
                batch_grads = None
                batch_count = 0

        trace.append(float(np.mean(epoch_losses)))

    extra = {}
    if cfg.loss == "bce_vs_fused" and cfg.fusion.method == "staple":
        # record the per-rater performance STAPLE estimated on the first sample
        _, perf = fuse_staple(samples[0].annotations, cfg.fusion)
        extra["staple_rater_performance"] = {
            "sensitivity": list(perf.sensitivity),
            "specificity": list(perf.specificity),
        }

    config_echo = {
        "loss": cfg.loss,
        "alpha": cfg.alpha,
        "lr": cfg.lr,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "hidden_channels": cfg.hidden_channels,
        "fusion_method": cfg.fusion.method,
        "fusion_sigma": cfg.fusion.sigma,
    }
    return Checkpoint(
        hidden_channels=cfg.hidden_channels,
        out_channels=out_channels,
        num_raters=k,
        flat_params=net.flatten(),
        config=config_echo,
        loss_trace=trace,
        seed=cfg.seed,
        extra=extra,
    )


def predict(checkpoint: Checkpoint, image: Grid2D) -> ForegroundProbMap:
    """Foreground probability map; ordinal heads aggregate majority mass."""
    net = checkpoint.build_net()
    out = forward(net, image)
    if isinstance(out, OrdinalProbMap):
        return aggregate_foreground(out)
    return out
