"""Small U-Net style encoder-decoder producing per-pixel feature maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .nn import BatchNorm, Conv2d, ConvTranspose2d, Module, Sgd, SgdConfig, Tensor, no_grad, ops
from .scene import IGNORE_LABEL


@dataclass(frozen=True)
class Unet2dConfig:
    input_size: tuple = (48, 36)  # (W, H)
    stage_channels: tuple = (16, 32, 64)
    feature_dim: int = 64
    num_classes: int = 6

    def __post_init__(self):
        w, h = self.input_size
        div = 2 ** (len(self.stage_channels) - 1)
        if w % div or h % div:
            raise ValidationError(f"input size {self.input_size} must be divisible by {div}")
        if self.feature_dim < 1 or self.num_classes < 1 or min(self.stage_channels) < 1:
            raise ValidationError("channel counts must be positive")


class ConvBnRelu(Module):
    def __init__(self, cin, cout, rng, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, rng, bias=False, dtype=dtype)
        self.bn = BatchNorm(cout, axis=-1, dtype=dtype)

    def __call__(self, x):
        return ops.relu(self.bn(self.conv(x)))


class Unet2d(Module):
    """Encoder: conv-BN-ReLU per stage with 2x2 max pooling between stages.

    Decoder: 2x2 transposed conv upsampling, skip concatenation, then a
    conv-BN-ReLU fusing the concatenation. The last decoder activation is the
    feature map; a 1x1 conv head turns it into class logits.
    """

    def __init__(self, config: Unet2dConfig = Unet2dConfig(), rng=None, dtype=np.float32,
                 zero_head: bool = False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        ch = config.stage_channels
        self.enc = [ConvBnRelu(cin, cout, rng, dtype) for cin, cout in zip((3,) + ch[:-1], ch)]
        self.up = []
        self.dec = []
        for i in range(len(ch) - 1, 0, -1):
            self.up.append(ConvTranspose2d(ch[i], ch[i - 1], rng, dtype))
            cout = config.feature_dim if i == 1 else ch[i - 1]
            self.dec.append(ConvBnRelu(2 * ch[i - 1], cout, rng, dtype))
        last = config.feature_dim if len(ch) > 1 else ch[0]
        self.head = Conv2d(last, config.num_classes, 1, rng, dtype=dtype)
        if zero_head:
            self.head.weight.data[...] = 0
        self.feature_dim = last

    def __call__(self, rgb):
        """``rgb``: (B, H, W, 3) in [0, 1]. Returns ``(features, logits)`` tensors,
        channels last."""
        x = rgb if isinstance(rgb, Tensor) else Tensor(np.asarray(rgb))
        w, h = self.config.input_size
        if x.ndim != 4 or x.shape[3] != 3 or x.shape[1:3] != (h, w):
            raise ShapeError(f"expected (B, {h}, {w}, 3) input, got {x.shape}")
        x = ops.sub(x, 0.5)
        skips = []
        for i, block in enumerate(self.enc):
            if i > 0:
                x = ops.maxpool2d(x)
            x = block(x)
            skips.append(x)
        for up, block, skip in zip(self.up, self.dec, reversed(skips[:-1])):
            x = block(ops.concat([up(x), skip], axis=-1))
        return x, self.head(x)

    def features(self, rgb_hwc: np.ndarray, batch: int = 16) -> np.ndarray:
        """Eval-mode feature maps for a stack of (N, H, W, 3) images -> (N, H, W, C)."""
        was = self.training
        self.eval()
        dtype = self.head.weight.dtype
        out = []
        with no_grad():
            for lo in range(0, len(rgb_hwc), batch):
                x = np.ascontiguousarray(rgb_hwc[lo: lo + batch], dtype=dtype)
                f, _ = self(x)
                out.append(f.data)
        self.train(was)
        return np.concatenate(out) if out else np.zeros((0,))

    def predict(self, rgb_hwc: np.ndarray, batch: int = 16) -> np.ndarray:
        was = self.training
        self.eval()
        dtype = self.head.weight.dtype
        out = []
        with no_grad():
            for lo in range(0, len(rgb_hwc), batch):
                x = np.ascontiguousarray(rgb_hwc[lo: lo + batch], dtype=dtype)
                _, logits = self(x)
                out.append(np.argmax(logits.data, axis=-1))
        self.train(was)
        return np.concatenate(out)


def net2d_forward(model: Unet2d, rgb_nchw, training: bool = False):
    """Channels-first convenience wrapper: (B, 3, H, W) -> features (B, C, H, W),
    logits (B, K, H, W) as arrays."""
    was = model.training
    model.train(training)
    with no_grad():
        f, logits = model(np.ascontiguousarray(np.asarray(rgb_nchw).transpose(0, 2, 3, 1),
                                               dtype=model.head.weight.dtype))
    model.train(was)
    return f.data.transpose(0, 3, 1, 2), logits.data.transpose(0, 3, 1, 2)


def flip_batch(images: np.ndarray, labels: np.ndarray, flips: np.ndarray):
    """Horizontally mirror the selected (N, H, W, ...) images and their label maps together."""
    images = images.copy()
    labels = labels.copy()
    images[flips] = images[flips][:, :, ::-1]
    labels[flips] = labels[flips][:, :, ::-1]
    return images, labels


def pretrain2d(images: np.ndarray, labels: np.ndarray, config: Unet2dConfig = Unet2dConfig(),
               sgd: SgdConfig = SgdConfig(lr=0.05, schedule=()), epochs: int = 10,
               batch_size: int = 16, seed: int = 0, flip: bool = True, class_weights=None,
               max_steps: int | None = None, log=None):
    """Train the encoder-decoder on per-pixel segmentation.

    Parameters
    ----------
    images : ndarray, shape (N, H, W, 3)
    labels : ndarray, shape (N, H, W)
        Class ids, ``IGNORE_LABEL`` where depth is invalid.

    Returns
    -------
    model : Unet2d
    losses : list of float
        One entry per optimizer step.
    """
    if len(images) == 0:
        raise ValidationError("pretrain2d needs at least one image")
    if labels.shape != images.shape[:3]:
        raise ShapeError("labels must match image spatial size")
    rng = np.random.default_rng(seed)
    model = Unet2d(config, rng=np.random.default_rng([seed, 2]))
    opt = Sgd(model.parameters(), sgd)
    losses = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        for lo in range(0, len(order), batch_size):
            idx = order[lo: lo + batch_size]
            x, y = images[idx], labels[idx]
            if flip:
                x, y = flip_batch(x, y, rng.random(len(idx)) < 0.5)
            _, logits = model(np.ascontiguousarray(x, dtype=np.float32))
            flat = ops.reshape(logits, (-1, config.num_classes))
            loss = ops.softmax_cross_entropy(flat, y.reshape(-1), class_weights, IGNORE_LABEL)
            opt.zero_grad()
            loss.backward()
            opt.step(epoch)
            losses.append(float(loss.data))
            step += 1
            if log is not None:
                log(epoch, step, losses[-1])
            if max_steps is not None and step >= max_steps:
                return model, losses
    return model, losses
