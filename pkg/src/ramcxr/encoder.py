"""Stacked convolutional autoencoders and the glimpse/location fusion layer."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .glimpse import Glimpse, Location
from .tensor import DimensionError, Tensor

log = logging.getLogger(__name__)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, name: str) -> Tensor:
    a = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-a, a, size=shape), requires_grad=True, name=name)


def zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


@dataclass
class ConvAutoencoder:
    enc_kernels: Tensor  # [C_out, C_in, k, k]
    enc_bias: Tensor
    dec_kernels: Tensor  # [C_in, C_out, k, k]
    dec_bias: Tensor

    @classmethod
    def init(cls, c_in: int, c_out: int, k: int, rng: np.random.Generator, prefix: str) -> "ConvAutoencoder":
        return cls(
            enc_kernels=uniform_init(rng, (c_out, c_in, k, k), c_in * k * k, f"{prefix}.enc_kernels"),
            enc_bias=zeros((c_out,), f"{prefix}.enc_bias"),
            dec_kernels=uniform_init(rng, (c_in, c_out, k, k), c_out * k * k, f"{prefix}.dec_kernels"),
            dec_bias=zeros((c_in,), f"{prefix}.dec_bias"),
        )

    @property
    def c_in(self) -> int:
        return self.enc_kernels.shape[1]

    @property
    def c_out(self) -> int:
        return self.enc_kernels.shape[0]

    def params(self) -> list[Tensor]:
        return [self.enc_kernels, self.enc_bias, self.dec_kernels, self.dec_bias]

    def encode(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise DimensionError(f"patch extents must be even, got {h}x{w}")
        code, _ = T.maxpool2d(T.relu(T.conv2d(x, self.enc_kernels, self.enc_bias)))
        return code

    def decode(self, code: Tensor) -> Tensor:
        return T.sigmoid(T.conv2d(T.upsample2(code), self.dec_kernels, self.dec_bias))


def cae_forward(cae: ConvAutoencoder, patch: Tensor) -> tuple[Tensor, Tensor]:
    code = cae.encode(patch)
    return code, cae.decode(code)


class CAEStack:
    """Two autoencoders applied in sequence; only the encoder path is used at attention time."""

    def __init__(self, layers: list[ConvAutoencoder]):
        if len(layers) != 2:
            raise ValueError("the encoder stack has exactly two autoencoders")
        if layers[0].c_out != layers[1].c_in:
            raise DimensionError("stack channel counts do not chain")
        self.layers = layers

    @classmethod
    def init(cls, channels=(8, 16), k: int = 3, rng: np.random.Generator | None = None) -> "CAEStack":
        rng = rng if rng is not None else np.random.default_rng(0)
        c1, c2 = channels
        return cls([ConvAutoencoder.init(1, c1, k, rng, "cae1"), ConvAutoencoder.init(c1, c2, k, rng, "cae2")])

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def encoder_params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in (layer.enc_kernels, layer.enc_bias)]

    def encode(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer.encode(x)
        return x

    def code_dim(self, g: int) -> int:
        return self.layers[1].c_out * (g // 4) ** 2


def encode_patches(stack: CAEStack, fine, coarse) -> Tensor:
    """Shared-weight encoding of fine/coarse patch batches [B,g,g] -> [B, d_img].

    Per row, the flattened fine code comes first, then the coarse code.
    """
    fine = np.asarray(fine, dtype=np.float64)
    coarse = np.asarray(coarse, dtype=np.float64)
    if fine.ndim != 3 or fine.shape != coarse.shape:
        raise DimensionError(f"expected patches [B,g,g], got {fine.shape} and {coarse.shape}")
    b, g, _ = fine.shape
    if g % 4:
        raise DimensionError(f"glimpse side must be divisible by 4, got {g}")
    # interleave fine/coarse per sample so one reshape yields [fine | coarse] rows
    both = np.stack([fine, coarse], axis=1).reshape(2 * b, 1, g, g)
    if both.shape[1] != stack.layers[0].c_in:
        raise DimensionError("patch channels do not match the stack")
    return T.reshape(stack.encode(Tensor(both)), (b, -1))


def encode_glimpse(stack: CAEStack, glimpse: Glimpse) -> Tensor:
    feat = encode_patches(stack, glimpse.fine, glimpse.coarse)
    return T.reshape(feat, (feat.shape[1],))


@dataclass
class GlimpseNetParams:
    loc_w: Tensor  # [2, d_loc]
    loc_b: Tensor
    fuse_w: Tensor  # [d_img + d_loc, d_b]
    fuse_b: Tensor

    @classmethod
    def init(cls, d_img: int, d_loc: int, d_b: int, rng: np.random.Generator) -> "GlimpseNetParams":
        return cls(
            loc_w=uniform_init(rng, (2, d_loc), 2, "glimpse.loc_w"),
            loc_b=zeros((d_loc,), "glimpse.loc_b"),
            fuse_w=uniform_init(rng, (d_img + d_loc, d_b), d_img + d_loc, "glimpse.fuse_w"),
            fuse_b=zeros((d_b,), "glimpse.fuse_b"),
        )

    def params(self) -> list[Tensor]:
        return [self.loc_w, self.loc_b, self.fuse_w, self.fuse_b]


def glimpse_net(params: GlimpseNetParams, img_feat: Tensor, locs) -> Tensor:
    """b_t = relu(fuse(concat(img_feat, relu(loc_fc(l))))) for rows of img_feat."""
    if isinstance(locs, Location):
        locs = locs.as_array()
    locs = np.asarray(locs.data if isinstance(locs, Tensor) else locs, dtype=np.float64)
    single = img_feat.data.ndim == 1
    if single:
        img_feat = T.reshape(img_feat, (1, img_feat.shape[0]))
        locs = locs.reshape(1, 2)
    if locs.shape != (img_feat.shape[0], 2):
        raise DimensionError(f"locations {locs.shape} do not match batch {img_feat.shape[0]}")
    if img_feat.shape[1] + params.loc_w.shape[1] != params.fuse_w.shape[0]:
        raise DimensionError("image feature size does not match the fusion layer")
    loc_feat = T.relu(T.linear(Tensor(locs), params.loc_w, params.loc_b))
    b = T.relu(T.linear(T.concat([img_feat, loc_feat], axis=1), params.fuse_w, params.fuse_b))
    return T.reshape(b, (b.shape[1],)) if single else b


# ---------------------------------------------------------------- pretraining


def train_layer(cae: ConvAutoencoder, inputs: np.ndarray, epochs: int, lr: float,
                 momentum: float, batch_size: int, rng: np.random.Generator) -> list[float]:
    opt = T.SGDMomentum(cae.params(), lr=lr, momentum=momentum)
    curve = []
    n = inputs.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x = inputs[idx]
            _, recon = cae_forward(cae, Tensor(x))
            loss = T.mse(recon, x)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        curve.append(total / n)
    return curve


def reconstruction_mse(cae: ConvAutoencoder, inputs: np.ndarray, batch_size: int = 256) -> float:
    total = 0.0
    for start in range(0, inputs.shape[0], batch_size):
        x = inputs[start : start + batch_size]
        _, recon = cae_forward(cae, Tensor(x))
        total += float(((recon.data - x) ** 2).sum())
    return total / inputs.size


def check_window(curve: list[float], window: int = 5) -> None:
    for e in range(len(curve) - window):
        if curve[e + window] > curve[e]:
            log.warning("reconstruction MSE rose over epochs %d..%d (%.5g -> %.5g)", e, e + window,
                        curve[e], curve[e + window])
            return


def cae_pretrain(stack: CAEStack, patches: np.ndarray, epochs: int, lr: float, momentum: float = 0.9,
                 batch_size: int = 32, rng: np.random.Generator | None = None) -> tuple[CAEStack, list[list[float]]]:
    """Layer-wise reconstruction training; returns the stack and one MSE curve per layer.

    patches: [N, 1, g, g] drawn from the glimpse distribution.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape[0] == 0:
        raise ValueError("cannot pretrain on an empty patch set")
    if patches.ndim == 3:
        patches = patches[:, None]
    rng = rng if rng is not None else np.random.default_rng(0)
    curves: list[list[float]] = []
    inputs = patches
    for layer in stack.layers:
        curve = train_layer(layer, inputs, epochs, lr, momentum, batch_size, rng)
        check_window(curve)
        curves.append(curve)
        inputs = layer.encode(Tensor(inputs)).data
    return stack, curves


def sample_patches(images: np.ndarray, count: int, cfg, rng: np.random.Generator) -> np.ndarray:
    """Fine and coarse patches at uniform random locations: [2*count, 1, g, g]."""
    from .glimpse import extract_batch

    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 4:
        images = images[:, 0]
    if len(images) == 0:
        raise ValueError("no images to sample patches from")
    pick = rng.integers(0, len(images), size=count)
    locs = rng.uniform(-1.0, 1.0, size=(count, 2))
    fine, coarse = extract_batch(images[pick], locs, cfg)
    return np.concatenate([fine, coarse])[:, None]
