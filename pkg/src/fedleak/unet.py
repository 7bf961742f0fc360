"""Segmentation models used as the federated global model.

``UNetConfig`` is the victim architecture. ``LinearConfig`` and
``ToyConvConfig`` are tiny stand-ins used by tests and sanity experiments;
they share the same weight container and serialization.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

WEIGHTS_FORMAT = "fedleak-weights"


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 32
    depth: int = 2
    base_channels: int = 8
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError("depth and base_channels must be >= 1")
        if self.image_size % (2**self.depth):
            raise ValueError(
                f"image_size {self.image_size} is not divisible by 2**depth = {2**self.depth}"
            )
        if self.in_channels != 1 or self.out_channels != 1:
            raise ValueError("only single-channel input and output are supported")

    def layers(self) -> list[tuple[str, int, int, int]]:
        """(name, in_channels, out_channels, kernel) for every conv, in order."""
        b = self.base_channels
        out = []
        cin = self.in_channels
        for d in range(self.depth):
            c = b * 2**d
            out += [(f"enc{d}.conv1", cin, c, 3), (f"enc{d}.conv2", c, c, 3)]
            cin = c
        c = b * 2**self.depth
        out += [("mid.conv1", cin, c, 3), ("mid.conv2", c, c, 3)]
        below = c
        for d in reversed(range(self.depth)):
            c = b * 2**d
            out += [(f"dec{d}.conv1", below + c, c, 3), (f"dec{d}.conv2", c, c, 3)]
            below = c
        out.append(("head", below, self.out_channels, 1))
        return out

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for name, cin, cout, k in self.layers():
            shapes[f"{name}.weight"] = (cout, cin, k, k)
            shapes[f"{name}.bias"] = (cout,)
        return shapes

    def apply(self, p: Mapping[str, Tensor], x: Tensor) -> Tensor:
        """NCHW image batch -> NCHW foreground probabilities."""

        def block(h, name):
            h = ad.relu(ad.conv2d(h, p[f"{name}.conv1.weight"], p[f"{name}.conv1.bias"]))
            return ad.relu(ad.conv2d(h, p[f"{name}.conv2.weight"], p[f"{name}.conv2.bias"]))

        skips = []
        h = x
        for d in range(self.depth):
            h = block(h, f"enc{d}")
            skips.append(h)
            h = ad.avg_pool2(h)
        h = block(h, "mid")
        for d in reversed(range(self.depth)):
            h = ad.concat_channels(ad.upsample2(h), skips[d])
            h = block(h, f"dec{d}")
        return ad.sigmoid(ad.conv2d(h, p["head.weight"], p["head.bias"]))


@dataclass(frozen=True)
class LinearConfig:
    """One dense layer from all pixels to all pixels, then a sigmoid."""

    image_size: int = 8

    def param_shapes(self) -> dict[str, tuple]:
        n = self.image_size**2
        return {"dense.weight": (n, n), "dense.bias": (n,)}

    def apply(self, p: Mapping[str, Tensor], x: Tensor) -> Tensor:
        n, _, h, w = x.shape
        flat = ad.reshape(x, (n, h * w))
        z = ad.add(ad.matmul(flat, ad.transpose(p["dense.weight"])), p["dense.bias"])
        return ad.reshape(ad.sigmoid(z), (n, 1, h, w))


@dataclass(frozen=True)
class ToyConvConfig:
    """conv3x3 -> sigmoid -> conv3x3 -> sigmoid; a two-layer smooth model."""

    image_size: int = 6
    hidden: int = 2

    def param_shapes(self) -> dict[str, tuple]:
        return {
            "conv1.weight": (self.hidden, 1, 3, 3),
            "conv1.bias": (self.hidden,),
            "conv2.weight": (1, self.hidden, 3, 3),
            "conv2.bias": (1,),
        }

    def apply(self, p: Mapping[str, Tensor], x: Tensor) -> Tensor:
        h = ad.sigmoid(ad.conv2d(x, p["conv1.weight"], p["conv1.bias"]))
        return ad.sigmoid(ad.conv2d(h, p["conv2.weight"], p["conv2.bias"]))


ARCHS = {"unet": UNetConfig, "linear": LinearConfig, "toyconv": ToyConvConfig}


def _arch_name(arch) -> str:
    for name, cls in ARCHS.items():
        if isinstance(arch, cls):
            return name
    raise TypeError(f"unknown architecture {arch!r}")


class ModelWeights(Mapping[str, np.ndarray]):
    """Immutable ordered set of named parameter arrays for one architecture."""

    def __init__(self, arch, params: Mapping[str, np.ndarray]):
        shapes = arch.param_shapes()
        if list(params) != list(shapes):
            raise ValueError(f"parameter names {list(params)} do not match {arch!r}")
        frozen = {}
        for name, value in params.items():
            arr = np.array(value, dtype=np.float64)
            if arr.shape != shapes[name]:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shapes[name]}")
            arr.flags.writeable = False
            frozen[name] = arr
        self.arch = arch
        self._params = frozen

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def __repr__(self):
        return f"ModelWeights({self.arch!r}, n_params={self.num_params()})"

    def num_params(self) -> int:
        return int(sum(v.size for v in self._params.values()))

    def congruent(self, other: "ModelWeights") -> bool:
        return self.arch == other.arch and all(
            self[k].shape == other[k].shape for k in self
        )

    def replace(self, params: Mapping[str, np.ndarray]) -> "ModelWeights":
        """Copy with some (or all) parameters swapped out."""
        unknown = set(params) - set(self._params)
        if unknown:
            raise ValueError(f"unknown parameters {sorted(unknown)}")
        return ModelWeights(self.arch, {**self._params, **params})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._params.values()])

    def equals(self, other: "ModelWeights") -> bool:
        return self.congruent(other) and all(np.array_equal(self[k], other[k]) for k in self)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self._params.items()}


def param_count(arch) -> int:
    return int(sum(math.prod(s) for s in arch.param_shapes().values()))


def init_weights(arch, seed: int) -> ModelWeights:
    """Kaiming-uniform kernels, bound sqrt(6 / fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = math.prod(shape[1:])
            bound = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return ModelWeights(arch, params)


def zero_weights(arch) -> ModelWeights:
    return ModelWeights(arch, {k: np.zeros(s) for k, s in arch.param_shapes().items()})


def as_batch(images) -> Tensor:
    """Accept HxW, NxHxW or NCHW arrays/tensors and return an NCHW tensor."""
    if isinstance(images, Tensor):
        nd = images.data.ndim
        if nd == 2:
            return ad.reshape(images, (1, 1) + images.shape)
        if nd == 3:
            return ad.reshape(images, (images.shape[0], 1) + images.shape[1:])
        return images
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    return Tensor(arr)


def forward(weights: ModelWeights | Mapping[str, Tensor], image, arch=None) -> Tensor:
    """Foreground probability map; output has the same shape as ``image``.

    ``weights`` may be a ModelWeights or a mapping of (possibly
    grad-requiring) tensors, in which case ``arch`` must be given.
    """
    arch = arch if arch is not None else weights.arch
    x = as_batch(image)
    size = arch.image_size
    if x.shape[2:] != (size, size):
        raise ad.ShapeError(f"forward: image {x.shape[2:]} does not match model size {size}")
    params = weights.tensors() if isinstance(weights, ModelWeights) else weights
    out = arch.apply(params, x)
    shape = image.shape if isinstance(image, (Tensor, np.ndarray)) else np.shape(image)
    return ad.reshape(out, shape) if tuple(shape) != out.shape else out


def seg_loss(pred: Tensor, target) -> Tensor:
    """Pixelwise mean squared error between probabilities and a binary mask."""
    target = ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"seg_loss: prediction {pred.shape} vs target {target.shape}")
    return ad.mse(pred, target)


def loss_and_grads(weights: ModelWeights, images, masks) -> tuple[float, dict[str, np.ndarray]]:
    params = weights.tensors(requires_grad=True)
    loss = seg_loss(forward(params, images, weights.arch), np.asarray(masks, dtype=np.float64))
    grads = ad.backward(loss, params)
    return loss.item(), {k: g.data for k, g in grads.items()}


# ---------------------------------------------------------------------------
# serialization: u64 LE header length, JSON header, float64 LE payload


def save_weights(weights: ModelWeights, path) -> None:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, value in weights.items():
        raw = np.ascontiguousarray(value, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(value.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": WEIGHTS_FORMAT,
        "version": 1,
        "arch": _arch_name(weights.arch),
        "config": asdict(weights.arch),
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for raw in chunks:
            fh.write(raw)


def load_weights(path) -> ModelWeights:
    blob = Path(path).read_bytes()
    try:
        (hlen,) = struct.unpack_from("<Q", blob, 0)
        header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError):
        header = None
    if not isinstance(header, dict) or header.get("format") != WEIGHTS_FORMAT:
        raise ValueError(f"{path}: not a weights file")
    arch = ARCHS[header["arch"]](**header["config"])
    base = 8 + hlen
    params = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(blob):
            raise ValueError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(blob[start : start + e["nbytes"]], dtype="<f8")
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return ModelWeights(arch, params)
