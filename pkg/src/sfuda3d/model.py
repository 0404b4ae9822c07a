"""3D encoder / decoder / classifier network and its checkpoint format.

The network is a scaled-down DeepLab-style segmenter::

    encoder   conv(1->w0) conv(w0->w0) | s2 conv(w0->w1) conv(w1->w1) | s2 conv(w1->w2)
    ASPP      three dilated 3x3x3 convs + pooled branch, concatenated, 1x1x1 fuse
    decoder   up x2, concat level-2 features, conv -> w1 | up x2, concat level-1, conv -> w0
              1x1x1 conv -> C   (the latent field used for alignment)
    classifier 1x1x1 conv C -> C, softmax

Parameters live in an ordered ``dict`` of leaf tensors whose names carry the
sub-network prefix (``enc.``, ``aspp.``, ``dec.``, ``cls.``).
"""
from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sfuda3d.data.crops import crop_grid
from sfuda3d.exceptions import ChecksumError, DimensionError, FormatError, ParameterError
from sfuda3d.numerics import (
    Tensor,
    broadcast_spatial,
    channels_last,
    concat_channels,
    conv3d,
    global_avg_pool,
    no_grad,
    relu,
    softmax_channel,
    trilinear_upsample,
)

CHECKPOINT_MAGIC = b"SF3D"
CHECKPOINT_VERSION = 1

ENCODER_PREFIXES = ("enc.", "aspp.")
DECODER_PREFIXES = ("dec.",)
CLASSIFIER_PREFIXES = ("cls.",)


@dataclass(frozen=True)
class Architecture:
    num_classes: int = 5
    widths: tuple[int, int, int] = (8, 16, 32)
    dilations: tuple[int, ...] = (1, 2, 4)

    def layers(self) -> list[tuple[str, int, int, int]]:
        """``(name, out_channels, in_channels, kernel)`` for every conv, in parameter order."""
        w0, w1, w2 = self.widths
        c = self.num_classes
        specs = [
            ("enc.l1a", w0, 1, 3),
            ("enc.l1b", w0, w0, 3),
            ("enc.down1", w1, w0, 3),
            ("enc.l2", w1, w1, 3),
            ("enc.down2", w2, w1, 3),
        ]
        specs += [(f"aspp.dil{d}", w2, w2, 3) for d in self.dilations]
        specs += [
            ("aspp.pool", w2, w2, 1),
            ("aspp.fuse", w2, w2 * (len(self.dilations) + 1), 1),
            ("dec.up2", w1, w2 + w1, 3),
            ("dec.up1", w0, w1 + w0, 3),
            ("dec.out", c, w0, 1),
            ("cls.logits", c, c, 1),
        ]
        return specs

    def parameter_count(self) -> int:
        return sum(co * ci * k ** 3 + co for _, co, ci, k in self.layers())


@dataclass
class SegModel:
    arch: Architecture
    params: dict[str, Tensor]
    metadata: dict = field(default_factory=dict)

    def parameters(self, prefixes: tuple[str, ...] | None = None) -> list[Tensor]:
        if prefixes is None:
            return list(self.params.values())
        return [t for name, t in self.params.items() if name.startswith(prefixes)]

    def encoder_decoder_parameters(self) -> list[Tensor]:
        return self.parameters(ENCODER_PREFIXES + DECODER_PREFIXES)

    def set_trainable(self, prefixes: tuple[str, ...] | None) -> None:
        """Make exactly the parameters matching ``prefixes`` require grad (None: all)."""
        for name, t in self.params.items():
            t.requires_grad = prefixes is None or name.startswith(prefixes)
            t.grad = np.zeros_like(t.data) if t.requires_grad else None

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self.params.values()]).astype(np.float32)

    def parameter_hash(self) -> str:
        return hashlib.blake2b(self.flat_parameters().astype("<f4").tobytes(), digest_size=8).hexdigest()

    def copy(self) -> "SegModel":
        params = {}
        for name, t in self.params.items():
            params[name] = Tensor(t.data.copy(), requires_grad=t.requires_grad, dtype=t.dtype)
        return SegModel(self.arch, params, copy.deepcopy(self.metadata))

    def astype(self, dtype) -> "SegModel":
        out = self.copy()
        for name, t in out.params.items():
            out.params[name] = Tensor(t.data, requires_grad=t.requires_grad, dtype=dtype)
        return out


def build_model(num_classes: int = 5, seed: int = 0, widths=(8, 16, 32), dilations=(1, 2, 4)) -> SegModel:
    """He-initialised network; identical seeds give identical parameters."""
    if num_classes < 2:
        raise ParameterError("num_classes must be >= 2")
    arch = Architecture(num_classes, tuple(int(w) for w in widths), tuple(int(d) for d in dilations))
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, cout, cin, k in arch.layers():
        fan_in = cin * k ** 3
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k, k))
        params[name + ".w"] = Tensor(w.astype(np.float32), requires_grad=True, dtype=np.float32)
        params[name + ".b"] = Tensor(np.zeros(cout, np.float32), requires_grad=True, dtype=np.float32)
    return SegModel(arch, params)


def _conv(model: SegModel, name: str, x: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
    w = model.params[name + ".w"]
    k = w.shape[2]
    pad = dilation * (k - 1) // 2
    return conv3d(x, w, model.params[name + ".b"], stride=stride, dilation=dilation, padding=pad)


def _check_input(model: SegModel, x: Tensor) -> None:
    if x.data.ndim != 5 or x.shape[1] != 1:
        raise DimensionError(f"expected input of shape (N, 1, D, H, W), got {x.shape}")
    if any(s % 4 for s in x.shape[2:]):
        raise DimensionError(f"spatial dims must be divisible by 4, got {x.shape[2:]}")


def encode(model: SegModel, x: Tensor) -> tuple[Tensor, list[Tensor]]:
    _check_input(model, x)
    f1 = relu(_conv(model, "enc.l1b", relu(_conv(model, "enc.l1a", x))))
    f2 = relu(_conv(model, "enc.l2", relu(_conv(model, "enc.down1", f1, stride=2))))
    f3 = relu(_conv(model, "enc.down2", f2, stride=2))
    branches = [relu(_conv(model, f"aspp.dil{d}", f3, dilation=d)) for d in model.arch.dilations]
    pooled = relu(_conv(model, "aspp.pool", global_avg_pool(f3)))
    branches.append(broadcast_spatial(pooled, f3.shape[2:]))
    bottleneck = relu(_conv(model, "aspp.fuse", concat_channels(branches)))
    return bottleneck, [f1, f2]


def decode(model: SegModel, z: Tensor, skips: list[Tensor]) -> Tensor:
    f1, f2 = skips
    u2 = relu(_conv(model, "dec.up2", concat_channels([trilinear_upsample(z, 2), f2])))
    # no activation here: a rectifier on this narrow full-resolution layer can die early in training
    u1 = _conv(model, "dec.up1", concat_channels([trilinear_upsample(u2, 2), f1]))
    return _conv(model, "dec.out", u1)


def latent(model: SegModel, patch) -> Tensor:
    """Decoder-output field ``(N, C, D, H, W)``; the space where alignment happens."""
    x = patch if isinstance(patch, Tensor) else Tensor(_as_batch(patch), dtype=_param_dtype(model))
    z, skips = encode(model, x)
    return decode(model, z, skips)


def logits(model: SegModel, latent_field: Tensor) -> Tensor:
    if latent_field.data.ndim != 5 or latent_field.shape[1] != model.arch.num_classes:
        raise DimensionError(f"latent field must have {model.arch.num_classes} channels, got {latent_field.shape}")
    return _conv(model, "cls.logits", latent_field)


def classify(model: SegModel, latent_field: Tensor) -> Tensor:
    """Per-voxel class probabilities from a latent field."""
    return softmax_channel(logits(model, latent_field))


def forward(model: SegModel, patch) -> Tensor:
    return classify(model, latent(model, patch))


def predict_labels(prob: np.ndarray) -> np.ndarray:
    """Argmax over the channel axis; ties resolve to the lowest class index."""
    return np.argmax(prob, axis=1).astype(np.uint8)


def latent_points(model: SegModel, patch) -> Tensor:
    """Latent field of one patch flattened to ``(P**3, C)``."""
    return channels_last(latent(model, patch))


def _param_dtype(model: SegModel):
    return next(iter(model.params.values())).dtype


def _as_batch(patch) -> np.ndarray:
    arr = np.asarray(patch)
    if arr.ndim == 3:
        arr = arr[None, None]
    elif arr.ndim == 4:
        arr = arr[:, None]
    return arr


def predict_proba_patches(model: SegModel, patches: np.ndarray) -> np.ndarray:
    with no_grad():
        return forward(model, Tensor(_as_batch(patches), dtype=_param_dtype(model))).data


def sliding_window_proba(model: SegModel, volume: np.ndarray, patch: int, stride, batch: int = 4) -> np.ndarray:
    """Average per-voxel probabilities over all overlapping windows: ``(C, D, H, W)``."""
    volume = np.asarray(volume, dtype=np.float32)
    origins = [c.origin for c in crop_grid(volume.shape, patch, stride)]
    c = model.arch.num_classes
    acc = np.zeros((c,) + volume.shape, dtype=np.float64)
    counts = np.zeros(volume.shape, dtype=np.float64)
    for start in range(0, len(origins), batch):
        chunk = origins[start:start + batch]
        patches = np.stack([volume[i:i + patch, j:j + patch, k:k + patch] for i, j, k in chunk])
        prob = predict_proba_patches(model, patches)
        for (i, j, k), p in zip(chunk, prob):
            acc[:, i:i + patch, j:j + patch, k:k + patch] += p
            counts[i:i + patch, j:j + patch, k:k + patch] += 1.0
    return acc / counts


def sliding_window_predict(model: SegModel, volume: np.ndarray, patch: int = 32, stride=(8, 8, 8)) -> np.ndarray:
    prob = sliding_window_proba(model, volume, patch, stride)
    return predict_labels(prob[None])[0]


def _checksum(blob: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def save_checkpoint(model: SegModel, path) -> None:
    """Write ``SF3D`` checkpoint: header, JSON metadata, f32 blob, blob checksum."""
    arch = model.arch
    header = bytearray(CHECKPOINT_MAGIC)
    header += struct.pack("<B", CHECKPOINT_VERSION)
    header += struct.pack("<I", arch.num_classes)
    header += struct.pack("<B", len(arch.widths)) + struct.pack(f"<{len(arch.widths)}I", *arch.widths)
    header += struct.pack("<B", len(arch.dilations)) + struct.pack(f"<{len(arch.dilations)}I", *arch.dilations)
    meta = json.dumps(model.metadata, sort_keys=True).encode("utf-8")
    header += struct.pack("<I", len(meta)) + meta
    blob = model.flat_parameters().astype("<f4").tobytes()
    header += struct.pack("<Q", len(blob))
    Path(path).write_bytes(bytes(header) + blob + struct.pack("<Q", _checksum(blob)))


def load_checkpoint(path) -> SegModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an SF3D checkpoint")
    try:
        pos = 4
        (version,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (num_classes,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        (nw,) = struct.unpack_from("<B", raw, pos)
        widths = struct.unpack_from(f"<{nw}I", raw, pos + 1)
        pos += 1 + 4 * nw
        (nd,) = struct.unpack_from("<B", raw, pos)
        dilations = struct.unpack_from(f"<{nd}I", raw, pos + 1)
        pos += 1 + 4 * nd
        (meta_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        metadata = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (blob_len,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint header") from exc
    if len(raw) != pos + blob_len + 8:
        raise FormatError(f"{path}: payload length does not match header")
    blob = raw[pos:pos + blob_len]
    (stored,) = struct.unpack_from("<Q", raw, pos + blob_len)
    if stored != _checksum(blob):
        raise ChecksumError(f"{path}: checksum mismatch")
    if nw != 3:
        raise FormatError(f"{path}: expected three widths, got {nw}")
    arch = Architecture(num_classes, tuple(widths), tuple(dilations))
    flat = np.frombuffer(blob, dtype="<f4")
    if flat.size != arch.parameter_count():
        raise FormatError(f"{path}: blob holds {flat.size} values, architecture needs {arch.parameter_count()}")
    params: dict[str, Tensor] = {}
    pos = 0
    for name, cout, cin, k in arch.layers():
        n = cout * cin * k ** 3
        params[name + ".w"] = Tensor(flat[pos:pos + n].reshape(cout, cin, k, k, k).astype(np.float32),
                                     requires_grad=True, dtype=np.float32)
        pos += n
        params[name + ".b"] = Tensor(flat[pos:pos + cout].astype(np.float32), requires_grad=True, dtype=np.float32)
        pos += cout
    return SegModel(arch, params, metadata)


def file_hash(path) -> str:
    return hashlib.blake2b(Path(path).read_bytes(), digest_size=8).hexdigest()
