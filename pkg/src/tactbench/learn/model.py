"""Per-modality residual encoders fused late by concatenation."""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from ..sample import ModalityMask
from .layers import (Conv2d, Dense, GlobalAvgPool, ReLU, ResidualBlock, Sequential,
                     check_finite, sigmoid)

CHANNELS = {"vision": 3, "depth": 1, "touch_left": 1, "touch_right": 1}
PARAM_MAGIC = b"TGMP"
PARAM_VERSION = 1


class MissingModality(KeyError):
    pass


class ParamFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    mask: ModalityMask
    input_res: int = 64
    widths: tuple = (8, 16, 32)
    blocks_per_stage: int = 2
    hidden: tuple = (32,)
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["mask"] = self.mask.name
        d["widths"] = list(self.widths)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["mask"] = ModalityMask.parse(d["mask"])
        d["widths"] = tuple(d["widths"])
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


class Encoder(Sequential):
    """Stride-2 stem, residual stages (downsampling from the second on), global average pool."""

    def __init__(self, in_ch, widths, blocks, rng, dtype=np.float32):
        n_blocks = len(widths) * blocks
        # residual branches start small so the sum stays well scaled without normalization
        gain = n_blocks ** -0.5
        layers = [Conv2d(in_ch, widths[0], 3, 2, 1, rng, dtype=dtype), ReLU()]
        prev = widths[0]
        for si, w in enumerate(widths):
            for bi in range(blocks):
                stride = 2 if (si > 0 and bi == 0) else 1
                layers.append(ResidualBlock(prev, w, stride, rng, branch_gain=gain, dtype=dtype))
                prev = w
        layers.append(GlobalAvgPool())
        super().__init__(*layers)
        self.out_width = prev


class FusionModel:
    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoders = {m: Encoder(CHANNELS[m], cfg.widths, cfg.blocks_per_stage, rng, dtype)
                         for m in cfg.mask.active}
        self.fusion_width = sum(e.out_width for e in self.encoders.values())
        head, prev = [], self.fusion_width
        for h in cfg.hidden:
            head += [Dense(prev, h, rng, dtype=dtype), ReLU()]
            prev = h
        head.append(Dense(prev, 1, rng, gain=0.1, dtype=dtype))
        self.head = Sequential(*head)

    # -- parameters -------------------------------------------------------

    def named_params(self):
        for m, enc in self.encoders.items():
            yield from enc.named_params(f"encoder.{m}.")
        yield from self.head.named_params("head.")

    def param_dict(self) -> dict:
        return {name: arr for name, arr, _ in self.named_params()}

    def grad_dict(self) -> dict:
        out = {}
        for name, _, layer in self.named_params():
            out[name] = layer.grads[name.rsplit(".", 1)[1]]
        return out

    def get_params(self) -> dict:
        return {k: v.copy() for k, v in self.param_dict().items()}

    def set_params(self, params: dict):
        for name, arr, layer in self.named_params():
            if params[name].shape != arr.shape:
                raise ParamFormatError(f"{name}: shape {params[name].shape} != {arr.shape}")
            layer.params[name.rsplit(".", 1)[1]] = params[name].astype(arr.dtype, copy=True)

    def zero_grad(self):
        for enc in self.encoders.values():
            enc.zero_grad()
        self.head.zero_grad()

    # -- compute ----------------------------------------------------------

    def logits(self, inputs: dict) -> np.ndarray:
        feats = []
        for m, enc in self.encoders.items():
            if m not in inputs:
                raise MissingModality(m)
            feats.append(enc.forward(inputs[m]))
        self._splits = np.cumsum([f.shape[1] for f in feats])[:-1]
        z = self.head.forward(np.concatenate(feats, axis=1))
        return check_finite(z[:, 0], "model forward")

    def forward(self, inputs: dict) -> np.ndarray:
        """Success probabilities, one per sample."""
        return sigmoid(self.logits(inputs))

    def backward(self, dlogits: np.ndarray):
        dfeat = self.head.backward(dlogits[:, None].astype(self.head.layers[-1].params["W"].dtype))
        for (m, enc), d in zip(self.encoders.items(), np.split(dfeat, self._splits, axis=1)):
            enc.backward(np.ascontiguousarray(d))

    def predict(self, inputs: dict, batch: int = 128) -> np.ndarray:
        n = len(next(iter(inputs.values())))
        out = [self.forward({m: v[i:i + batch] for m, v in inputs.items()}) for i in range(0, n, batch)]
        return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------------------
# Input preparation
# ---------------------------------------------------------------------------

def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear resampling matrix with pixel-center alignment."""
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize(images: np.ndarray, res: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C, res, res)."""
    _, _, h, w = images.shape
    if h == res and w == res:
        return images.astype(np.float32)
    rh, rw = _interp_matrix(h, res), _interp_matrix(w, res)
    return np.einsum("ah,nchw,bw->ncab", rh, images.astype(np.float64), rw, optimize=True).astype(np.float32)


def prepare_inputs(samples, mask: ModalityMask, res: int, gel_thickness: float = 0.002,
                   far: float = 2.0) -> dict:
    """Network inputs for the active modalities, scaled to roughly [0, 1]."""
    out = {}
    for m in mask.active:
        if m == "vision":
            arr = np.stack([s.rgb for s in samples]).transpose(0, 3, 1, 2) / 255.0
        elif m == "depth":
            arr = np.stack([s.depth for s in samples])[:, None] / far
        else:
            attr = "tactile_left" if m == "touch_left" else "tactile_right"
            arr = np.stack([getattr(s, attr) for s in samples])[:, None] / gel_thickness
        out[m] = resize(arr, res)
    return out


# ---------------------------------------------------------------------------
# Parameter blob
# ---------------------------------------------------------------------------

def encode_params(cfg: ModelConfig, params: dict) -> bytes:
    names = list(params)
    header = {"config": cfg.to_dict(), "params": [[n, list(params[n].shape)] for n in names]}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(params[n], dtype="<f4").tobytes() for n in names)
    payload = PARAM_MAGIC + struct.pack("<II", PARAM_VERSION, len(hb)) + hb + body
    return payload + struct.pack("<I", zlib.crc32(payload))


def decode_params(data: bytes) -> tuple[ModelConfig, dict]:
    if data[:4] != PARAM_MAGIC:
        raise ParamFormatError("not a TGMP parameter blob")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != PARAM_VERSION:
        raise ParamFormatError(f"unsupported parameter blob version {version}")
    if struct.unpack("<I", data[-4:])[0] != zlib.crc32(data[:-4]):
        raise ParamFormatError("parameter blob checksum mismatch")
    header = json.loads(data[12:12 + hlen])
    pos = 12 + hlen
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(data, "<f4", n, pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    return ModelConfig.from_dict(header["config"]), params


def save_params(path, cfg: ModelConfig, params: dict):
    with open(path, "wb") as fh:
        fh.write(encode_params(cfg, params))


def load_params(path) -> tuple[ModelConfig, dict]:
    with open(path, "rb") as fh:
        return decode_params(fh.read())
