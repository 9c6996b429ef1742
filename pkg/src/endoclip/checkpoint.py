"""Binary checkpoint container.

Layout (all integers little-endian):
  magic "CKPT" | version u32 | meta blob | named tensor table | optimizer blob

The meta blob is length-prefixed JSON carrying the epoch, the frozen text
encoder's seed, the vocabulary, and the full run configuration. The tensor
table stores every model tensor (trainable and frozen attention bases) as
name, shape, and raw float64 payload, so a loaded model reproduces forward
outputs bit-exactly. The optimizer blob is the step count plus first/second
moments in the same table format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .encoders import Vocabulary
from .errors import ManifestError
from .model import JointModel
from .optim import AdamWState

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    epoch: int
    text_seed: int
    vocab: Vocabulary
    config: TrainConfig
    tensors: dict[str, np.ndarray]
    opt_state: AdamWState


def _write_tensor_table(fh, tensors: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name, data in tensors.items():
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<I", data.ndim))
        fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
        fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def _read_tensor_table(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", fh.read(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", fh.read(4))
        name = fh.read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape).copy()
        tensors[name] = data
    return tensors


def save_checkpoint(path, model: JointModel, config: TrainConfig,
                    opt_state: AdamWState, epoch: int) -> None:
    meta = {
        "epoch": epoch,
        "text_seed": model.text_seed,
        "vocab": model.text.vocab.tokens,
        "config": config.to_dict(),
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        _write_tensor_table(fh, {name: p.data for name, p in model.named_parameters()})
        fh.write(struct.pack("<Q", opt_state.t))
        moments = {f"m.{k}": v for k, v in opt_state.m.items()}
        moments.update({f"v.{k}": v for k, v in opt_state.v.items()})
        _write_tensor_table(fh, moments)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise ManifestError(f"not a checkpoint: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise ManifestError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        tensors = _read_tensor_table(fh)
        (t,) = struct.unpack("<Q", fh.read(8))
        moments = _read_tensor_table(fh)
    opt_state = AdamWState(t=t)
    for name, data in moments.items():
        kind, param = name.split(".", 1)
        (opt_state.m if kind == "m" else opt_state.v)[param] = data
    return Checkpoint(
        epoch=meta["epoch"],
        text_seed=meta["text_seed"],
        vocab=Vocabulary(meta["vocab"]),
        config=TrainConfig.from_dict(meta["config"]),
        tensors=tensors,
        opt_state=opt_state,
    )


def restore_model(ckpt: Checkpoint) -> JointModel:
    """Rebuild the model and overwrite its tensors from the checkpoint table."""
    model = JointModel(ckpt.config, ckpt.vocab, text_seed=ckpt.text_seed)
    params = dict(model.named_parameters())
    if set(params) != set(ckpt.tensors):
        missing = set(params) ^ set(ckpt.tensors)
        raise ManifestError(f"checkpoint tensor names disagree with model: {sorted(missing)}")
    for name, data in ckpt.tensors.items():
        if params[name].data.shape != data.shape:
            raise ManifestError(
                f"checkpoint tensor {name!r} shape {data.shape} != model {params[name].data.shape}")
        params[name].data = data.copy()
    return model
