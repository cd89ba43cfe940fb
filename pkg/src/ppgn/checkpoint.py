"""Binary checkpoint format: magic, JSON header, then raw float32 tensors.

The header carries everything needed to rebuild the model without the
original config file: config fields, anchor priors, the token vocabulary,
and the tensor directory in write order. Loading restores forward outputs
bit-for-bit in eval mode.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anchors import AnchorSet
from .config import RunConfig
from .errors import ConsistencyError, InvalidInputError
from .model import ModelConfig, PPGNModel

MAGIC = b"PPGN1"


@dataclass
class Checkpoint:
    model: PPGNModel
    anchor_set: AnchorSet
    vocab: dict[str, int]
    config: RunConfig
    step: int
    fingerprint: str


def model_config_from_run(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        image_size=cfg.image_size,
        scales=cfg.scales,
        channels=cfg.channels,
        embed_dim=cfg.embed_dim,
        anchors_per_cell=cfg.anchors_per_cell,
    )


def save_checkpoint(path, model: PPGNModel, anchor_set: AnchorSet,
                    vocab: dict[str, int], config: RunConfig, step: int):
    state = model.state_dict()
    names = sorted(state)
    header = {
        "fingerprint": config.fingerprint(),
        "step": int(step),
        "config": {
            "seed": config.seed, "dataset": config.dataset,
            "out_dir": config.out_dir, "loss": config.loss,
            "eta": config.eta, "gamma": config.gamma, "k": config.k,
            "batch_size": config.batch_size, "base_lr": config.base_lr,
            "max_steps": config.max_steps,
            "backbone_lr_divisor": config.backbone_lr_divisor,
            "scales": list(config.scales), "channels": config.channels,
            "embed_dim": config.embed_dim,
            "anchors_per_cell": config.anchors_per_cell,
            "image_size": config.image_size, "anchors": config.anchors,
            "eval_interval": config.eval_interval,
        },
        "anchor_priors": [[w, h] for w, h in anchor_set.priors],
        "anchor_scales": list(anchor_set.scales),
        "anchors_per_cell": anchor_set.anchors_per_cell,
        "vocab": vocab,
        "tensors": [{"name": n, "shape": list(state[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(state[n], dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise InvalidInputError(f"{path} is not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
    off = len(MAGIC) + 4
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen

    cfg_fields = dict(header["config"])
    cfg_fields["scales"] = tuple(cfg_fields["scales"])
    config = RunConfig(**cfg_fields)
    vocab = {str(k): int(v) for k, v in header["vocab"].items()}
    anchor_set = AnchorSet(
        [(w, h) for w, h in header["anchor_priors"]],
        tuple(header["anchor_scales"]),
        int(header["anchors_per_cell"]),
    )
    model = PPGNModel(model_config_from_run(config), len(vocab), seed=config.seed)

    state = {}
    for entry in header["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        chunk = raw[off : off + 4 * count]
        if len(chunk) != 4 * count:
            raise ConsistencyError(f"checkpoint truncated at tensor {entry['name']}")
        state[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        off += 4 * count
    if off != len(raw):
        raise ConsistencyError(f"{len(raw) - off} trailing bytes in checkpoint")
    model.load_state(state)
    if config.fingerprint() != header["fingerprint"]:
        raise ConsistencyError("checkpoint fingerprint does not match its config")
    return Checkpoint(
        model=model, anchor_set=anchor_set, vocab=vocab, config=config,
        step=int(header["step"]), fingerprint=header["fingerprint"],
    )
