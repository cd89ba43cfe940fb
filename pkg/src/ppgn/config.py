"""Run configuration: a flat key=value file mirroring the dataclass fields."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import InvalidInputError

LOSS_VARIANTS = ("kld", "softmax")


@dataclass
class RunConfig:
    seed: int = 7
    dataset: str = "data/world"
    out_dir: str = "runs/default"
    loss: str = "kld"
    eta: float = 0.7
    gamma: float = 1.0
    k: int = 7
    batch_size: int = 32
    base_lr: float = 1e-4
    max_steps: int = 5000
    backbone_lr_divisor: float = 10.0
    scales: tuple[int, ...] = (4, 8, 16)
    channels: int = 64
    embed_dim: int = 32
    anchors_per_cell: int = 3
    image_size: int = 128
    anchors: str = "recompute"  # or "WxH,WxH,..." pairs, one per prior
    eval_interval: int = 250

    def __post_init__(self):
        if self.loss not in LOSS_VARIANTS:
            raise InvalidInputError(
                f"loss must be one of {LOSS_VARIANTS}, got {self.loss!r}"
            )
        if not 0.0 < self.eta < 1.0:
            raise InvalidInputError(f"eta must lie in (0, 1), got {self.eta}")
        if self.k < 1 or self.batch_size < 1 or self.max_steps < 1:
            raise InvalidInputError("k, batch_size, and max_steps must be >= 1")
        if self.base_lr <= 0 or self.gamma < 0:
            raise InvalidInputError("base_lr must be > 0 and gamma >= 0")
        if self.backbone_lr_divisor <= 0:
            raise InvalidInputError("backbone_lr_divisor must be > 0")
        if self.eval_interval < 1:
            raise InvalidInputError("eval_interval must be >= 1")
        self.scales = tuple(int(s) for s in self.scales)
        if self.anchors != "recompute":
            self.anchor_priors()  # validates the inline format

    def anchor_priors(self) -> list[tuple[float, float]] | None:
        """Parsed inline priors, or None when they are to be recomputed."""
        if self.anchors == "recompute":
            return None
        try:
            pairs = [
                tuple(float(v) for v in item.split("x"))
                for item in self.anchors.split(",")
            ]
        except ValueError as exc:
            raise InvalidInputError(f"cannot parse anchors {self.anchors!r}") from exc
        if any(len(p) != 2 or p[0] <= 0 or p[1] <= 0 for p in pairs):
            raise InvalidInputError(f"bad anchor pair in {self.anchors!r}")
        expected = self.anchors_per_cell * len(self.scales)
        if len(pairs) != expected:
            raise InvalidInputError(
                f"expected {expected} anchor pairs, got {len(pairs)}"
            )
        return [(p[0], p[1]) for p in pairs]

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @staticmethod
    def parse(text: str) -> "RunConfig":
        known = {f.name: f for f in fields(RunConfig)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidInputError(f"line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise InvalidInputError(f"line {lineno}: unknown key {key!r}")
            values[key] = _convert(key, value, known[key].type)
        return RunConfig(**values)

    @staticmethod
    def load(path) -> "RunConfig":
        return RunConfig.parse(Path(path).read_text(encoding="utf-8"))


def _convert(key: str, value: str, annotation: str):
    if key == "scales":
        return tuple(int(v) for v in value.split(","))
    if annotation == "int":
        return int(value)
    if annotation == "float":
        return float(value)
    return value
