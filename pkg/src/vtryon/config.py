"""Run configuration: one JSON file, any field overridable by ``--key=value``."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path


@dataclass
class RunConfig:
    data_root: str = "data/synth"
    out_dir: str = "runs/desk"
    resolution: tuple = (64, 48)
    batch_size: int = 8
    epochs: int = 15
    # explicit per-stage step counts; None means epochs * batches per epoch
    warp_steps: int | None = 300
    seg_steps: int | None = 300
    tryon_steps: int | None = 400
    lr: float = 0.002
    betas: tuple = (0.9, 0.999)
    lambdas: tuple = (1.0, 1.0, 1.0, 0.5, 0.5)
    k: float = 3.0
    clamp_push: bool = True
    # conditioning steps (None: 3 epochs' worth; inf disables the duelling phase)
    K: float | None = 40
    T: int | None = 20        # phase length in steps (None: one epoch's worth)
    class_weights: dict = field(default_factory=lambda: {"background": 3.0, "skin": 3.0})
    grid_size: int = 5
    warp_base: int = 16
    unet_base: int = 32
    use_fine: bool = True
    use_seg: bool = True
    embedder: str = "random"
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        self.resolution = tuple(int(v) for v in self.resolution)
        self.betas = tuple(float(v) for v in self.betas)
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if self.K is not None:
            self.K = float(self.K)
            if not math.isinf(self.K):
                self.K = int(self.K)
        problems = []
        if self.T is not None and self.T < 1:
            problems.append("T")
        for name in ("batch_size", "epochs", "grid_size", "warp_base", "unet_base"):
            if getattr(self, name) < 1:
                problems.append(name)
        for name in ("warp_steps", "seg_steps", "tryon_steps"):
            v = getattr(self, name)
            if v is not None and v < 1:
                problems.append(name)
        if self.lr <= 0:
            problems.append("lr")
        if self.k <= 1:
            problems.append("k")
        if self.K is not None and self.K < 1:
            problems.append("K")
        if any(v < 0 for v in self.lambdas) or len(self.lambdas) != 5:
            problems.append("lambdas")
        if any(float(v) <= 0 for v in self.class_weights.values()):
            problems.append("class_weights")
        if problems:
            raise ValueError(f"invalid configuration values: {', '.join(problems)}")

    @property
    def duelling(self):
        return self.K is None or not math.isinf(self.K)

    def schedule(self, n_samples):
        """Resolved ``(K, T)`` in steps."""
        per_epoch = max(1, math.ceil(n_samples / self.batch_size))
        K = 3 * per_epoch if self.K is None else self.K
        T = per_epoch if self.T is None else self.T
        return K, T

    def stage_steps(self, stage, n_samples):
        explicit = getattr(self, f"{stage}_steps")
        if explicit is not None:
            return explicit
        return self.epochs * max(1, math.ceil(n_samples / self.batch_size))

    def to_dict(self):
        d = asdict(self)
        if self.K is not None and math.isinf(self.K):
            d["K"] = "inf"
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def paper(cls, **changes):
        """Full-scale hyperparameters: batch 16, 15 epochs, Adam at lr 0.002."""
        base = dict(resolution=(256, 192), batch_size=16, epochs=15, warp_steps=None, seg_steps=None,
                    tryon_steps=None, lr=0.002, unet_base=64, warp_base=32, embedder="vgg19", K=None, T=None)
        base.update(changes)
        return cls(**base)


def parse_value(raw, current):
    """Interpret a ``--key=value`` string against the field's current value."""
    if raw in ("inf", "Infinity"):
        return math.inf
    if raw in ("none", "None", "null"):
        return None
    if isinstance(current, tuple) and not raw.lstrip().startswith("["):
        return tuple(json.loads(f"[{raw}]"))
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg, overrides):
    """Apply ``["--key=value", ...]`` (dashes in keys may be underscores)."""
    d = cfg.to_dict()
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise ValueError(f"override must look like --key=value, got {item!r}")
        key, raw = item[2:].split("=", 1)
        key = key.replace("-", "_")
        if key not in d:
            raise KeyError(f"unknown config key {key!r}")
        d[key] = parse_value(raw, getattr(cfg, key))
    return RunConfig.from_dict(d)
