"""Low-rank adapter containers and the algebra on sets of them.

An adapter for a projection with weight [d_in, d_out] holds A [r, d_in]
and B [d_out, r]; its dense delta is (alpha / r) * B @ A, but the hot
path always applies the two factors separately. Sets are keyed by
(layer, projection) with layers numbered 1..L, and carry the
fingerprint of the base model they belong to.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CompatibilityError, ConfigError, InputError, ShapeError
from .model import PROJECTIONS, BaseWeights, ModelConfig

DEFAULT_TARGETS = ("q", "v")
DEFAULT_RANK = 8
DEFAULT_ALPHA = 16.0


@dataclass
class LoraAdapter:
    a: np.ndarray       # [rank, d_in]
    b: np.ndarray       # [d_out, rank]
    alpha: float

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[0] != self.b.shape[1]:
            raise ShapeError(f"inconsistent adapter factors {self.a.shape} / {self.b.shape}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        """Dense [d_out, d_in] update; for merging and oracles, not the hot path."""
        return self.scale * (self.b @ self.a)

    def param_count(self) -> int:
        return self.a.size + self.b.size


@dataclass
class LoraSet:
    """All adapters trained against one base model."""

    n_layers: int
    alpha: float
    rank: int
    targets: tuple[str, ...]
    fingerprint: str
    adapters: dict[tuple[int, str], LoraAdapter] = field(default_factory=dict)

    def get(self, layer: int, proj: str) -> LoraAdapter | None:
        return self.adapters.get((layer, proj))

    def keys_sorted(self) -> list[tuple[int, str]]:
        return sorted(self.adapters, key=lambda k: (k[0], PROJECTIONS.index(k[1])))

    def layers(self) -> list[int]:
        return sorted({layer for layer, _ in self.adapters})

    def param_count(self) -> int:
        return sum(ad.param_count() for ad in self.adapters.values())

    def content_hash(self) -> str:
        """Hash of adapter values plus the base fingerprint; identifies this set."""
        h = hashlib.sha256()
        h.update(self.fingerprint.encode())
        h.update(f"{self.alpha}:{self.rank}".encode())
        for layer, proj in self.keys_sorted():
            ad = self.adapters[(layer, proj)]
            h.update(f"{layer}.{proj}".encode())
            h.update(np.ascontiguousarray(ad.a, dtype=np.float32).tobytes())
            h.update(np.ascontiguousarray(ad.b, dtype=np.float32).tobytes())
        return h.hexdigest()[:16]


def projection_dims(cfg: ModelConfig, proj: str) -> tuple[int, int]:
    """(d_in, d_out) of one projection site."""
    d = cfg.d_model
    if proj in ("q", "k", "v", "o"):
        return d, d
    if proj == "up":
        return d, cfg.d_ff
    if proj == "down":
        return cfg.d_ff, d
    raise ConfigError(f"unknown projection {proj!r}; expected one of {PROJECTIONS}")


def normalize_targets(targets) -> tuple[str, ...]:
    targets = tuple(targets)
    bad = [t for t in targets if t not in PROJECTIONS]
    if bad:
        raise ConfigError(f"unknown projection targets {bad}; expected subset of {PROJECTIONS}")
    if len(set(targets)) != len(targets):
        raise ConfigError(f"duplicate projection targets in {targets}")
    return tuple(p for p in PROJECTIONS if p in targets)


def init_adapters(cfg: ModelConfig, targets=DEFAULT_TARGETS, rank: int = DEFAULT_RANK,
                  alpha: float = DEFAULT_ALPHA, seed: int = 0) -> LoraSet:
    """Fresh adapters on every layer: A ~ N(0, 0.02^2) seeded, B = 0.

    A new set's delta is exactly zero, so it leaves the base model's
    behavior untouched until trained. The fingerprint is bound to the
    model config here and to full base weights once training sees them.
    """
    cfg.validate()
    targets = normalize_targets(targets)
    if not targets:
        raise ConfigError("at least one projection target is required")
    rng = np.random.default_rng(seed)
    adapters: dict[tuple[int, str], LoraAdapter] = {}
    for layer in range(1, cfg.n_layers + 1):
        for proj in targets:
            d_in, d_out = projection_dims(cfg, proj)
            if not 1 <= rank <= min(d_in, d_out):
                raise ConfigError(
                    f"rank {rank} invalid for projection {proj!r} with dims "
                    f"({d_in}, {d_out})")
            a = rng.normal(0.0, 0.02, size=(rank, d_in)).astype(np.float32)
            b = np.zeros((d_out, rank), dtype=np.float32)
            adapters[(layer, proj)] = LoraAdapter(a=a, b=b, alpha=float(alpha))
    return LoraSet(n_layers=cfg.n_layers, alpha=float(alpha), rank=rank,
                   targets=targets, fingerprint=cfg.config_hash(), adapters=adapters)


def adapted_projection(w: np.ndarray, adapter: LoraAdapter, x: np.ndarray) -> np.ndarray:
    """Apply W [d_out, d_in] plus the adapter to x [..., d_in], factored order."""
    if w.ndim != 2:
        raise ShapeError(f"weight must be rank 2, got {w.shape}")
    d_out, d_in = w.shape
    if x.shape[-1] != d_in:
        raise ShapeError(f"input trailing dim {x.shape[-1]} != weight d_in {d_in}")
    if adapter.a.shape[1] != d_in or adapter.b.shape[0] != d_out:
        raise ShapeError(
            f"adapter dims A{adapter.a.shape} / B{adapter.b.shape} do not fit "
            f"weight {w.shape}")
    return x @ w.T + adapter.scale * ((x @ adapter.a.T) @ adapter.b.T)


def active_mask(n_layers: int, keep_bottom: int) -> list[bool]:
    """Boolean per layer 1..L: True iff the layer index is <= keep_bottom."""
    if not 0 <= keep_bottom <= n_layers:
        raise InputError(f"keep_bottom {keep_bottom} out of range 0..{n_layers}")
    return [layer <= keep_bottom for layer in range(1, n_layers + 1)]


def drop_above(lset: LoraSet, keep_bottom: int) -> LoraSet:
    """New set keeping only adapters on layers 1..keep_bottom; 0 keeps none.

    Adapter tensors are shared, not copied; the input set is untouched.
    """
    if not 0 <= keep_bottom <= lset.n_layers:
        raise InputError(
            f"keep_bottom {keep_bottom} out of range 0..{lset.n_layers}")
    kept = {key: ad for key, ad in lset.adapters.items() if key[0] <= keep_bottom}
    return LoraSet(n_layers=lset.n_layers, alpha=lset.alpha, rank=lset.rank,
                   targets=lset.targets, fingerprint=lset.fingerprint, adapters=kept)


def check_compat(base: BaseWeights, lset: LoraSet) -> None:
    """Adapters must carry the base's fingerprint (or its config hash, if untrained)."""
    full = base.fingerprint()
    cfg_only = base.config_fingerprint()
    if lset.fingerprint not in (full, cfg_only):
        raise CompatibilityError(
            f"adapter set was built for {lset.fingerprint}, model is {full}")
    if lset.n_layers != base.cfg.n_layers:
        raise CompatibilityError(
            f"adapter set spans {lset.n_layers} layers, model has {base.cfg.n_layers}")


def merge(base: BaseWeights, lset: LoraSet) -> BaseWeights:
    """Fold every adapter into a copy of the base weights.

    The merged plain model matches the factored adapted forward up to
    float32 rounding on the order of 1e-3 in logits.
    """
    check_compat(base, lset)
    merged = base.clone()
    name_for = {"q": "wq", "k": "wk", "v": "wv", "o": "wo", "up": "wup", "down": "wdown"}
    for (layer, proj), ad in lset.adapters.items():
        name = f"layer{layer:02d}.{name_for[proj]}"
        w = merged.tensors[name]
        d_in, d_out = projection_dims(base.cfg, proj)
        if ad.a.shape[1] != d_in or ad.b.shape[0] != d_out:
            raise ShapeError(
                f"adapter at ({layer}, {proj}) has dims A{ad.a.shape} / B{ad.b.shape}, "
                f"projection needs ({d_in}, {d_out})")
        w += ad.delta().T
    return merged


def lora_param_dict(lset: LoraSet) -> dict[str, np.ndarray]:
    """Flat name -> tensor view of a set, matching gradient keys from the model."""
    params: dict[str, np.ndarray] = {}
    for layer, proj in lset.keys_sorted():
        ad = lset.adapters[(layer, proj)]
        params[f"layer{layer:02d}.{proj}.lora_a"] = ad.a
        params[f"layer{layer:02d}.{proj}.lora_b"] = ad.b
    return params
