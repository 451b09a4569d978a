"""Finding the layer above which adapters stop paying for themselves.

Two routes produce a BoundaryDecision: detect_knee reads the largest
jump off a per-layer probability curve, and sweep_boundary measures a
task metric under every candidate keep level and takes the smallest
level that attains the best validation score. apply_boundary then drops
every adapter above the chosen level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics as metrics_mod
from .errors import CompatibilityError, InputError, NoKneeError
from .lora import LoraSet, check_compat, drop_above
from .model import BaseWeights, generate_greedy
from .probe import ProbeReport, select_samples
from .vocab import EOS_ID, decode

DEFAULT_MIN_JUMP_RATIO = 0.25
DEFAULT_SWEEP_BUDGET = 500
DEFAULT_DECODE_BUDGET = 24

# keep-depth used when no signal is available, as a fraction of the stack
FALLBACK_KEEP_FRACTION = 15 / 32


def default_boundary(n_layers: int) -> int:
    """Depth to fall back to when neither knee nor sweep is available."""
    if n_layers < 1:
        raise InputError(f"n_layers must be positive, got {n_layers}")
    return round(n_layers * FALLBACK_KEEP_FRACTION)


@dataclass
class BoundaryDecision:
    k_star: int
    per_k_scores: dict[int, float]
    metric: str
    sample_count: int
    method: str                    # "knee" or "sweep"
    seed: int
    set_hash: str | None = None    # adapter set this decision belongs to
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "k_star": self.k_star,
            "per_k_scores": {str(k): float(v) for k, v in sorted(self.per_k_scores.items())},
            "metric": self.metric,
            "sample_count": self.sample_count,
            "method": self.method,
            "seed": self.seed,
            "set_hash": self.set_hash,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BoundaryDecision":
        try:
            return cls(
                k_star=int(data["k_star"]),
                per_k_scores={int(k): float(v)
                              for k, v in data["per_k_scores"].items()},
                metric=str(data["metric"]),
                sample_count=int(data["sample_count"]),
                method=str(data["method"]),
                seed=int(data["seed"]),
                set_hash=data.get("set_hash"),
                extra=dict(data.get("extra", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed boundary decision: {exc}") from exc


def detect_knee(curve, min_jump_ratio: float = DEFAULT_MIN_JUMP_RATIO) -> int:
    """Layer index (1-based) whose successor shows the largest curve jump.

    curve[i] is the value at layer i+1. The winning jump must be at least
    min_jump_ratio of the curve's total range; otherwise, or when the
    curve is flat, there is no knee and the caller must fall back.
    Ties break toward the smallest layer.
    """
    c = np.asarray(curve, dtype=np.float64)
    if c.ndim != 1 or c.size < 2:
        raise InputError(f"curve must be a flat series of at least 2 layers, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise InputError("curve contains non-finite values")
    span = float(c.max() - c.min())
    if span <= 1e-12:
        raise NoKneeError("curve is flat; no knee to detect")
    jumps = c[1:] - c[:-1]
    idx = int(np.argmax(jumps))          # first occurrence wins ties
    if jumps[idx] < min_jump_ratio * span:
        raise NoKneeError(
            f"largest jump {jumps[idx]:.6g} is below {min_jump_ratio} of the "
            f"curve range {span:.6g}")
    return idx + 1


def knee_from_report(report: ProbeReport,
                     min_jump_ratio: float = DEFAULT_MIN_JUMP_RATIO,
                     fallback: bool = False) -> BoundaryDecision:
    """Run knee detection on the row-mean ground-truth curve of a probe report.

    With fallback=True a missing knee resolves to the default depth
    instead of raising.
    """
    curve = report.mean_gt_by_layer()
    used_fallback = False
    try:
        k = detect_knee(curve, min_jump_ratio)
    except NoKneeError:
        if not fallback:
            raise
        k = default_boundary(report.n_layers)
        used_fallback = True
    return BoundaryDecision(
        k_star=k,
        per_k_scores={i + 1: float(v) for i, v in enumerate(curve)},
        metric="mean-reference-prob",
        sample_count=report.sample_count,
        method="knee",
        seed=int(report.config.get("seed", 0)),
        set_hash=report.config.get("adapters"),
        extra={"min_jump_ratio": min_jump_ratio, "fallback": used_fallback},
    )


def coarse_then_fine_levels(n_layers: int, stride: int = 2) -> list[int]:
    """Coarse sweep grid: every `stride` levels plus the endpoints 0 and L."""
    if stride < 1:
        raise InputError(f"stride must be at least 1, got {stride}")
    return sorted(set(range(0, n_layers + 1, stride)) | {0, n_layers})


def sweep_boundary(base: BaseWeights, full_set: LoraSet, samples, metric, *,
                   keeps=None, budget: int = DEFAULT_SWEEP_BUDGET,
                   decode_budget: int = DEFAULT_DECODE_BUDGET,
                   golds: list[str] | None = None, seed: int = 0,
                   stop_token: int = EOS_ID, refine: bool = False) -> BoundaryDecision:
    """Score every candidate keep level on held-out samples and pick the best.

    metric is a name from the metrics registry or a callable
    (preds, golds) -> float. golds defaults to each sample's gold_text.
    The winner is the smallest level attaining the maximum score. With
    refine=True a second pass checks the immediate neighbors of the
    first-pass winner (useful with a strided `keeps` grid).
    """
    check_compat(base, full_set)
    n_layers = base.cfg.n_layers
    if keeps is None:
        keeps = range(n_layers + 1)
    keeps = sorted(set(int(k) for k in keeps))
    for k in keeps:
        if not 0 <= k <= n_layers:
            raise InputError(f"keep level {k} out of range 0..{n_layers}")
    if not keeps:
        raise InputError("no keep levels to sweep")

    chosen = select_samples(samples, budget, seed)
    if not chosen:
        raise InputError("no samples to sweep over")
    if golds is None:
        golds = [_gold_of(s) for s in chosen]
    elif len(golds) != len(chosen):
        raise InputError(f"got {len(golds)} golds for {len(chosen)} samples")

    if callable(metric):
        metric_name = getattr(metric, "__name__", "custom")
        score_fn = metric
    else:
        metric_name = str(metric)
        score_fn = lambda preds, gs: metrics_mod.corpus_score(metric_name, preds, gs).score

    def run_level(k: int) -> float:
        dropped = drop_above(full_set, k)
        preds = []
        for s in chosen:
            out = generate_greedy(base, dropped, _prompt_of(s), decode_budget,
                                  stop_token)
            preds.append(decode(out))
        return float(score_fn(preds, golds))

    per_k: dict[int, float] = {}
    for k in keeps:
        per_k[k] = run_level(k)

    def pick(scores: dict[int, float]) -> int:
        best = max(scores.values())
        return min(k for k, v in scores.items() if v == best)

    k_star = pick(per_k)
    if refine:
        for k in (k_star - 1, k_star + 1):
            if 0 <= k <= n_layers and k not in per_k:
                per_k[k] = run_level(k)
        k_star = pick(per_k)

    return BoundaryDecision(
        k_star=k_star, per_k_scores=per_k, metric=metric_name,
        sample_count=len(chosen), method="sweep", seed=seed,
        set_hash=full_set.content_hash(),
        extra={"decode_budget": decode_budget, "refine": refine},
    )


def apply_boundary(full_set: LoraSet, decision: BoundaryDecision) -> LoraSet:
    """Drop every adapter above the decided level; checks the set matches."""
    if decision.set_hash and decision.set_hash != full_set.content_hash():
        raise CompatibilityError(
            f"decision was made for adapter set {decision.set_hash}, "
            f"got {full_set.content_hash()}")
    return drop_above(full_set, decision.k_star)


def _prompt_of(sample):
    if hasattr(sample, "prompt_ids"):
        return list(sample.prompt_ids)
    return list(sample[0])


def _gold_of(sample) -> str:
    gold = getattr(sample, "gold_text", None)
    if callable(gold):
        return gold()
    if gold is not None:
        return gold
    raise InputError(
        "sample has no gold_text; pass golds= explicitly for plain tuples")
