"""Layer-wise readout probing: where in the stack does the answer appear?

For each probed sample the model runs teacher-forced over prompt plus
reference; at every layer the residual stream goes through the model's
own final norm and output head, and we record the probability of the
true next token (gt_curve) and of the best token (max_curve), averaged
over samples. Curves are [n_layers x n_tokens], layer 1 first.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ComparisonError, InputError
from .lora import LoraSet, drop_above
from .model import BaseWeights, forward_collect, lens_probs

log = logging.getLogger(__name__)

DEFAULT_N_TOKENS = 4
DEFAULT_SAMPLE_BUDGET = 100

# keep-depth fractions for the standard drop levels, scaled to any stack height
DEFAULT_KEEP_FRACTIONS = (10 / 32, 20 / 32, 25 / 32)


def default_drop_levels(n_layers: int) -> list[int]:
    """The standard keep-bottom levels used by drop-probing reports."""
    return sorted({int(n_layers * f) for f in DEFAULT_KEEP_FRACTIONS})


@dataclass
class ProbeReport:
    n_layers: int
    n_tokens: int
    sample_count: int
    gt_curve: np.ndarray    # [L, n_tokens] mean prob of the true token
    max_curve: np.ndarray   # [L, n_tokens] mean prob of the argmax token
    config: dict = field(default_factory=dict)

    def mean_gt_by_layer(self) -> np.ndarray:
        """Row means of gt_curve; the knee detector consumes this."""
        return self.gt_curve.mean(axis=1)

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_tokens": self.n_tokens,
            "sample_count": self.sample_count,
            "gt_curve": [[float(x) for x in row] for row in self.gt_curve],
            "max_curve": [[float(x) for x in row] for row in self.max_curve],
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProbeReport":
        try:
            report = cls(
                n_layers=int(data["n_layers"]),
                n_tokens=int(data["n_tokens"]),
                sample_count=int(data["sample_count"]),
                gt_curve=np.asarray(data["gt_curve"], dtype=np.float64),
                max_curve=np.asarray(data["max_curve"], dtype=np.float64),
                config=dict(data.get("config", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed probe report: {exc}") from exc
        if report.gt_curve.shape != (report.n_layers, report.n_tokens):
            raise InputError(
                f"gt_curve shape {report.gt_curve.shape} does not match "
                f"{report.n_layers} layers x {report.n_tokens} tokens")
        return report


def _sample_pair(sample):
    if hasattr(sample, "prompt_ids"):
        return list(sample.prompt_ids), list(sample.reference_ids)
    prompt, ref = sample
    return list(prompt), list(ref)


def select_samples(samples, budget: int, seed: int) -> list:
    """Deterministic subsample: `budget` items chosen without replacement,
    kept in original order. The full list is returned when it fits."""
    samples = list(samples)
    if budget >= len(samples):
        return samples
    if budget < 1:
        raise InputError(f"sample budget must be positive, got {budget}")
    idx = np.random.default_rng(seed).choice(len(samples), size=budget, replace=False)
    return [samples[i] for i in sorted(idx)]


def samples_hash(samples) -> str:
    h = hashlib.sha256()
    for s in samples:
        prompt, ref = _sample_pair(s)
        h.update(",".join(map(str, prompt)).encode())
        h.update(b"/")
        h.update(",".join(map(str, ref)).encode())
        h.update(b";")
    return h.hexdigest()[:16]


def probe_ground_truth(base: BaseWeights, adapters: LoraSet | None, samples, *,
                       n_tokens: int = DEFAULT_N_TOKENS,
                       budget: int = DEFAULT_SAMPLE_BUDGET,
                       seed: int = 0, active=None,
                       descriptor: dict | None = None) -> ProbeReport:
    """Mean per-layer readout probabilities over a sampled set.

    Samples whose reference is shorter than n_tokens are skipped with a
    warning; an entirely empty probe is an error.
    """
    if n_tokens < 1:
        raise InputError(f"n_tokens must be at least 1, got {n_tokens}")
    chosen = select_samples(samples, budget, seed)
    if not chosen:
        raise InputError("no samples to probe")

    kept = []
    for i, s in enumerate(chosen):
        prompt, ref = _sample_pair(s)
        if len(ref) < n_tokens:
            log.warning("probe: sample %d has a %d-token reference, need %d; skipped",
                        i, len(ref), n_tokens)
            continue
        kept.append((prompt, ref))
    if not kept:
        raise InputError(
            f"every probed sample has a reference shorter than {n_tokens} tokens")

    l = base.cfg.n_layers
    gt_sum = np.zeros((l, n_tokens), dtype=np.float64)
    max_sum = np.zeros((l, n_tokens), dtype=np.float64)
    for prompt, ref in kept:
        trace = forward_collect(base, adapters, prompt + ref[:n_tokens], active)
        positions = [len(prompt) - 1 + i for i in range(n_tokens)]
        dists = lens_probs(base, trace, positions)      # [L, n, V]
        ref_ids = np.asarray(ref[:n_tokens])
        gt_sum += dists[:, np.arange(n_tokens), ref_ids]
        max_sum += dists.max(axis=-1)

    n = len(kept)
    config = {
        "base": base.fingerprint(),
        "adapters": adapters.content_hash() if adapters is not None else None,
        "active": list(map(bool, active)) if active is not None else None,
        "n_tokens": n_tokens,
        "budget": budget,
        "seed": seed,
        "samples_hash": samples_hash(kept),
    }
    if descriptor:
        config.update(descriptor)
    return ProbeReport(n_layers=l, n_tokens=n_tokens, sample_count=n,
                       gt_curve=gt_sum / n, max_curve=max_sum / n, config=config)


def probe_under_drop(base: BaseWeights, full_set: LoraSet, samples, keeps=None, *,
                     n_tokens: int = DEFAULT_N_TOKENS,
                     budget: int = DEFAULT_SAMPLE_BUDGET, seed: int = 0,
                     descriptor: dict | None = None) -> list[tuple[int, ProbeReport]]:
    """Probe the same sample set under several keep-bottom levels."""
    if keeps is None:
        keeps = default_drop_levels(base.cfg.n_layers)
    chosen = select_samples(samples, budget, seed)
    out = []
    for k in keeps:
        dropped = drop_above(full_set, k)
        extra = {"keep_bottom": int(k)}
        if descriptor:
            extra.update(descriptor)
        out.append((int(k), probe_ground_truth(
            base, dropped, chosen, n_tokens=n_tokens, budget=len(chosen),
            seed=seed, descriptor=extra)))
    return out


def probe_difference(ours: ProbeReport, baseline: ProbeReport) -> np.ndarray:
    """gt_curve difference (ours - baseline); reports must cover the same samples."""
    if ours.gt_curve.shape != baseline.gt_curve.shape:
        raise ComparisonError(
            f"curve shapes differ: {ours.gt_curve.shape} vs {baseline.gt_curve.shape}")
    if ours.n_tokens != baseline.n_tokens:
        raise ComparisonError(
            f"n_tokens differ: {ours.n_tokens} vs {baseline.n_tokens}")
    ours_hash = ours.config.get("samples_hash")
    base_hash = baseline.config.get("samples_hash")
    if ours_hash != base_hash:
        raise ComparisonError(
            f"reports probe different sample sets: {ours_hash} vs {base_hash}")
    return ours.gt_curve - baseline.gt_curve
