"""Training loops: base-model pretraining and adapter-only fine-tuning.

All loops walk sequences one at a time and average gradients over a
batch before each optimizer step, so runs are deterministic for a given
seed regardless of batch size quirks. Fine-tuning touches adapter
factors only; the base weights are read, never written.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .lora import LoraSet, drop_above, init_adapters, lora_param_dict
from .model import BaseWeights, ModelConfig, init_base, loss_and_grads
from .numerics import AdamState, adam_step, clip_by_global_norm

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 3
    batch: int = 16
    seed: int = 0
    loss_mask_prompt: bool = True
    grad_clip: float = 1.0   # global-norm ceiling; 0 disables

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError(
                f"epochs and batch must be at least 1, got {self.epochs}/{self.batch}")
        if self.grad_clip < 0:
            raise ConfigError(f"grad_clip must be non-negative, got {self.grad_clip}")
        return self


def write_train_log(path, history) -> None:
    """TSV with one row per optimizer step: epoch, step, loss."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch\tstep\tloss\n")
        for epoch, step, loss in history:
            f.write(f"{epoch}\t{step}\t{loss!r}\n")


def _pairs(dataset) -> list[tuple[list[int], list[int]]]:
    """Accept Sample-like objects or (prompt_ids, reference_ids) tuples."""
    out = []
    for item in dataset:
        if hasattr(item, "prompt_ids"):
            out.append((list(item.prompt_ids), list(item.reference_ids)))
        else:
            prompt, ref = item
            out.append((list(prompt), list(ref)))
    if not out:
        raise InputError("dataset is empty")
    return out


def _batched_step(examples, grad_fn, params, state, grad_clip):
    """Average grad_fn over the batch, clip, apply one Adam step; returns mean loss."""
    total: dict[str, np.ndarray] = {}
    loss_sum = 0.0
    for ex in examples:
        loss, grads = grad_fn(ex)
        loss_sum += loss
        for name, g in grads.items():
            if name in total:
                total[name] += g
            else:
                total[name] = g
    inv = 1.0 / len(examples)
    for g in total.values():
        g *= g.dtype.type(inv)
    clip_by_global_norm(total, grad_clip)
    adam_step(params, total, state)
    return loss_sum * inv


def pretrain(cfg: ModelConfig, tcfg: TrainConfig, corpus,
             log_path=None) -> tuple[BaseWeights, list[tuple[int, int, float]]]:
    """Train every parameter on next-token prediction over raw sequences.

    corpus is a list of token-id sequences, each with at least two tokens.
    Returns the weights and the (epoch, step, loss) history.
    """
    cfg.validate()
    tcfg.validate()
    seqs = [list(s) for s in corpus]
    if not seqs:
        raise InputError("pretraining corpus is empty")
    for i, s in enumerate(seqs):
        if len(s) < 2:
            raise InputError(f"corpus sequence {i} has fewer than 2 tokens")
        if len(s) > cfg.max_seq:
            raise InputError(
                f"corpus sequence {i} has {len(s)} tokens, max_seq is {cfg.max_seq}")

    weights = init_base(cfg, seed=tcfg.seed)
    state = AdamState(lr=tcfg.lr)
    order_rng = np.random.default_rng(tcfg.seed)
    history: list[tuple[int, int, float]] = []

    def grad_fn(seq):
        ids = np.asarray(seq)
        mask = np.ones(len(seq) - 1, dtype=bool)
        return loss_and_grads(weights, None, ids[:-1], ids[1:], mask,
                              want_base=True, want_lora=False)

    step = 0
    for epoch in range(1, tcfg.epochs + 1):
        order = order_rng.permutation(len(seqs))
        for start in range(0, len(seqs), tcfg.batch):
            batch = [seqs[i] for i in order[start:start + tcfg.batch]]
            loss = _batched_step(batch, grad_fn, weights.tensors, state,
                                 tcfg.grad_clip)
            step += 1
            history.append((epoch, step, loss))
        log.info("pretrain epoch %d done, loss %.4f", epoch, history[-1][2])
    if log_path is not None:
        write_train_log(log_path, history)
    return weights, history


def _finetune(base: BaseWeights, adapters: LoraSet, dataset, tcfg: TrainConfig,
              log_path=None):
    tcfg.validate()
    pairs = _pairs(dataset)
    for i, (prompt, ref) in enumerate(pairs):
        if not prompt or not ref:
            raise InputError(f"sample {i} has an empty prompt or reference")
        if len(prompt) + len(ref) > base.cfg.max_seq:
            raise InputError(
                f"sample {i} spans {len(prompt) + len(ref)} tokens, "
                f"max_seq is {base.cfg.max_seq}")

    adapters.fingerprint = base.fingerprint()
    params = lora_param_dict(adapters)
    state = AdamState(lr=tcfg.lr)
    order_rng = np.random.default_rng(tcfg.seed)
    history: list[tuple[int, int, float]] = []

    def grad_fn(pair):
        prompt, ref = pair
        seq = np.asarray(prompt + ref)
        targets = seq[1:]
        if tcfg.loss_mask_prompt:
            mask = np.arange(targets.size) >= len(prompt) - 1
        else:
            mask = np.ones(targets.size, dtype=bool)
        return loss_and_grads(base, adapters, seq[:-1], targets, mask,
                              want_base=False, want_lora=True)

    step = 0
    for epoch in range(1, tcfg.epochs + 1):
        order = order_rng.permutation(len(pairs))
        for start in range(0, len(pairs), tcfg.batch):
            batch = [pairs[i] for i in order[start:start + tcfg.batch]]
            loss = _batched_step(batch, grad_fn, params, state, tcfg.grad_clip)
            step += 1
            history.append((epoch, step, loss))
        log.info("finetune epoch %d done, loss %.4f", epoch, history[-1][2])
    if log_path is not None:
        write_train_log(log_path, history)
    return adapters, history


def finetune_lora(base: BaseWeights, dataset, tcfg: TrainConfig, *,
                  targets=None, rank: int | None = None, alpha: float | None = None,
                  adapters: LoraSet | None = None, log_path=None):
    """Train a fresh (or given) adapter set on prompt/reference pairs.

    Only A and B factors are updated; the loss covers reference positions
    unless loss_mask_prompt is off. Returns (LoraSet, history).
    """
    if adapters is None:
        kwargs = {}
        if targets is not None:
            kwargs["targets"] = targets
        if rank is not None:
            kwargs["rank"] = rank
        if alpha is not None:
            kwargs["alpha"] = alpha
        adapters = init_adapters(base.cfg, seed=tcfg.seed, **kwargs)
    return _finetune(base, adapters, dataset, tcfg, log_path=log_path)


def finetune_partial(base: BaseWeights, dataset, tcfg: TrainConfig,
                     keep_bottom: int, *, targets=None, rank: int | None = None,
                     alpha: float | None = None, log_path=None):
    """Initialize and train adapters on layers 1..keep_bottom only.

    Layer selection happens before training, so upper layers never hold
    adapters at all; this is the train-time counterpart of dropping them
    after a full fine-tune.
    """
    if not 0 <= keep_bottom <= base.cfg.n_layers:
        raise InputError(
            f"keep_bottom {keep_bottom} out of range 0..{base.cfg.n_layers}")
    kwargs = {}
    if targets is not None:
        kwargs["targets"] = targets
    if rank is not None:
        kwargs["rank"] = rank
    if alpha is not None:
        kwargs["alpha"] = alpha
    full = init_adapters(base.cfg, seed=tcfg.seed, **kwargs)
    adapters = drop_above(full, keep_bottom)
    return _finetune(base, adapters, dataset, tcfg, log_path=log_path)
