"""Decoder-only transformer with pre-norm RMS blocks and hand-derived gradients.

One forward implementation serves training, probing and generation; the
per-layer residual stream it records is what the probing code reads
back through the model's own final norm and output head. Low-rank
adapter deltas are applied in factored form at the projection sites and
are never materialized as dense matrices here.

Weight layout is [d_in, d_out] everywhere, so a projection is ``x @ w``.
Layers are numbered 1..L in every public surface.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .numerics import cross_entropy_grad, rmsnorm_bwd, rmsnorm_fwd, softmax_rows

PROJECTIONS = ("q", "k", "v", "o", "up", "down")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 12
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 512
    max_seq: int = 128
    tied_embeddings: bool = False
    norm_eps: float = 1e-5

    def validate(self) -> "ModelConfig":
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} must divide evenly into {self.n_heads} heads")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must be at least 4 to hold reserved tokens")
        if self.norm_eps <= 0:
            raise ConfigError("norm_eps must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data).validate()

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter ordering; serialization and hashing follow it."""
    d, v = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (cfg.max_seq, d),
    }
    for l in range(1, cfg.n_layers + 1):
        p = f"layer{l:02d}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, d)
        shapes[p + "wv"] = (d, d)
        shapes[p + "wo"] = (d, d)
        shapes[p + "ffn_norm"] = (d,)
        shapes[p + "wup"] = (d, cfg.d_ff)
        shapes[p + "wdown"] = (cfg.d_ff, d)
    shapes["final_norm"] = (d,)
    if not cfg.tied_embeddings:
        shapes["head"] = (d, v)
    return shapes


class BaseWeights:
    """All non-adapter parameters of one model, keyed by canonical names."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, np.ndarray]):
        cfg.validate()
        expected = param_shapes(cfg)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ShapeError(f"weight names do not match config: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if tuple(tensors[name].shape) != shape:
                raise ShapeError(f"{name} has shape {tensors[name].shape}, expected {shape}")
        self.cfg = cfg
        self.tensors = tensors

    def head_matrix(self) -> np.ndarray:
        if self.cfg.tied_embeddings:
            return self.tensors["tok_emb"].T
        return self.tensors["head"]

    def config_fingerprint(self) -> str:
        return self.cfg.config_hash()

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for name in param_shapes(self.cfg):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name], dtype=np.float32).tobytes())
        return h.hexdigest()[:16]

    def fingerprint(self) -> str:
        return f"{self.config_fingerprint()}.{self.weights_hash()}"

    def astype(self, dtype) -> "BaseWeights":
        return BaseWeights(self.cfg, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def clone(self) -> "BaseWeights":
        return BaseWeights(self.cfg, {k: v.copy() for k, v in self.tensors.items()})


def init_base(cfg: ModelConfig, seed: int, std: float = 0.02) -> BaseWeights:
    """Seeded random initialization; residual output projections are scaled down."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    out_std = std / math.sqrt(2 * cfg.n_layers)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_norm"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".wo") or name.endswith(".wdown"):
            tensors[name] = rng.normal(0.0, out_std, size=shape).astype(np.float32)
        else:
            tensors[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
    return BaseWeights(cfg, tensors)


@dataclass
class LayerTrace:
    """Residual stream after each block (1..L) plus the final logits."""

    hidden: np.ndarray        # [L, t, d_model]
    final_logits: np.ndarray  # [t, vocab]

    def layer(self, l: int) -> np.ndarray:
        if not 1 <= l <= self.hidden.shape[0]:
            raise InputError(f"layer index {l} out of range 1..{self.hidden.shape[0]}")
        return self.hidden[l - 1]


# -- primitive pieces ---------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def _gelu_fwd(x):
    th = np.tanh(_GELU_C * (x + _GELU_K * x * x * x))
    return 0.5 * x * (1.0 + th), th


def _gelu_bwd(d_y, x, th):
    d_inner = _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
    return d_y * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner)


@functools.lru_cache(maxsize=None)
def _causal_mask(t: int, dtype_name: str) -> np.ndarray:
    m = np.triu(np.full((t, t), -np.inf, dtype=np.dtype(dtype_name)), k=1)
    m.setflags(write=False)
    return m


def _heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    t, d = x.shape
    return np.ascontiguousarray(x.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2))


def _unheads(xh: np.ndarray) -> np.ndarray:
    h, t, hd = xh.shape
    return xh.transpose(1, 0, 2).reshape(t, h * hd)


def _attention_fwd(q, k, v, n_heads):
    qh, kh, vh = _heads(q, n_heads), _heads(k, n_heads), _heads(v, n_heads)
    t = qh.shape[1]
    scale = 1.0 / math.sqrt(qh.shape[2])
    scores = (qh @ kh.transpose(0, 2, 1)) * scale
    scores += _causal_mask(t, scores.dtype.name)
    w = softmax_rows(scores)
    out = _unheads(w @ vh)
    return out, (qh, kh, vh, w)

def _attention_bwd(d_out, att_cache, n_heads):
    qh, kh, vh, w = att_cache
    do_h = _heads(d_out, n_heads)
    d_w = do_h @ vh.transpose(0, 2, 1)
    d_vh = w.transpose(0, 2, 1) @ do_h
    # softmax backward; masked weights are zero so nothing leaks acausally
    d_scores = w * (d_w - np.sum(w * d_w, axis=-1, keepdims=True))
    scale = 1.0 / math.sqrt(qh.shape[2])
    d_qh = (d_scores @ kh) * scale
    d_kh = (d_scores.transpose(0, 2, 1) @ qh) * scale
    return _unheads(d_qh), _unheads(d_kh), _unheads(d_vh)


def _project_fwd(x, w, adapter):
    """x @ w plus the factored low-rank path; returns (y, mid) with mid = x @ A^T."""
    y = x @ w
    if adapter is None:
        return y, None
    mid = x @ adapter.a.T
    return y + adapter.scale * (mid @ adapter.b.T), mid


def _get_adapter(adapters, active, layer: int, proj: str):
    if adapters is None:
        return None
    if active is not None and not active[layer - 1]:
        return None
    return adapters.get(layer, proj)


def _check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise InputError(f"token sequence must be non-empty and flat, got shape {ids.shape}")
    if ids.size > cfg.max_seq:
        raise InputError(f"sequence length {ids.size} exceeds max_seq {cfg.max_seq}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise InputError(
            f"token ids must lie in [0, {cfg.vocab_size}), got "
            f"[{int(ids.min())}, {int(ids.max())}]")
    return ids


# -- forward ------------------------------------------------------------------

def _forward(weights: BaseWeights, adapters, active, ids: np.ndarray,
             *, collect: bool, keep_cache: bool):
    """Shared forward. Returns (hidden [L,t,d] or None, h_final, caches or None)."""
    cfg = weights.cfg
    ts = weights.tensors
    t = ids.size
    h = ts["tok_emb"][ids] + ts["pos_emb"][:t]
    hidden = np.empty((cfg.n_layers,) + h.shape, dtype=h.dtype) if collect else None
    caches = [] if keep_cache else None
    for l in range(1, cfg.n_layers + 1):
        p = f"layer{l:02d}."
        ad = {name: _get_adapter(adapters, active, l, name) for name in PROJECTIONS}

        pre_attn = h
        xn1, inv1 = rmsnorm_fwd(h, ts[p + "attn_norm"], cfg.norm_eps)
        q, mid_q = _project_fwd(xn1, ts[p + "wq"], ad["q"])
        k, mid_k = _project_fwd(xn1, ts[p + "wk"], ad["k"])
        v, mid_v = _project_fwd(xn1, ts[p + "wv"], ad["v"])
        attn, att_cache = _attention_fwd(q, k, v, cfg.n_heads)
        o, mid_o = _project_fwd(attn, ts[p + "wo"], ad["o"])
        h = pre_attn + o

        pre_ffn = h
        xn2, inv2 = rmsnorm_fwd(h, ts[p + "ffn_norm"], cfg.norm_eps)
        u_pre, mid_up = _project_fwd(xn2, ts[p + "wup"], ad["up"])
        u, th = _gelu_fwd(u_pre)
        dn, mid_down = _project_fwd(u, ts[p + "wdown"], ad["down"])
        h = pre_ffn + dn

        if collect:
            hidden[l - 1] = h
        if keep_cache:
            caches.append({
                "ad": ad, "pre_attn": pre_attn, "inv1": inv1, "xn1": xn1,
                "att_cache": att_cache, "attn": attn, "pre_ffn": pre_ffn,
                "inv2": inv2, "xn2": xn2, "u_pre": u_pre, "th": th, "u": u,
                "mids": {"q": mid_q, "k": mid_k, "v": mid_v, "o": mid_o,
                         "up": mid_up, "down": mid_down},
            })
    return hidden, h, caches


def lens_logits(weights: BaseWeights, h: np.ndarray) -> np.ndarray:
    """Final norm plus output head applied to any residual-stream state.

    This is the one code path that turns hidden states into logits, for
    the top layer and for mid-stack readouts alike.
    """
    normed, _ = rmsnorm_fwd(h, weights.tensors["final_norm"], weights.cfg.norm_eps)
    return normed @ weights.head_matrix()


def forward_collect(weights: BaseWeights, adapters=None, tokens=None,
                    active=None) -> LayerTrace:
    """Run the model over one sequence and record the per-layer residual stream."""
    ids = _check_tokens(weights.cfg, tokens)
    hidden, h_final, _ = _forward(weights, adapters, active, ids,
                                  collect=True, keep_cache=False)
    return LayerTrace(hidden=hidden, final_logits=lens_logits(weights, h_final))


def next_token_logits(weights: BaseWeights, adapters, tokens, active=None) -> np.ndarray:
    """Logits for the continuation of `tokens`; last position only, shape [vocab]."""
    ids = _check_tokens(weights.cfg, tokens)
    _, h_final, _ = _forward(weights, adapters, active, ids,
                             collect=False, keep_cache=False)
    return lens_logits(weights, h_final[-1:])[0]


def generate_greedy(weights: BaseWeights, adapters, prompt, max_new: int,
                    stop_token: int | None, active=None) -> list[int]:
    """Greedy decoding. Ties go to the lowest token id; stops at stop_token
    (None disables it), max_new tokens, or a full context window, whichever
    comes first.

    Returns only the generated ids, including the stop token if one was emitted.
    """
    cfg = weights.cfg
    ids = _check_tokens(cfg, prompt)
    if max_new < 0:
        raise InputError(f"max_new must be non-negative, got {max_new}")
    if stop_token is not None and not 0 <= stop_token < cfg.vocab_size:
        raise InputError(f"stop_token {stop_token} outside vocabulary")
    seq = list(ids)
    out: list[int] = []
    for _ in range(max_new):
        if len(seq) >= cfg.max_seq:
            break
        logits = next_token_logits(weights, adapters, seq, active)
        nxt = int(np.argmax(logits))  # argmax takes the first max, i.e. lowest id
        seq.append(nxt)
        out.append(nxt)
        if nxt == stop_token:
            break
    return out


def lens_probs(weights: BaseWeights, trace: LayerTrace,
               positions) -> np.ndarray:
    """Per-layer next-token distributions at the given positions: [L, n, vocab]."""
    pos = np.asarray(positions, dtype=np.int64)
    t = trace.hidden.shape[1]
    if pos.size and (pos.min() < 0 or pos.max() >= t):
        raise InputError(f"positions out of range for sequence length {t}")
    states = trace.hidden[:, pos, :]           # [L, n, d]
    return softmax_rows(lens_logits(weights, states))


def teacher_forced_probs(weights: BaseWeights, adapters, prompt, reference,
                         n_tokens: int, active=None) -> np.ndarray:
    """Probability of each of the first n reference tokens at every layer depth.

    Feeds prompt + reference with teacher forcing; entry [l-1, i] is the
    probability the layer-l readout assigns to reference[i] at the position
    that predicts it. Shape [L, n_tokens].
    """
    prompt = list(prompt)
    reference = list(reference)
    if n_tokens < 1:
        raise InputError(f"n_tokens must be at least 1, got {n_tokens}")
    if len(reference) < n_tokens:
        raise InputError(
            f"reference has {len(reference)} tokens, need at least {n_tokens}")
    if not prompt:
        raise InputError("prompt must be non-empty")
    seq = prompt + reference[:n_tokens]
    trace = forward_collect(weights, adapters, seq, active)
    positions = [len(prompt) - 1 + i for i in range(n_tokens)]
    dists = lens_probs(weights, trace, positions)   # [L, n, V]
    ref = np.asarray(reference[:n_tokens], dtype=np.int64)
    return dists[:, np.arange(n_tokens), ref]


# -- backward -----------------------------------------------------------------

def loss_and_grads(weights: BaseWeights, adapters, inputs, targets, mask,
                   active=None, *, want_base: bool = True, want_lora: bool = False):
    """Masked next-token cross-entropy and its gradients in one backward pass.

    inputs/targets are aligned length-t id arrays; mask selects which target
    positions count. Returns (loss, grads) where grads maps canonical base
    tensor names and/or "layerNN.<proj>.lora_a"/"lora_b" to arrays, depending
    on the want_* flags. Gradients of parameters not asked for are skipped,
    not zeroed.
    """
    cfg = weights.cfg
    ts = weights.tensors
    ids = _check_tokens(cfg, inputs)
    t = ids.size
    hidden, h_final, caches = _forward(weights, adapters, active, ids,
                                       collect=False, keep_cache=True)
    fin_n, inv_f = rmsnorm_fwd(h_final, ts["final_norm"], cfg.norm_eps)
    head = weights.head_matrix()
    logits = fin_n @ head
    loss, d_logits = cross_entropy_grad(logits, np.asarray(targets), np.asarray(mask))

    grads: dict[str, np.ndarray] = {}

    def add(name, g):
        if name in grads:
            grads[name] += g
        else:
            grads[name] = g

    d_fin_n = d_logits @ head.T
    if want_base:
        d_head = fin_n.T @ d_logits
        if cfg.tied_embeddings:
            add("tok_emb", d_head.T)
        else:
            add("head", d_head)
    d_h, d_gain = rmsnorm_bwd(d_fin_n, h_final, inv_f, ts["final_norm"])
    if want_base:
        add("final_norm", d_gain)

    def back_project(d_y, x, w, adapter, mid, base_name, layer, proj):
        """Backward through y = x @ w (+ adapter path). Returns d_x."""
        d_x = d_y @ w.T
        if want_base:
            add(base_name, x.T @ d_y)
        if adapter is not None:
            d_mid = adapter.scale * (d_y @ adapter.b)
            d_x += d_mid @ adapter.a
            if want_lora:
                add(f"layer{layer:02d}.{proj}.lora_b", adapter.scale * (d_y.T @ mid))
                add(f"layer{layer:02d}.{proj}.lora_a", d_mid.T @ x)
        return d_x

    for l in range(cfg.n_layers, 0, -1):
        p = f"layer{l:02d}."
        c = caches[l - 1]
        ad = c["ad"]

        # ffn half: h = pre_ffn + down(gelu(up(norm(pre_ffn))))
        d_u = back_project(d_h, c["u"], ts[p + "wdown"], ad["down"],
                           c["mids"]["down"], p + "wdown", l, "down")
        d_u_pre = _gelu_bwd(d_u, c["u_pre"], c["th"])
        d_xn2 = back_project(d_u_pre, c["xn2"], ts[p + "wup"], ad["up"],
                             c["mids"]["up"], p + "wup", l, "up")
        d_pre_ffn, d_gain2 = rmsnorm_bwd(d_xn2, c["pre_ffn"], c["inv2"],
                                         ts[p + "ffn_norm"])
        if want_base:
            add(p + "ffn_norm", d_gain2)
        d_h = d_h + d_pre_ffn

        # attention half: h = pre_attn + o(attend(q, k, v))
        d_attn = back_project(d_h, c["attn"], ts[p + "wo"], ad["o"],
                              c["mids"]["o"], p + "wo", l, "o")
        d_q, d_k, d_v = _attention_bwd(d_attn, c["att_cache"], cfg.n_heads)
        d_xn1 = back_project(d_q, c["xn1"], ts[p + "wq"], ad["q"],
                             c["mids"]["q"], p + "wq", l, "q")
        d_xn1 += back_project(d_k, c["xn1"], ts[p + "wk"], ad["k"],
                              c["mids"]["k"], p + "wk", l, "k")
        d_xn1 += back_project(d_v, c["xn1"], ts[p + "wv"], ad["v"],
                              c["mids"]["v"], p + "wv", l, "v")
        d_pre_attn, d_gain1 = rmsnorm_bwd(d_xn1, c["pre_attn"], c["inv1"],
                                          ts[p + "attn_norm"])
        if want_base:
            add(p + "attn_norm", d_gain1)
        d_h = d_h + d_pre_attn

    if want_base:
        d_tok = np.zeros_like(ts["tok_emb"])
        np.add.at(d_tok, ids, d_h)
        add("tok_emb", d_tok)
        d_pos = np.zeros_like(ts["pos_emb"])
        d_pos[:t] = d_h
        add("pos_emb", d_pos)

    return loss, grads
