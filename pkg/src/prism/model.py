"""Tiny fixed-window neural next-token model, trained with teacher forcing.

The model embeds the previous `window` ground-truth tokens, concatenates the
embeddings, and maps them through one tanh hidden layer to vocabulary
logits.  It is deliberately the smallest thing that exposes a full [T, V]
logit surface: every gradient stays checkable against finite differences,
and training is single-threaded float64 with position-major reductions, so
a run is reproducible bit for bit from its seed.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .corpus import AnnotatedExample
from .errors import CheckpointError, ConfigError, DivergenceError
from .fact_graph import (
    RISK_ONEHOP,
    TokenSignals,
    derive_token_signals,
    propagate_risk,
    sentence_ids,
)
from .objective import (
    DEFAULT_EPSILON,
    comp_loss,
    knowledge_mask_loss,
    sft_loss,
    softmax_probs,
    total_loss,
)

PARAM_FIELDS = ("embedding", "w1", "b1", "w2", "b2")

METHOD_SFT = "sft"
METHOD_PRISM = "prism"
METHOD_KNOWLEDGE_MASK = "knowledge_mask"
METHOD_PRISM_NO_GATE = "prism_no_gate"
METHOD_PRISM_NO_MASK = "prism_no_mask"
METHODS = (
    METHOD_SFT,
    METHOD_PRISM,
    METHOD_KNOWLEDGE_MASK,
    METHOD_PRISM_NO_GATE,
    METHOD_PRISM_NO_MASK,
)

# method -> (use_gates, use_fact_mask) for the complement term
_COMP_FLAGS = {
    METHOD_PRISM: (True, True),
    METHOD_PRISM_NO_GATE: (False, True),
    METHOD_PRISM_NO_MASK: (True, False),
}


@dataclass
class ModelParams:
    embedding: np.ndarray  # [V, d]
    w1: np.ndarray         # [window * d, h]
    b1: np.ndarray         # [h]
    w2: np.ndarray         # [h, V]
    b2: np.ndarray         # [V]
    window: int
    bos_token: int = 0

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]


def init_params(
    vocab_size: int,
    embed_dim: int,
    hidden_dim: int,
    window: int,
    rng: np.random.Generator,
    bos_token: int = 0,
) -> ModelParams:
    """Seeded small-scale initialization; biases start at zero."""
    if vocab_size < 2 or embed_dim < 1 or hidden_dim < 1 or window < 1:
        raise ConfigError("model dimensions must be positive (vocab_size >= 2)")
    fan_in = window * embed_dim
    return ModelParams(
        embedding=0.1 * rng.standard_normal((vocab_size, embed_dim)),
        w1=rng.standard_normal((fan_in, hidden_dim)) / np.sqrt(fan_in),
        b1=np.zeros(hidden_dim),
        w2=rng.standard_normal((hidden_dim, vocab_size)) / np.sqrt(hidden_dim),
        b2=np.zeros(vocab_size),
        window=window,
        bos_token=bos_token,
    )


def _check_tokens(tokens: np.ndarray, vocab_size: int) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise ValueError("token id outside [0, vocab_size)")


def forward_batch(
    params: ModelParams, windows: np.ndarray
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Logits [B, V] for a batch of token windows [B, window], plus the
    activations needed by backward_batch."""
    w = np.asarray(windows, dtype=np.int64)
    if w.ndim != 2 or w.shape[1] != params.window:
        raise ValueError(f"windows must be [B, {params.window}], got shape {w.shape}")
    _check_tokens(w, params.vocab_size)
    x = params.embedding[w].reshape(w.shape[0], -1)
    hidden = np.tanh(x @ params.w1 + params.b1)
    logits = hidden @ params.w2 + params.b2
    return logits, (x, hidden)


def forward(params: ModelParams, window_tokens: Sequence[int]) -> np.ndarray:
    """Logits row (length V) for a single window of previous tokens."""
    logits, _ = forward_batch(params, np.asarray(window_tokens, dtype=np.int64)[None, :])
    return logits[0]


def backward_batch(
    params: ModelParams,
    windows: np.ndarray,
    dlogits: np.ndarray,
    cache: tuple[np.ndarray, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of the loss w.r.t. every parameter, given
    the per-logit loss gradient [B, V]."""
    w = np.asarray(windows, dtype=np.int64)
    dz = np.asarray(dlogits, dtype=np.float64)
    if cache is None:
        _, cache = forward_batch(params, w)
    x, hidden = cache
    if dz.shape != (w.shape[0], params.vocab_size):
        raise ValueError(f"loss gradient has shape {dz.shape}, expected {(w.shape[0], params.vocab_size)}")

    d_w2 = hidden.T @ dz
    d_b2 = dz.sum(axis=0)
    d_hidden = dz @ params.w2.T
    d_pre = d_hidden * (1.0 - hidden * hidden)
    d_w1 = x.T @ d_pre
    d_b1 = d_pre.sum(axis=0)
    d_x = (d_pre @ params.w1.T).reshape(w.shape[0], params.window, params.embed_dim)
    d_emb = np.zeros_like(params.embedding)
    np.add.at(d_emb, w, d_x)
    return {"embedding": d_emb, "w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2}


@dataclass
class OptimizerState:
    """Decoupled-weight-decay adaptive-moment optimizer state."""

    learning_rate: float
    beta1: float
    beta2: float
    eps: float
    weight_decay: float
    step_count: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_optimizer(
    params: ModelParams,
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> OptimizerState:
    zeros = {name: np.zeros_like(getattr(params, name)) for name in PARAM_FIELDS}
    return OptimizerState(
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        weight_decay=weight_decay,
        step_count=0,
        m=zeros,
        v={name: z.copy() for name, z in zeros.items()},
    )


def optimizer_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
) -> tuple[ModelParams, OptimizerState]:
    """One bias-corrected moment update with decoupled weight decay, in place."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name in PARAM_FIELDS:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r} at optimizer step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p = getattr(params, name)
        if state.weight_decay != 0.0:
            p -= state.learning_rate * state.weight_decay * p
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


@dataclass
class PreparedExample:
    """One example flattened into teacher-forcing windows and token signals."""

    windows: np.ndarray       # int64 [T, window]
    labels: np.ndarray        # int64 [T]
    signals: TokenSignals
    sentence_id: np.ndarray   # int64 [T], -1 outside any sentence


def prepare_examples(
    examples: Sequence[AnnotatedExample],
    window: int,
    vocab_size: int,
    bos_token: int = 0,
    risk_mode: str = RISK_ONEHOP,
) -> list[PreparedExample]:
    """Expand annotated examples into per-position windows, labels, and signals.

    For target position t the window is the `window` tokens preceding it in
    input + target, left-padded with the begin token at the sequence start.
    """
    prepared = []
    for ex in examples:
        full = np.asarray(list(ex.input_tokens) + list(ex.target_tokens), dtype=np.int64)
        _check_tokens(full, vocab_size)
        t_len = len(ex.target_tokens)
        if t_len == 0:
            raise ValueError("example has an empty target")
        padded = np.concatenate([np.full(window, bos_token, dtype=np.int64), full])
        all_windows = np.lib.stride_tricks.sliding_window_view(padded, window)
        windows = all_windows[len(ex.input_tokens) : len(ex.input_tokens) + t_len].copy()
        graph = propagate_risk(ex.sentences, ex.edges, mode=risk_mode)
        signals = derive_token_signals(graph, ex.facts, ex.valid_mask, t_len)
        prepared.append(
            PreparedExample(
                windows=windows,
                labels=np.asarray(ex.target_tokens, dtype=np.int64),
                signals=signals,
                sentence_id=sentence_ids(ex.sentences, t_len),
            )
        )
    return prepared


def _gather_batch(
    prepared: Sequence[PreparedExample], idx: np.ndarray
) -> tuple[np.ndarray, np.ndarray, TokenSignals]:
    chosen = [prepared[i] for i in idx]
    windows = np.concatenate([p.windows for p in chosen])
    labels = np.concatenate([p.labels for p in chosen])
    signals = TokenSignals(
        fact_mask=np.concatenate([p.signals.fact_mask for p in chosen]),
        support_weight=np.concatenate([p.signals.support_weight for p in chosen]),
        valid_mask=np.concatenate([p.signals.valid_mask for p in chosen]),
    )
    return windows, labels, signals


@dataclass
class TrainSettings:
    method: str = METHOD_PRISM
    lam: float = 0.1
    epsilon: float = DEFAULT_EPSILON
    steps: int = 500
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    embed_dim: int = 16
    hidden_dim: int = 32
    window: int = 4
    vocab_size: int = 0  # 0: derive from the data
    risk_propagation: str = RISK_ONEHOP
    seed: int = 0


@dataclass
class StepRecord:
    """Loss log entry for one training step."""

    step: int
    sft: float
    comp: float
    total: float
    n_sft: int
    n_fact: int
    alpha_active: int
    off_target: int
    p_risky: float | None
    p_safe: float | None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainCounters:
    """Cumulative gate diagnostics over a whole run."""

    alpha_active_total: int = 0
    off_target_total: int = 0
    alpha_nonfact_total: int = 0


@dataclass
class TrainResult:
    params: ModelParams
    opt_state: OptimizerState
    step_log: list[StepRecord]
    counters: TrainCounters


def _group_mean(values: np.ndarray, mask: np.ndarray) -> float | None:
    return float(values[mask].mean()) if mask.any() else None


def infer_vocab_size(examples: Sequence[AnnotatedExample]) -> int:
    """Smallest vocabulary covering every token id in the corpus."""
    top = 0
    for ex in examples:
        for tok in ex.input_tokens:
            top = max(top, tok)
        for tok in ex.target_tokens:
            top = max(top, tok)
    return top + 1


def train(examples: Sequence[AnnotatedExample], settings: TrainSettings) -> TrainResult:
    """Teacher-forced training loop over a corpus, fully seeded.

    Dispatches the loss by method.  At lam = 0 every prism variant
    mathematically reduces to plain SFT (the auxiliary term is skipped
    entirely), so such runs are bit-identical to method="sft".  Aborts with
    the step index if the loss goes non-finite.
    """
    if settings.method not in METHODS:
        raise ConfigError(f"unknown method {settings.method!r}; expected one of {METHODS}")
    if settings.lam < 0.0:
        raise ConfigError("lambda must be nonnegative")
    if not examples:
        raise ConfigError("training corpus is empty")
    vocab = settings.vocab_size or infer_vocab_size(examples)
    prepared = prepare_examples(
        examples, settings.window, vocab, risk_mode=settings.risk_propagation
    )

    rng = np.random.default_rng(settings.seed)
    params = init_params(vocab, settings.embed_dim, settings.hidden_dim, settings.window, rng)
    state = init_optimizer(
        params,
        learning_rate=settings.learning_rate,
        beta1=settings.beta1,
        beta2=settings.beta2,
        eps=settings.adam_eps,
        weight_decay=settings.weight_decay,
    )

    method = settings.method
    if method in _COMP_FLAGS and settings.lam == 0.0:
        method = METHOD_SFT

    log: list[StepRecord] = []
    counters = TrainCounters()
    for step in range(1, settings.steps + 1):
        idx = rng.integers(0, len(prepared), size=settings.batch_size)
        windows, labels, signals = _gather_batch(prepared, idx)
        logits, cache = forward_batch(params, windows)
        if not np.all(np.isfinite(logits)):
            raise DivergenceError(f"non-finite logits at step {step}")

        n_sft = int(signals.valid_mask.sum())
        n_fact = int(signals.fact_mask.sum())
        alpha_active = off_target = 0
        if method == METHOD_SFT:
            value, grad = sft_loss(logits, labels, signals.valid_mask)
            sft_value, comp_value, total = value, 0.0, value
        elif method == METHOD_KNOWLEDGE_MASK:
            value, grad = knowledge_mask_loss(logits, labels, signals)
            sft_value, comp_value, total = value, 0.0, value
        else:
            use_gates, use_fact_mask = _COMP_FLAGS[method]
            breakdown, grad, trace = total_loss(
                logits,
                labels,
                signals,
                settings.lam,
                settings.epsilon,
                use_gates=use_gates,
                use_fact_mask=use_fact_mask,
            )
            sft_value, comp_value, total = breakdown.sft, breakdown.comp, breakdown.total
            active = trace.alpha > 0.0
            alpha_active = int(active.sum())
            off_target = int((active & ~(trace.pref_gate & trace.keep_gate)).sum())
            counters.alpha_active_total += alpha_active
            counters.off_target_total += off_target
            counters.alpha_nonfact_total += int((active & ~signals.fact_mask).sum())

        if not np.isfinite(total):
            raise DivergenceError(f"non-finite loss at step {step}")

        probs_label = softmax_probs(logits)[np.arange(len(labels)), labels]
        risky = signals.fact_mask & (signals.support_weight < 1.0)
        safe = signals.fact_mask & (signals.support_weight >= 1.0)
        log.append(
            StepRecord(
                step=step,
                sft=sft_value,
                comp=comp_value,
                total=total,
                n_sft=n_sft,
                n_fact=n_fact,
                alpha_active=alpha_active,
                off_target=off_target,
                p_risky=_group_mean(probs_label, risky),
                p_safe=_group_mean(probs_label, safe),
            )
        )
        grads = backward_batch(params, windows, grad, cache)
        params, state = optimizer_step(params, grads, state)
    return TrainResult(params=params, opt_state=state, step_log=log, counters=counters)


@dataclass
class EvalMetrics:
    """Teacher-forced evaluation of a model against annotated examples."""

    n_positions: int
    n_fact: int
    n_risky: int
    mean_p_risky_fact: float | None
    mean_p_safe_fact: float | None
    mean_p_nonfact: float | None
    nonfact_top1_acc: float | None
    risky_top1_rate: float | None
    gate_pref_rate: float | None
    gate_keep_rate: float | None
    gate_active_rate: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(
    params: ModelParams,
    prepared: Sequence[PreparedExample],
    epsilon: float = DEFAULT_EPSILON,
) -> EvalMetrics:
    """Mean label probabilities by token group, top-1 rates, and gate rates."""
    if not prepared:
        raise ConfigError("nothing to evaluate")
    windows = np.concatenate([p.windows for p in prepared])
    labels = np.concatenate([p.labels for p in prepared])
    signals = TokenSignals(
        fact_mask=np.concatenate([p.signals.fact_mask for p in prepared]),
        support_weight=np.concatenate([p.signals.support_weight for p in prepared]),
        valid_mask=np.concatenate([p.signals.valid_mask for p in prepared]),
    )
    logits, _ = forward_batch(params, windows)
    probs = softmax_probs(logits)
    rows = np.arange(len(labels))
    p_label = probs[rows, labels]
    top1 = probs.argmax(axis=1) == labels

    fact = signals.fact_mask
    risky = fact & (signals.support_weight < 1.0)
    safe = fact & (signals.support_weight >= 1.0)
    nonfact = signals.valid_mask & ~fact
    _, _, trace = comp_loss(logits, labels, signals, epsilon)

    n_fact = int(fact.sum())
    return EvalMetrics(
        n_positions=int(signals.valid_mask.sum()),
        n_fact=n_fact,
        n_risky=int(risky.sum()),
        mean_p_risky_fact=_group_mean(p_label, risky),
        mean_p_safe_fact=_group_mean(p_label, safe),
        mean_p_nonfact=_group_mean(p_label, nonfact),
        nonfact_top1_acc=_group_mean(top1.astype(np.float64), nonfact),
        risky_top1_rate=_group_mean(top1.astype(np.float64), risky),
        gate_pref_rate=_group_mean(trace.pref_gate[fact].astype(np.float64), np.ones(n_fact, dtype=bool)) if n_fact else None,
        gate_keep_rate=_group_mean(trace.keep_gate[fact].astype(np.float64), np.ones(n_fact, dtype=bool)) if n_fact else None,
        gate_active_rate=_group_mean((trace.alpha[fact] > 0.0).astype(np.float64), np.ones(n_fact, dtype=bool)) if n_fact else None,
    )


def config_digest(config: dict) -> str:
    """Stable hash of a resolved configuration dict."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParams
    opt_state: OptimizerState
    config: dict
    seed: int


def save_checkpoint(
    path: str,
    params: ModelParams,
    opt_state: OptimizerState,
    config: dict,
    seed: int,
) -> None:
    """Write a versioned JSON checkpoint; floats round-trip exactly."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "seed": seed,
        "config": config,
        "config_hash": config_digest(config),
        "model": {
            "window": params.window,
            "bos_token": params.bos_token,
            **{name: getattr(params, name).tolist() for name in PARAM_FIELDS},
        },
        "optimizer": {
            "learning_rate": opt_state.learning_rate,
            "beta1": opt_state.beta1,
            "beta2": opt_state.beta2,
            "eps": opt_state.eps,
            "weight_decay": opt_state.weight_decay,
            "step_count": opt_state.step_count,
            "m": {name: arr.tolist() for name, arr in opt_state.m.items()},
            "v": {name: arr.tolist() for name, arr in opt_state.v.items()},
        },
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    """Read a checkpoint and verify its config hash."""
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    config = payload["config"]
    if config_digest(config) != payload.get("config_hash"):
        raise CheckpointError("checkpoint config hash mismatch")
    m = payload["model"]
    params = ModelParams(
        embedding=np.asarray(m["embedding"], dtype=np.float64),
        w1=np.asarray(m["w1"], dtype=np.float64),
        b1=np.asarray(m["b1"], dtype=np.float64),
        w2=np.asarray(m["w2"], dtype=np.float64),
        b2=np.asarray(m["b2"], dtype=np.float64),
        window=int(m["window"]),
        bos_token=int(m["bos_token"]),
    )
    o = payload["optimizer"]
    opt_state = OptimizerState(
        learning_rate=float(o["learning_rate"]),
        beta1=float(o["beta1"]),
        beta2=float(o["beta2"]),
        eps=float(o["eps"]),
        weight_decay=float(o["weight_decay"]),
        step_count=int(o["step_count"]),
        m={name: np.asarray(arr, dtype=np.float64) for name, arr in o["m"].items()},
        v={name: np.asarray(arr, dtype=np.float64) for name, arr in o["v"].items()},
    )
    return Checkpoint(params=params, opt_state=opt_state, config=config, seed=int(payload["seed"]))
