"""Mixture-of-LoRA-experts wrapper around a frozen linear map.

A wrapped layer computes

    original(x) + general(x) + (1/k) * sum of the k routed experts' outputs

where every expert is a rank-r LoRA block (down-map then up-map, up-map
zero at init so the whole wrapper starts as an exact no-op).  The router is
a 2-layer GELU MLP whose input is the concatenation of the pooled visual
tokens, the pooled text tokens, and the hidden state, so expert choice can
depend on the full multimodal context rather than the hidden state alone.
The general expert bypasses routing and contributes on every forward pass.

Routing is per token position.  The hard top-k selection (ties break
toward the lower expert index) is used in the forward value; gradients
reach the router through a straight-through estimator whose backward is the
soft probability-weighted mixture.  ``soft_forward`` exposes that smooth
surrogate directly for gradient verification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cotr import xavier_uniform
from .tensor import Tensor


@dataclass(frozen=True)
class MmoeConfig:
    n_experts: int = 3
    top_k: int = 1
    rank: int = 16
    balance_weight: float = 0.05
    router_hidden: int = 32

    def __post_init__(self):
        if self.n_experts < 1:
            raise ValueError("need at least one routed expert")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k must be in [1, {self.n_experts}], got {self.top_k}")
        if self.rank < 1 or self.router_hidden < 1:
            raise ValueError("rank and router_hidden must be >= 1")
        if self.balance_weight < 0:
            raise ValueError("balance_weight must be nonnegative")


@dataclass
class RouteDecision:
    """Routing probabilities and the selected expert set for one decision."""

    probabilities: np.ndarray
    selected: tuple[int, ...]
    granularity: str = "token"


class LoraExpert:
    """Rank-r additive update: contribution(x) = (x @ down) @ up * scale.

    The up-map starts at zero, so a fresh expert contributes exactly
    nothing.  scale is fixed at 1.0.
    """

    def __init__(self, d_in: int, d_out: int, rank: int,
                 rng: np.random.Generator, dtype):
        self.down = T.parameter(rng.normal(0.0, 0.02, size=(d_in, rank)).astype(dtype))
        self.up = T.parameter(np.zeros((rank, d_out), dtype=dtype))
        self.rank = rank
        self.scale = 1.0

    def forward(self, x: Tensor) -> Tensor:
        out = T.matmul(T.matmul(x, self.down), self.up)
        return out if self.scale == 1.0 else T.scale(out, self.scale)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}/down": self.down, f"{prefix}/up": self.up}


class Router:
    """2-layer GELU MLP from the multimodal feature vector to expert logits."""

    def __init__(self, d_feature: int, hidden: int, n_experts: int,
                 rng: np.random.Generator, dtype):
        self.w1 = T.parameter(xavier_uniform(rng, d_feature, hidden, dtype))
        self.b1 = T.parameter(np.zeros((1, hidden), dtype=dtype))
        self.w2 = T.parameter(xavier_uniform(rng, hidden, n_experts, dtype))
        self.b2 = T.parameter(np.zeros((1, n_experts), dtype=dtype))

    def logits(self, features: Tensor) -> Tensor:
        return T.linear(T.gelu(T.linear(features, self.w1, self.b1)), self.w2, self.b2)

    def probabilities(self, features: Tensor) -> Tensor:
        return T.softmax(self.logits(features), axis=1)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}/w1": self.w1, f"{prefix}/b1": self.b1,
                f"{prefix}/w2": self.w2, f"{prefix}/b2": self.b2}


def top_k_indices(probs: np.ndarray, k: int) -> tuple[int, ...]:
    """Indices of the k largest probabilities; ties go to the lower index."""
    order = np.argsort(-np.asarray(probs).reshape(-1), kind="stable")
    return tuple(int(i) for i in order[:k])


def router_features(i_tilde: Tensor, text: Tensor | None, x: Tensor) -> Tensor:
    """[mean-pooled visual rows ; mean-pooled text rows ; x], one feature row.

    An empty text block pools to the zero vector.
    """
    pooled_v = T.mean(i_tilde, axis=0)
    if text is None or text.shape[0] == 0:
        pooled_t = T.constant(np.zeros((1, pooled_v.shape[1]), dtype=pooled_v.dtype))
    else:
        pooled_t = T.mean(text, axis=0)
    return T.concat([pooled_v, pooled_t, x], axis=1)


@dataclass
class RouteBatch:
    """Routing records for one training step: prob tensors stay differentiable."""

    prob_tensors: list[Tensor] = field(default_factory=list)
    selections: list[tuple[int, ...]] = field(default_factory=list)

    def add(self, probs: Tensor, selections: list[tuple[int, ...]]) -> None:
        self.prob_tensors.append(probs)
        self.selections.extend(selections)


def balance_loss(batch: RouteBatch, n_experts: int, top_k: int = 1) -> Tensor:
    """Load-balance penalty E * sum_e f_e * P_e.

    f_e is the fraction of routing selections that picked expert e (a
    constant), P_e the mean routing probability of e (differentiable).
    Uniform routing gives exactly 1; total collapse gives exactly E.
    """
    if not batch.selections or not batch.prob_tensors:
        raise ValueError("balance_loss: empty routing batch")
    counts = np.zeros(n_experts, dtype=np.float64)
    for sel in batch.selections:
        for e in sel:
            counts[e] += 1.0
    fractions = counts / (len(batch.selections) * top_k)
    probs = batch.prob_tensors[0] if len(batch.prob_tensors) == 1 \
        else T.concat(batch.prob_tensors, axis=0)
    p_mean = T.mean(probs, axis=0)
    f_col = T.constant(fractions.reshape(-1, 1).astype(probs.dtype))
    return T.mean(T.scale(T.matmul(p_mean, f_col), float(n_experts)))


class MmoeLayer:
    """Frozen original linear map plus general and routed LoRA experts."""

    def __init__(self, d_in: int, d_out: int, d_context: int, config: MmoeConfig,
                 rng: np.random.Generator, dtype,
                 original_w: Tensor | None = None, original_b: Tensor | None = None,
                 layer_id: int = 0):
        self.config = config
        self.layer_id = layer_id
        self.original_w = original_w if original_w is not None else \
            T.parameter(xavier_uniform(rng, d_in, d_out, dtype))
        self.original_b = original_b if original_b is not None else \
            T.parameter(np.zeros((1, d_out), dtype=dtype))
        self.general = LoraExpert(d_in, d_out, config.rank, rng, dtype)
        self.experts = [LoraExpert(d_in, d_out, config.rank, rng, dtype)
                        for _ in range(config.n_experts)]
        self.router = Router(d_context + d_in, config.router_hidden,
                             config.n_experts, rng, dtype)

    def named_parameters(self, prefix: str, include_original: bool = True) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        if include_original:
            params[f"{prefix}/original_w"] = self.original_w
            params[f"{prefix}/original_b"] = self.original_b
        params.update(self.general.named_parameters(f"{prefix}/general"))
        for i, e in enumerate(self.experts):
            params.update(e.named_parameters(f"{prefix}/expert{i}"))
        params.update(self.router.named_parameters(f"{prefix}/router"))
        return params

    def _route_rows(self, x: Tensor, context: Tensor) -> tuple[Tensor, list[tuple[int, ...]]]:
        tile = T.constant(np.zeros((x.shape[0], context.shape[1]), dtype=x.dtype))
        features = T.concat([T.add_broadcast(tile, context), x], axis=1)
        probs = self.router.probabilities(features)
        selections = [top_k_indices(probs.data[i], self.config.top_k)
                      for i in range(probs.shape[0])]
        return probs, selections

    def forward_rows(self, x: Tensor, context: Tensor, hard: bool = True,
                     batch: RouteBatch | None = None,
                     recorder: "UsageRecorder | None" = None,
                     record_rows: set[int] | None = None) -> Tensor:
        """Apply the layer to every row of x; context is the pooled [visual;text] row.

        ``record_rows`` restricts usage recording to the given row indices
        (e.g. only the position whose next token is being generated); the
        routing itself always covers every row.
        """
        probs, selections = self._route_rows(x, context)
        if batch is not None:
            batch.add(probs, selections)
        if recorder is not None:
            for row, sel in enumerate(selections):
                if record_rows is None or row in record_rows:
                    recorder.record(self.layer_id, sel)
        if hard:
            coeff_data = np.zeros(probs.shape, dtype=probs.data.dtype)
            for row, sel in enumerate(selections):
                coeff_data[row, list(sel)] = 1.0 / self.config.top_k
            coeff = T.straight_through(coeff_data, probs)
        else:
            coeff = probs
        out = T.linear(x, self.original_w, self.original_b)
        out = T.add_broadcast(out, self.general.forward(x))
        for i, expert in enumerate(self.experts):
            weighted = T.mul_broadcast(expert.forward(x), T.slice_cols(coeff, i, i + 1))
            out = T.add_broadcast(out, weighted)
        return out


def route(layer: MmoeLayer, features: Tensor) -> RouteDecision:
    """Routing decision for one feature row."""
    probs = layer.router.probabilities(features)
    return RouteDecision(probabilities=probs.data[0].copy(),
                         selected=top_k_indices(probs.data[0], layer.config.top_k))


def mmoe_forward(layer: MmoeLayer, i_tilde: Tensor, text: Tensor | None,
                 x: Tensor) -> tuple[Tensor, RouteDecision, dict]:
    """Hard top-k forward for a single hidden-state row."""
    if x.shape[0] != 1:
        raise ValueError(f"mmoe_forward expects one hidden-state row, got {x.shape}")
    pooled_v = T.mean(i_tilde, axis=0)
    if text is None or text.shape[0] == 0:
        pooled_t = T.constant(np.zeros((1, pooled_v.shape[1]), dtype=pooled_v.dtype))
    else:
        pooled_t = T.mean(text, axis=0)
    context = T.concat([pooled_v, pooled_t], axis=1)
    batch = RouteBatch()
    out = layer.forward_rows(x, context, hard=True, batch=batch)
    decision = RouteDecision(probabilities=batch.prob_tensors[0].data[0].copy(),
                             selected=batch.selections[0])
    stats = {"probs": decision.probabilities, "selected": decision.selected,
             "probs_tensor": batch.prob_tensors[0]}
    return out, decision, stats


def soft_mmoe_forward(layer: MmoeLayer, i_tilde: Tensor, text: Tensor | None,
                      x: Tensor) -> Tensor:
    """Smooth surrogate: experts weighted by their full routing probability."""
    pooled_v = T.mean(i_tilde, axis=0)
    if text is None or text.shape[0] == 0:
        pooled_t = T.constant(np.zeros((1, pooled_v.shape[1]), dtype=pooled_v.dtype))
    else:
        pooled_t = T.mean(text, axis=0)
    context = T.concat([pooled_v, pooled_t], axis=1)
    return layer.forward_rows(x, context, hard=False)


class UsageRecorder:
    """Per-layer tallies of expert selections, isolated per evaluation context."""

    def __init__(self, n_experts: int):
        self.n_experts = n_experts
        self.counts: dict[int, np.ndarray] = {}
        self.decisions: dict[int, int] = {}

    def record(self, layer_id: int, selected: tuple[int, ...]) -> None:
        if layer_id not in self.counts:
            self.counts[layer_id] = np.zeros(self.n_experts, dtype=np.int64)
            self.decisions[layer_id] = 0
        for e in selected:
            self.counts[layer_id][e] += 1
        self.decisions[layer_id] += 1

    def merge(self, other: "UsageRecorder") -> None:
        if other.n_experts != self.n_experts:
            raise ValueError("cannot merge recorders with different expert counts")
        for layer_id, counts in other.counts.items():
            if layer_id in self.counts:
                self.counts[layer_id] += counts
                self.decisions[layer_id] += other.decisions[layer_id]
            else:
                self.counts[layer_id] = counts.copy()
                self.decisions[layer_id] = other.decisions[layer_id]

    @property
    def total_decisions(self) -> int:
        return sum(self.decisions.values())


def expert_usage(recorder: UsageRecorder) -> dict[int, np.ndarray]:
    """Per-layer selection frequencies, normalized per decision.

    With top-1 routing each layer's row sums to 1; with top-k it sums to k.
    """
    if not recorder.counts:
        raise ValueError("expert_usage: no recorded routing decisions")
    return {
        layer_id: recorder.counts[layer_id] / recorder.decisions[layer_id]
        for layer_id in sorted(recorder.counts)
    }
