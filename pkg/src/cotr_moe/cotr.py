"""Conditional token reduction.

Consolidates each vision expert's token matrix (N_i x d_i, lengths and
widths may differ per expert) into a shared number of tokens n_query, by
attending with a learnable per-expert query against four similarity
sources: query-to-token, token self-similarity, tokens of the other
experts, and the text tokens.  The consolidated per-expert matrices are
concatenated channel-wise and projected by a 2-layer GELU MLP into the
language model's embedding width.

Score composition for expert i (all operands first projected to width
d_score):

    s_query = Q_i' @ I_i'^T                 (n_query x N_i)
    s_self  = colsum(I_i') @ I_i'^T         (1 x N_i)
    s_cross = sum_{j != i} colsum(I_j') @ I_i'^T
    s_text  = colsum(T') @ I_i'^T
    total   = s_query + s_self + s_cross + s_text   (rows broadcast)

In "standard" mode the attention weights are softmax(total / sqrt(d))
row-wise, so each consolidated token is a convex combination of input
tokens.  "literal-eq6" mode instead divides the softmax output by sqrt(d),
which rescales every row's mass to 1/sqrt(d).  The scaling dimension d is
d_score by default, or the expert's own token width when
scale_dim="expert".

Reductions over token rows use the sorted-order contraction from the
tensor module, so permuting an expert's input tokens permutes the weight
columns exactly and leaves the consolidated tokens bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

SCORE_MODES = ("standard", "literal-eq6")
SCALE_DIMS = ("score", "expert")


@dataclass(frozen=True)
class ExpertShape:
    n_tokens: int
    dim: int

    def __post_init__(self):
        if self.n_tokens < 1 or self.dim < 1:
            raise ValueError(f"expert shape must be positive, got {self}")


@dataclass(frozen=True)
class CotrConfig:
    """Geometry and scoring options for the token reducer."""

    experts: tuple[ExpertShape, ...] = (ExpertShape(36, 16), ExpertShape(36, 24))
    n_query: int = 8
    d_score: int = 32
    d_text: int = 32
    d_llm: int = 32
    projector_hidden: int = 64
    mode: str = "standard"
    scale_dim: str = "score"
    use_self: bool = True
    use_cross: bool = True
    use_text: bool = True

    def __post_init__(self):
        if not self.experts:
            raise ValueError("at least one vision expert is required")
        if self.mode not in SCORE_MODES:
            raise ValueError(f"mode must be one of {SCORE_MODES}, got {self.mode!r}")
        if self.scale_dim not in SCALE_DIMS:
            raise ValueError(f"scale_dim must be one of {SCALE_DIMS}, got {self.scale_dim!r}")
        for name in ("n_query", "d_score", "d_text", "d_llm", "projector_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def concat_width(self) -> int:
        return sum(e.dim for e in self.experts)


@dataclass
class ConsolidatedTokens:
    """Per-expert consolidated matrices, their channel concat, and the projection."""

    per_expert: list[Tensor]
    combined: Tensor
    projected: Tensor


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def score_query(q_hat: Tensor, i_hat: Tensor) -> Tensor:
    """Pairwise query-token inner products, n_query x N_i."""
    return T.matmul(q_hat, T.transpose(i_hat))


def score_self(i_hat: Tensor) -> Tensor:
    """All-ones row times the token Gram matrix, 1 x N_i."""
    ones = T.constant(np.ones((1, i_hat.shape[0]), dtype=i_hat.dtype))
    colsum = T.matmul(ones, i_hat, stable=True)
    return T.matmul(colsum, T.transpose(i_hat))


def score_cross(other_hats: list[Tensor], i_hat: Tensor) -> Tensor:
    """Row-reduced similarity to the other experts' tokens, 1 x N_i.

    Each j term I_j' @ I_i'^T is reduced over j's rows, so the sum of terms
    is a single row; with no other experts the row is zero.
    """
    if not other_hats:
        return T.constant(np.zeros((1, i_hat.shape[0]), dtype=i_hat.dtype))
    total = None
    for j_hat in other_hats:
        ones = T.constant(np.ones((1, j_hat.shape[0]), dtype=j_hat.dtype))
        colsum = T.matmul(ones, j_hat, stable=True)
        total = colsum if total is None else T.add_broadcast(total, colsum)
    return T.matmul(total, T.transpose(i_hat))


def score_text(t_hat: Tensor | None, i_hat: Tensor) -> Tensor:
    """Row-reduced similarity to the text tokens, 1 x N_i; zero if no text."""
    if t_hat is None or t_hat.shape[0] == 0:
        return T.constant(np.zeros((1, i_hat.shape[0]), dtype=i_hat.dtype))
    ones = T.constant(np.ones((1, t_hat.shape[0]), dtype=t_hat.dtype))
    colsum = T.matmul(ones, t_hat, stable=True)
    return T.matmul(colsum, T.transpose(i_hat))


def attention_weights(s_query: Tensor, s_self: Tensor, s_cross: Tensor,
                      s_text: Tensor, scale_width: int, mode: str) -> Tensor:
    """Combine the four scores and normalize per the configured mode."""
    if mode not in SCORE_MODES:
        raise ValueError(f"unknown score mode {mode!r}")
    total = T.add_broadcast(s_query, s_self)
    total = T.add_broadcast(total, s_cross)
    total = T.add_broadcast(total, s_text)
    inv = 1.0 / math.sqrt(scale_width)
    if mode == "standard":
        return T.softmax(T.scale(total, inv), axis=1)
    return T.scale(T.softmax(total, axis=1), inv)


def consolidate(alpha: Tensor, tokens: Tensor) -> Tensor:
    """Weighted aggregation alpha @ tokens, n_query x d_i.

    Uses the sorted contraction so the result is exactly invariant to a
    shared permutation of weight columns and token rows.
    """
    if alpha.shape[1] != tokens.shape[0]:
        raise ValueError(f"consolidate: {alpha.shape} incompatible with {tokens.shape}")
    return T.matmul(alpha, tokens, stable=True)


class QueryBank:
    """One learnable query matrix (n_query x d_i) per vision expert."""

    def __init__(self, config: CotrConfig, rng: np.random.Generator, dtype):
        self.queries = [
            T.parameter(rng.normal(0.0, 0.02, size=(config.n_query, e.dim)).astype(dtype))
            for e in config.experts
        ]


class ScoreProjections:
    """Per-expert query/key projections into d_score, plus the text projection.

    Cross-expert terms reuse expert j's key projection, keeping the
    parameter count linear in the number of experts.
    """

    def __init__(self, config: CotrConfig, rng: np.random.Generator, dtype):
        d_s = config.d_score
        self.query_maps = [
            T.parameter(xavier_uniform(rng, e.dim, d_s, dtype)) for e in config.experts
        ]
        self.key_maps = [
            T.parameter(xavier_uniform(rng, e.dim, d_s, dtype)) for e in config.experts
        ]
        self.text_map = T.parameter(xavier_uniform(rng, config.d_text, d_s, dtype))


class TokenProjector:
    """2-layer GELU MLP from the channel-concat width into the LM width."""

    def __init__(self, d_in: int, hidden: int, d_out: int,
                 rng: np.random.Generator, dtype):
        self.w1 = T.parameter(xavier_uniform(rng, d_in, hidden, dtype))
        self.b1 = T.parameter(np.zeros((1, hidden), dtype=dtype))
        self.w2 = T.parameter(xavier_uniform(rng, hidden, d_out, dtype))
        self.b2 = T.parameter(np.zeros((1, d_out), dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(T.gelu(T.linear(x, self.w1, self.b1)), self.w2, self.b2)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}/w1": self.w1, f"{prefix}/b1": self.b1,
                f"{prefix}/w2": self.w2, f"{prefix}/b2": self.b2}


def project_inputs(visual: list[Tensor], queries: QueryBank, text: Tensor | None,
                   projections: ScoreProjections) -> tuple[list[Tensor], list[Tensor], Tensor | None]:
    """Apply the learned projections to queries, tokens, and text."""
    q_hats = [T.matmul(q, w) for q, w in zip(queries.queries, projections.query_maps)]
    i_hats = [T.matmul(v, w) for v, w in zip(visual, projections.key_maps)]
    t_hat = None
    if text is not None and text.shape[0] > 0:
        if text.shape[1] != projections.text_map.shape[0]:
            raise ValueError(
                f"text width {text.shape[1]} does not match projection "
                f"input {projections.text_map.shape[0]}")
        t_hat = T.matmul(text, projections.text_map)
    return q_hats, i_hats, t_hat


class TokenReducer:
    """The full consolidation pipeline with its learnable state.

    The final projector may be supplied externally (the toy stack shares
    one projector between its pre-reduction and post-reduction wirings);
    standalone reducers create their own.
    """

    def __init__(self, config: CotrConfig, seed: int = 0, dtype=T.STANDARD_DTYPE,
                 projector: TokenProjector | None = None):
        self.config = config
        rng = np.random.default_rng([seed, 1])
        self.queries = QueryBank(config, rng, dtype)
        self.projections = ScoreProjections(config, rng, dtype)
        self.owns_projector = projector is None
        self.projector = projector if projector is not None else TokenProjector(
            config.concat_width, config.projector_hidden, config.d_llm, rng, dtype)

    def named_parameters(self, prefix: str = "cotr") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, q in enumerate(self.queries.queries):
            params[f"{prefix}/query{i}"] = q
        for i, w in enumerate(self.projections.query_maps):
            params[f"{prefix}/query_proj{i}"] = w
        for i, w in enumerate(self.projections.key_maps):
            params[f"{prefix}/key_proj{i}"] = w
        params[f"{prefix}/text_proj"] = self.projections.text_map
        if self.owns_projector:
            params.update(self.projector.named_parameters(f"{prefix}/projector"))
        return params

    def _validate(self, visual: list[Tensor], text: Tensor | None) -> None:
        cfg = self.config
        if len(visual) != cfg.n_experts:
            raise ValueError(f"expected {cfg.n_experts} expert token matrices, got {len(visual)}")
        for i, (v, e) in enumerate(zip(visual, cfg.experts)):
            if v.shape[1] != e.dim:
                raise ValueError(f"expert {i}: token width {v.shape[1]} != configured {e.dim}")
            if v.shape[0] < 1:
                raise ValueError(f"expert {i}: needs at least one token")
        if text is not None and text.shape[0] > 0 and text.shape[1] != cfg.d_text:
            raise ValueError(f"text width {text.shape[1]} != configured {cfg.d_text}")

    def expert_weights(self, visual: list[Tensor], text: Tensor | None) -> list[Tensor]:
        """Attention weight matrix (n_query x N_i) for every expert."""
        cfg = self.config
        self._validate(visual, text)
        q_hats, i_hats, t_hat = project_inputs(visual, self.queries, text, self.projections)
        weights = []
        for i, i_hat in enumerate(i_hats):
            n_i = i_hat.shape[0]
            zero_row = T.constant(np.zeros((1, n_i), dtype=i_hat.dtype))
            s_q = score_query(q_hats[i], i_hat)
            s_s = score_self(i_hat) if cfg.use_self else zero_row
            others = [h for j, h in enumerate(i_hats) if j != i]
            s_c = score_cross(others, i_hat) if cfg.use_cross else zero_row
            s_t = score_text(t_hat, i_hat) if cfg.use_text else zero_row
            width = cfg.d_score if cfg.scale_dim == "score" else cfg.experts[i].dim
            weights.append(attention_weights(s_q, s_s, s_c, s_t, width, cfg.mode))
        return weights

    def forward(self, visual: list[Tensor], text: Tensor | None = None) -> ConsolidatedTokens:
        weights = self.expert_weights(visual, text)
        per_expert = [consolidate(a, v) for a, v in zip(weights, visual)]
        combined = per_expert[0] if len(per_expert) == 1 else T.concat(per_expert, axis=1)
        projected = self.projector.forward(combined)
        return ConsolidatedTokens(per_expert, combined, projected)
