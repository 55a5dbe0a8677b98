"""Desk-scale multimodal decoder stack and its three-stage trainer.

Wiring: synthetic vision experts embed an integer image descriptor into
per-expert token matrices.  In stages 1 and 2 those matrices (equal token
counts required) are concatenated channel-wise and pushed through the
shared 2-layer GELU projector into the language model.  Stage 3 inserts
the token reducer in front of the concatenation (reusing the same
projector) and wraps every MLP linear of the LM in a mixture-of-LoRA-
experts layer; the LM core and the vision experts freeze.

The LM is a tiny pre-norm causal decoder over an integer vocabulary.  The
visual prefix is treated as an unordered set (no positional embedding);
text positions index a learned positional table starting at zero from the
first text token, so changing the number of visual tokens between stages
does not shift what the frozen LM sees at text positions.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, tensor as T
from .cotr import CotrConfig, TokenProjector, TokenReducer, xavier_uniform
from .data import BOS, EOS, MIN_VOCAB, SyntheticSample, attributes
from .mmoe import MmoeConfig, MmoeLayer, RouteBatch, UsageRecorder, balance_loss
from .tensor import Tensor

PARAM_GROUPS = ("llm", "vision", "projector", "cotr", "mmoe")

# Which parameter groups train in each stage; everything else stays frozen.
STAGE_TRAINABLE = {
    1: frozenset({"projector"}),
    2: frozenset({"llm", "vision", "projector"}),
    3: frozenset({"projector", "cotr", "mmoe"}),
}

_MASKED = -1e9
_RMS_EPS = 1e-6


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_llm: int = 32
    mlp_hidden: int = 128
    max_text_positions: int = 24

    def __post_init__(self):
        if self.vocab_size < MIN_VOCAB:
            raise ValueError(f"vocab_size must be >= {MIN_VOCAB} for the toy task")
        if self.d_llm % self.n_heads != 0:
            raise ValueError("n_heads must divide d_llm")
        for name in ("n_layers", "n_heads", "mlp_hidden", "max_text_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class StackConfig:
    lm: LmConfig = LmConfig()
    cotr: CotrConfig = CotrConfig()
    mmoe: MmoeConfig = MmoeConfig()

    def __post_init__(self):
        if self.cotr.d_llm != self.lm.d_llm or self.cotr.d_text != self.lm.d_llm:
            raise ValueError("reducer output/text widths must match the LM width")


@dataclass(frozen=True)
class StagePlan:
    """Per-parameter-group trainability for one training stage."""

    stage: int
    trainable: frozenset[str]

    @classmethod
    def for_stage(cls, stage: int) -> "StagePlan":
        if stage not in STAGE_TRAINABLE:
            raise ValueError(f"stage must be 1, 2, or 3, got {stage}")
        return cls(stage=stage, trainable=STAGE_TRAINABLE[stage])

    def allows(self, param_name: str) -> bool:
        return param_name.split("/", 1)[0] in self.trainable


def _derived_attr(expert_id: int, a: int, b: int, c: int) -> int:
    return (a + 2 * b + 3 * c + expert_id) % 8


class SyntheticVisionExpert:
    """Deterministic seeded stand-in for a pretrained image tower.

    tokens(descriptor) = nonlin(template + noise(descriptor)) + signatures,
    where the signatures are trainable codebook rows added on designated
    token rows for the attributes this expert carries.  The elementwise
    nonlinearity differs per expert id so expert outputs stay decorrelated.
    """

    _NONLINS = (T.tanh, T.softsign, T.sin)

    def __init__(self, expert_id: int, n_tokens: int, dim: int, seed: int,
                 dtype=T.STANDARD_DTYPE, noise_scale: float = 0.3):
        self.expert_id = expert_id
        self.n_tokens = n_tokens
        self.dim = dim
        self.seed = seed
        self.noise_scale = noise_scale
        self.dtype = dtype
        self.nonlin = self._NONLINS[expert_id % len(self._NONLINS)]
        rng = np.random.default_rng([seed, 7, expert_id])
        self.template = T.parameter(
            rng.normal(0.0, 0.02, size=(n_tokens, dim)).astype(dtype))
        half = max(1, n_tokens // 2)
        if expert_id == 0:
            carried = [("a", slice(0, half)), ("b", slice(half, n_tokens))]
        elif expert_id == 1:
            carried = [("c", slice(0, n_tokens))]
        else:
            carried = [(f"mix{expert_id}", slice(0, n_tokens))]
        self.carried = carried
        self.codebooks = {
            attr: T.parameter(rng.normal(0.0, 0.5, size=(8, dim)).astype(dtype))
            for attr, _ in carried
        }
        self._masks = {}
        for attr, rows in carried:
            mask = np.zeros((n_tokens, 1), dtype=dtype)
            mask[rows] = 1.0
            self._masks[attr] = T.constant(mask)

    def _attr_value(self, attr: str, descriptor: int) -> int:
        a, b, c = attributes(descriptor)
        if attr == "a":
            return a
        if attr == "b":
            return b
        if attr == "c":
            return c
        return _derived_attr(self.expert_id, a, b, c)

    def tokens(self, descriptor: int) -> Tensor:
        noise_rng = np.random.default_rng([self.seed, 11, self.expert_id, descriptor])
        noise = T.constant(noise_rng.normal(
            0.0, self.noise_scale, size=(self.n_tokens, self.dim)).astype(self.dtype))
        out = self.nonlin(T.add_broadcast(self.template, noise))
        for attr, _ in self.carried:
            row = T.gather_rows(self.codebooks[attr], [self._attr_value(attr, descriptor)])
            out = T.add_broadcast(out, T.mul_broadcast(self._masks[attr], row))
        return out

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {f"{prefix}/template": self.template}
        for attr, _ in self.carried:
            params[f"{prefix}/code_{attr}"] = self.codebooks[attr]
        return params


def rms_normalize(x: Tensor) -> Tensor:
    ms = T.mean(T.mul_broadcast(x, x), axis=1)
    eps = T.constant(np.full((1, 1), _RMS_EPS, dtype=x.dtype))
    return T.mul_broadcast(x, T.powf(T.add_broadcast(ms, eps), -0.5))


class Attention:
    """Multi-head causal self-attention with per-head projections."""

    def __init__(self, d_llm: int, n_heads: int, rng: np.random.Generator, dtype):
        self.n_heads = n_heads
        self.d_head = d_llm // n_heads
        self.wq = [T.parameter(xavier_uniform(rng, d_llm, self.d_head, dtype))
                   for _ in range(n_heads)]
        self.wk = [T.parameter(xavier_uniform(rng, d_llm, self.d_head, dtype))
                   for _ in range(n_heads)]
        self.wv = [T.parameter(xavier_uniform(rng, d_llm, self.d_head, dtype))
                   for _ in range(n_heads)]
        self.wo = T.parameter(xavier_uniform(rng, d_llm, d_llm, dtype))

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        inv = 1.0 / math.sqrt(self.d_head)
        heads = []
        for h in range(self.n_heads):
            q = T.matmul(x, self.wq[h])
            k = T.matmul(x, self.wk[h])
            v = T.matmul(x, self.wv[h])
            scores = T.add_broadcast(T.scale(T.matmul(q, T.transpose(k)), inv), mask)
            heads.append(T.matmul(T.softmax(scores, axis=1), v))
        stacked = heads[0] if len(heads) == 1 else T.concat(heads, axis=1)
        return T.matmul(stacked, self.wo)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {}
        for h in range(self.n_heads):
            params[f"{prefix}/q{h}"] = self.wq[h]
            params[f"{prefix}/k{h}"] = self.wk[h]
            params[f"{prefix}/v{h}"] = self.wv[h]
        params[f"{prefix}/o"] = self.wo
        return params


class Mlp:
    """The LM's feed-forward slot: linear -> GELU -> linear."""

    def __init__(self, d_llm: int, hidden: int, rng: np.random.Generator, dtype):
        self.w1 = T.parameter(xavier_uniform(rng, d_llm, hidden, dtype))
        self.b1 = T.parameter(np.zeros((1, hidden), dtype=dtype))
        self.w2 = T.parameter(xavier_uniform(rng, hidden, d_llm, dtype))
        self.b2 = T.parameter(np.zeros((1, d_llm), dtype=dtype))

    def forward(self, x: Tensor, ctx=None, hard=True, batches=None,
                recorder=None, record_rows=None) -> Tensor:
        return T.linear(T.gelu(T.linear(x, self.w1, self.b1)), self.w2, self.b2)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}/w1": self.w1, f"{prefix}/b1": self.b1,
                f"{prefix}/w2": self.w2, f"{prefix}/b2": self.b2}


class MmoeMlp:
    """Stage-3 feed-forward slot: both linears wrapped as MMoE layers.

    The wrapped originals stay owned by the LM parameter group (and frozen
    in stage 3); the routers and experts live under the mmoe group.
    """

    def __init__(self, mlp: Mlp, d_context: int, config: MmoeConfig,
                 rng: np.random.Generator, dtype, layer_id_base: int):
        d_llm, hidden = mlp.w1.shape
        self.mlp = mlp
        self.fc1 = MmoeLayer(d_llm, hidden, d_context, config, rng, dtype,
                             original_w=mlp.w1, original_b=mlp.b1,
                             layer_id=layer_id_base)
        self.fc2 = MmoeLayer(hidden, d_llm, d_context, config, rng, dtype,
                             original_w=mlp.w2, original_b=mlp.b2,
                             layer_id=layer_id_base + 1)

    def forward(self, x: Tensor, ctx: Tensor, hard=True, batches=None,
                recorder=None, record_rows=None) -> Tensor:
        def route_batch(layer):
            if batches is None:
                return None
            return batches.setdefault(layer.layer_id, RouteBatch())

        h = T.gelu(self.fc1.forward_rows(x, ctx, hard=hard,
                                         batch=route_batch(self.fc1),
                                         recorder=recorder,
                                         record_rows=record_rows))
        return self.fc2.forward_rows(h, ctx, hard=hard,
                                     batch=route_batch(self.fc2),
                                     recorder=recorder,
                                     record_rows=record_rows)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        params = self.fc1.named_parameters(f"{prefix}/fc1", include_original=False)
        params.update(self.fc2.named_parameters(f"{prefix}/fc2", include_original=False))
        return params


class Block:
    def __init__(self, cfg: LmConfig, rng: np.random.Generator, dtype):
        self.attn = Attention(cfg.d_llm, cfg.n_heads, rng, dtype)
        self.mlp: Mlp | MmoeMlp = Mlp(cfg.d_llm, cfg.mlp_hidden, rng, dtype)

    def forward(self, x: Tensor, mask: Tensor, ctx, hard, batches, recorder,
                record_rows=None) -> Tensor:
        x = T.add_broadcast(x, self.attn.forward(rms_normalize(x), mask))
        x = T.add_broadcast(x, self.mlp.forward(rms_normalize(x), ctx, hard,
                                                batches, recorder, record_rows))
        return x


class ToyLM:
    """Tiny pre-norm causal decoder over the integer toy vocabulary."""

    def __init__(self, cfg: LmConfig, rng: np.random.Generator, dtype):
        self.cfg = cfg
        self.embed = T.parameter(
            rng.normal(0.0, 0.02, size=(cfg.vocab_size, cfg.d_llm)).astype(dtype))
        self.pos = T.parameter(
            rng.normal(0.0, 0.02, size=(cfg.max_text_positions, cfg.d_llm)).astype(dtype))
        self.blocks = [Block(cfg, rng, dtype) for _ in range(cfg.n_layers)]
        self.head_w = T.parameter(xavier_uniform(rng, cfg.d_llm, cfg.vocab_size, dtype))
        self.head_b = T.parameter(np.zeros((1, cfg.vocab_size), dtype=dtype))
        self.dtype = dtype
        self._masks: dict[int, Tensor] = {}

    def causal_mask(self, length: int) -> Tensor:
        if length not in self._masks:
            mask = np.where(np.tril(np.ones((length, length), dtype=bool)),
                            0.0, _MASKED).astype(self.dtype)
            self._masks[length] = T.constant(mask)
        return self._masks[length]

    def forward(self, rows: Tensor, ctx, hard=True, batches=None,
                recorder=None, record_rows=None) -> Tensor:
        mask = self.causal_mask(rows.shape[0])
        x = rows
        for block in self.blocks:
            x = block.forward(x, mask, ctx, hard, batches, recorder, record_rows)
        return T.linear(rms_normalize(x), self.head_w, self.head_b)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {f"{prefix}/embed": self.embed, f"{prefix}/pos": self.pos,
                  f"{prefix}/head_w": self.head_w, f"{prefix}/head_b": self.head_b}
        for i, block in enumerate(self.blocks):
            params.update(block.attn.named_parameters(f"{prefix}/block{i}/attn"))
            mlp = block.mlp.mlp if isinstance(block.mlp, MmoeMlp) else block.mlp
            params.update(mlp.named_parameters(f"{prefix}/block{i}/mlp"))
        return params


class MultimodalModel:
    """Vision experts + (optional) token reducer + projector + toy LM."""

    def __init__(self, config: StackConfig, stage: int, seed: int,
                 dtype=T.STANDARD_DTYPE, config_digest: str = ""):
        if stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2, or 3, got {stage}")
        self.config = config
        self.stage = stage
        self.seed = seed
        self.dtype = dtype
        self.config_digest = config_digest

        shapes = config.cotr.experts
        if stage in (1, 2) and len({e.n_tokens for e in shapes}) != 1:
            raise ValueError(
                "pre-reduction wiring concatenates channel-wise and needs "
                "equal token counts across experts; insert the reducer "
                "(stage 3) to mix unequal lengths")
        self.experts = [
            SyntheticVisionExpert(i, e.n_tokens, e.dim, seed, dtype)
            for i, e in enumerate(shapes)
        ]
        proj_rng = np.random.default_rng([seed, 4])
        self.projector = TokenProjector(config.cotr.concat_width,
                                        config.cotr.projector_hidden,
                                        config.cotr.d_llm, proj_rng, dtype)
        lm_rng = np.random.default_rng([seed, 3])
        self.lm = ToyLM(config.lm, lm_rng, dtype)
        self.reducer: TokenReducer | None = None
        if stage == 3:
            self.reducer = TokenReducer(config.cotr, seed=seed, dtype=dtype,
                                        projector=self.projector)
            mmoe_rng = np.random.default_rng([seed, 5])
            for i, block in enumerate(self.lm.blocks):
                block.mlp = MmoeMlp(block.mlp, 2 * config.lm.d_llm, config.mmoe,
                                    mmoe_rng, dtype, layer_id_base=2 * i)

    # -- parameters ----------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, expert in enumerate(self.experts):
            params.update(expert.named_parameters(f"vision/expert{i}"))
        params.update(self.projector.named_parameters("projector"))
        params.update(self.lm.named_parameters("llm"))
        if self.reducer is not None:
            params.update(self.reducer.named_parameters("cotr"))
            for i, block in enumerate(self.lm.blocks):
                assert isinstance(block.mlp, MmoeMlp)
                params.update(block.mlp.named_parameters(f"mmoe/block{i}"))
        return params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def mmoe_layers(self) -> list[MmoeLayer]:
        layers = []
        for block in self.lm.blocks:
            if isinstance(block.mlp, MmoeMlp):
                layers.extend([block.mlp.fc1, block.mlp.fc2])
        return layers

    # -- forward -------------------------------------------------------

    def _instruction_rows(self, instruction: list[int]) -> Tensor | None:
        if not instruction:
            return None
        return T.gather_rows(self.lm.embed, instruction)

    def encode_visual(self, descriptor: int, instr_rows: Tensor | None) -> Tensor:
        raw = [expert.tokens(descriptor) for expert in self.experts]
        if self.reducer is not None:
            return self.reducer.forward(raw, instr_rows).projected
        combined = raw[0] if len(raw) == 1 else T.concat(raw, axis=1)
        return self.projector.forward(combined)

    def _context_row(self, i_tilde: Tensor, instr_rows: Tensor | None) -> Tensor:
        pooled_v = T.mean(i_tilde, axis=0)
        if instr_rows is None:
            pooled_t = T.constant(np.zeros((1, pooled_v.shape[1]), dtype=pooled_v.dtype))
        else:
            pooled_t = T.mean(instr_rows, axis=0)
        return T.concat([pooled_v, pooled_t], axis=1)

    def forward_tokens(self, descriptor: int, instruction: list[int],
                       continuation: list[int], hard: bool = True,
                       batches: dict[int, RouteBatch] | None = None,
                       recorder: UsageRecorder | None = None,
                       record_rows: set[int] | None = None) -> Tensor:
        """Logits for [visual prefix, instruction, continuation]."""
        text_ids = list(instruction) + list(continuation)
        if len(text_ids) > self.config.lm.max_text_positions:
            raise ValueError(
                f"text length {len(text_ids)} exceeds positional table "
                f"({self.config.lm.max_text_positions})")
        instr_rows = self._instruction_rows(instruction)
        i_tilde = self.encode_visual(descriptor, instr_rows)
        ctx = self._context_row(i_tilde, instr_rows)
        text_rows = T.add_broadcast(
            T.gather_rows(self.lm.embed, text_ids),
            T.gather_rows(self.lm.pos, list(range(len(text_ids)))))
        rows = T.concat([i_tilde, text_rows], axis=0)
        return self.lm.forward(rows, ctx, hard=hard, batches=batches,
                               recorder=recorder, record_rows=record_rows)

    def sample_loss(self, sample: SyntheticSample, hard: bool = True,
                    batches: dict[int, RouteBatch] | None = None,
                    reduction: str = "mean") -> Tensor:
        continuation = [BOS] + sample.response + [EOS]
        logits = self.forward_tokens(sample.descriptor, sample.instruction,
                                     continuation, hard=hard, batches=batches)
        n_vis = logits.shape[0] - len(sample.instruction) - len(continuation)
        start = n_vis + len(sample.instruction)
        rows = list(range(start, start + len(sample.response) + 1))
        targets = sample.response + [EOS]
        return T.cross_entropy(T.gather_rows(logits, rows), targets,
                               reduction=reduction)

    def generate(self, descriptor: int, instruction: list[int], max_len: int,
                 recorder: UsageRecorder | None = None) -> list[int]:
        """Greedy decoding; stops at the end token or after max_len tokens."""
        budget = self.config.lm.max_text_positions - len(instruction) - 1
        n_vis = self.config.cotr.n_query if self.reducer is not None \
            else self.config.cotr.experts[0].n_tokens
        generated: list[int] = []
        while len(generated) < min(max_len, budget):
            # Usage histograms count only the position actually generating
            # the next token; earlier positions re-route on every call.
            last = n_vis + len(instruction) + 1 + len(generated) - 1
            logits = self.forward_tokens(descriptor, instruction,
                                         [BOS] + generated, recorder=recorder,
                                         record_rows={last})
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == EOS:
                break
            generated.append(nxt)
        return generated


def build_model(config: StackConfig, stage: int, seed: int,
                dtype=T.STANDARD_DTYPE, config_digest: str = "") -> MultimodalModel:
    return MultimodalModel(config, stage, seed, dtype, config_digest)


# -- training ----------------------------------------------------------


@dataclass
class TrainHistory:
    stage: int
    steps: list[dict] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.steps[-1]["loss"] if self.steps else float("nan")


def clip_global_norm(params: list[Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


def train_stage(model: MultimodalModel, plan: StagePlan,
                samples: list[SyntheticSample], steps: int, lr: float,
                batch_size: int, seed: int, clip: float = 1.0) -> TrainHistory:
    """Mini-batch gradient descent over exactly the plan's enabled groups.

    Stage 3 adds the weighted balance penalty to the cross-entropy.  Raises
    if the plan does not match the model wiring or the loss goes non-finite.
    """
    if plan.stage != model.stage:
        raise ValueError(f"plan is for stage {plan.stage}, model wired for {model.stage}")
    if (model.reducer is not None) != (plan.stage == 3):
        raise ValueError("reducer wiring does not match the requested stage")
    if not samples:
        raise ValueError("train_stage: empty sample list")

    named = model.named_parameters()
    enabled = [p for name, p in named.items() if plan.allows(name)]
    if not enabled:
        raise ValueError("no trainable parameters for this plan")
    mmoe_cfg = model.config.mmoe
    rng = np.random.default_rng([seed, 20 + plan.stage])
    history = TrainHistory(stage=plan.stage)

    for step in range(steps):
        idx = rng.integers(0, len(samples), size=batch_size)
        batches: dict[int, RouteBatch] = {}
        try:
            with T.Tape() as tape:
                total_ce = None
                for i in idx:
                    ce = model.sample_loss(samples[int(i)], hard=True, batches=batches)
                    total_ce = ce if total_ce is None else T.add_broadcast(total_ce, ce)
                loss = T.scale(total_ce, 1.0 / batch_size)
                ce_value = loss.item()
                balance_value = 0.0
                if plan.stage == 3 and batches:
                    per_layer = [balance_loss(b, mmoe_cfg.n_experts, mmoe_cfg.top_k)
                                 for b in batches.values()]
                    bal = per_layer[0]
                    for extra in per_layer[1:]:
                        bal = T.add_broadcast(bal, extra)
                    bal = T.scale(bal, 1.0 / len(per_layer))
                    balance_value = bal.item()
                    loss = T.add_broadcast(loss, T.scale(bal, mmoe_cfg.balance_weight))
                T.backward(loss, tape)
        except FloatingPointError as exc:
            raise RuntimeError(
                f"non-finite loss at stage {plan.stage} step {step}: {exc}") from exc
        clip_global_norm(enabled, clip)
        for p in enabled:
            if p.grad is not None:
                p.data -= (lr * p.grad).astype(p.data.dtype)
        T.zero_grads(enabled)
        history.steps.append({"step": step, "loss": float(loss.item()),
                              "ce": ce_value, "balance": balance_value})
    return history


# -- evaluation --------------------------------------------------------


def evaluate(model: MultimodalModel, samples: list[SyntheticSample],
             max_len: int = 4, recorder: UsageRecorder | None = None,
             max_workers: int = 1) -> dict:
    """Greedy exact-match accuracy per task tag (and overall).

    Frozen-parameter generation is reentrant, so samples may be evaluated
    on up to max_workers threads; per-sample recorders are merged in input
    order to keep aggregate results independent of scheduling.
    """
    if not samples:
        raise ValueError("evaluate: empty sample list")

    def run_one(sample: SyntheticSample):
        local = UsageRecorder(model.config.mmoe.n_experts) if recorder is not None else None
        out = model.generate(sample.descriptor, sample.instruction, max_len,
                             recorder=local)
        return out == sample.response, local

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(run_one, samples))
    else:
        results = [run_one(s) for s in samples]

    per_task: dict[str, dict] = {}
    correct_total = 0
    for sample, (hit, local) in zip(samples, results):
        bucket = per_task.setdefault(sample.task, {"correct": 0, "total": 0})
        bucket["total"] += 1
        bucket["correct"] += int(hit)
        correct_total += int(hit)
        if recorder is not None and local is not None and local.counts:
            recorder.merge(local)
    for bucket in per_task.values():
        bucket["accuracy"] = bucket["correct"] / bucket["total"]
    return {
        "per_task": per_task,
        "overall": {"correct": correct_total, "total": len(samples),
                    "accuracy": correct_total / len(samples)},
    }


# -- checkpoint glue ---------------------------------------------------


def save_model(model: MultimodalModel, path) -> None:
    params = {name: t.data for name, t in model.named_parameters().items()}
    checkpoint.save(path, params, model.config_digest, model.stage)


def load_model_params(model: MultimodalModel, path) -> dict:
    """Load a checkpoint into the model's parameter tree.

    A lower-stage checkpoint may omit the reducer/mmoe groups (they keep
    their fresh initialization); any other mismatch is an error.
    """
    header, arrays = checkpoint.load(path)
    if model.config_digest and header["config_digest"] != model.config_digest:
        raise checkpoint.CheckpointError(
            f"{path}: checkpoint config digest {header['config_digest'][:12]}... "
            f"does not match model config {model.config_digest[:12]}...")
    named = model.named_parameters()
    extra = sorted(set(arrays) - set(named))
    if extra:
        raise checkpoint.CheckpointError(f"{path}: unknown parameters {extra[:4]}")
    for name, tensor_ in named.items():
        if name not in arrays:
            group = name.split("/", 1)[0]
            if group in ("cotr", "mmoe") and header["stage"] < 3:
                continue
            raise checkpoint.CheckpointError(f"{path}: missing parameter {name!r}")
        arr = arrays[name]
        if tuple(arr.shape) != tensor_.shape or arr.dtype != tensor_.data.dtype:
            raise checkpoint.CheckpointError(
                f"{path}: parameter {name!r} has shape {arr.shape}/{arr.dtype}, "
                f"model expects {tensor_.shape}/{tensor_.data.dtype}")
        tensor_.data = arr.copy()
    return header
