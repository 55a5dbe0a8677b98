"""Token and FLOPs accounting, plus the analysis exports.

The prefill estimator is analytic: per layer it counts the attention
projections, the quadratic score/context products, a per-element softmax
cost, and the feed-forward matmuls; the output head is counted once.  The
conventions are explicit and configurable: one multiply-accumulate is 2
FLOPs and softmax costs 5 FLOPs per attention-score element.  The MLP is
counted as two matrices (up and down); gated variants would add a third,
which changes totals but barely moves reduction ratios between the same
geometry at two sequence lengths.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class FlopsConventions:
    mac_flops: int = 2
    softmax_flops_per_element: int = 5


DEFAULT_CONVENTIONS = FlopsConventions()


@dataclass(frozen=True)
class ModelGeometry:
    n_layers: int
    d_model: int
    mlp_hidden: int
    n_heads: int
    vocab_size: int
    n_visual_tokens: int
    n_text_tokens: int

    def __post_init__(self):
        for name in ("d_model", "mlp_hidden", "n_heads", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.n_visual_tokens < 0 or self.n_text_tokens < 0:
            raise ValueError("token counts must be >= 0")
        if self.n_visual_tokens + self.n_text_tokens < 1:
            raise ValueError("prefill needs at least one token")

    @property
    def sequence_length(self) -> int:
        return self.n_visual_tokens + self.n_text_tokens


@dataclass(frozen=True)
class FlopsBreakdown:
    attention_projections: int
    attention_scores: int
    attention_softmax: int
    attention_context: int
    mlp: int
    output_head: int

    @property
    def total(self) -> int:
        return (self.attention_projections + self.attention_scores
                + self.attention_softmax + self.attention_context
                + self.mlp + self.output_head)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d


def token_reduction_ratio(n_reduced: int, n_baseline: int) -> float:
    """Fractional reduction 1 - n_reduced / n_baseline."""
    if n_baseline <= 0:
        raise ValueError("baseline token count must be positive")
    if n_reduced <= 0:
        raise ValueError("reduced token count must be positive")
    return 1.0 - n_reduced / n_baseline


def prefill_flops(geom: ModelGeometry,
                  conventions: FlopsConventions = DEFAULT_CONVENTIONS) -> FlopsBreakdown:
    """Analytic FLOPs to process the full prompt once."""
    s = geom.sequence_length
    d = geom.d_model
    mac = conventions.mac_flops
    per_layer_proj = 4 * mac * s * d * d                 # q, k, v, output
    per_layer_scores = mac * s * s * d                   # scores across heads
    per_layer_softmax = conventions.softmax_flops_per_element * geom.n_heads * s * s
    per_layer_context = mac * s * s * d
    per_layer_mlp = 2 * mac * s * d * geom.mlp_hidden    # up and down matrices
    return FlopsBreakdown(
        attention_projections=geom.n_layers * per_layer_proj,
        attention_scores=geom.n_layers * per_layer_scores,
        attention_softmax=geom.n_layers * per_layer_softmax,
        attention_context=geom.n_layers * per_layer_context,
        mlp=geom.n_layers * per_layer_mlp,
        output_head=mac * s * d * geom.vocab_size,
    )


def flops_reduction(geom_baseline: ModelGeometry, geom_reduced: ModelGeometry,
                    conventions: FlopsConventions = DEFAULT_CONVENTIONS) -> float:
    base = prefill_flops(geom_baseline, conventions).total
    reduced = prefill_flops(geom_reduced, conventions).total
    return 1.0 - reduced / base


def export_usage_csv(usage: dict[int, np.ndarray], path) -> None:
    """Write `layer,expert,frequency` rows (LF endings, 6 fractional digits).

    Frequencies round-trip exactly at that precision: parsing the file back
    reproduces round(frequency, 6).  Refuses empty input before touching
    the file.
    """
    if not usage:
        raise ValueError("export_usage_csv: empty usage map")
    lines = ["layer,expert,frequency"]
    for layer_id in sorted(usage):
        freqs = np.asarray(usage[layer_id], dtype=np.float64)
        if freqs.size == 0:
            raise ValueError(f"export_usage_csv: layer {layer_id} has no experts")
        for expert, freq in enumerate(freqs):
            lines.append(f"{layer_id},{expert},{freq:.6f}")
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"writing usage CSV to {path}: {exc}") from exc


def parse_usage_csv(path) -> dict[int, np.ndarray]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise OSError(f"reading usage CSV from {path}: {exc}") from exc
    if not lines or lines[0] != "layer,expert,frequency":
        raise ValueError(f"{path}: missing usage CSV header")
    rows: dict[int, dict[int, float]] = {}
    for line in lines[1:]:
        if not line:
            continue
        layer_s, expert_s, freq_s = line.split(",")
        rows.setdefault(int(layer_s), {})[int(expert_s)] = float(freq_s)
    usage = {}
    for layer_id, experts in rows.items():
        arr = np.zeros(max(experts) + 1, dtype=np.float64)
        for expert, freq in experts.items():
            arr[expert] = freq
        usage[layer_id] = arr
    return usage


def export_metrics_json(payload: dict, path) -> None:
    """Deterministic pretty-printed JSON; rejects empty payloads."""
    if not payload:
        raise ValueError("export_metrics_json: empty payload")
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"writing metrics JSON to {path}: {exc}") from exc
