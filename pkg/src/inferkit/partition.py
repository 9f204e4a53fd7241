"""Multi-device partition planning, simulated sharded execution, and a cost model.

A plan is a grid of ``pipeline_stages x tensor_groups`` devices.  Each stage
owns a contiguous layer range; within a stage each device owns a contiguous
head range plus the matching slice of FFN columns.  Layer-wise partition is
the ``(devices, 1)`` grid, tensor-wise is ``(1, devices)``.

Ranges are 1-based and inclusive in every report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Model
from .errors import ConfigurationError, PlanningError

STRATEGIES = ("layer_wise", "tensor_wise", "hybrid")


@dataclass(frozen=True)
class DeviceAssignment:
    device: int
    layers: tuple[int, int]
    heads: tuple[int, int]
    stage: int
    group: int


@dataclass(frozen=True)
class PartitionPlan:
    strategy: str
    n_layers: int
    n_heads: int
    pipeline_stages: int
    tensor_groups: int
    assignments: tuple[DeviceAssignment, ...]

    @property
    def devices(self) -> int:
        return len(self.assignments)

    def stage_devices(self, stage: int) -> list[DeviceAssignment]:
        return [a for a in self.assignments if a.stage == stage]

    def to_text(self) -> str:
        rows = [("Device", "Assignments")]
        for a in self.assignments:
            rows.append((
                f"Device-{a.device}",
                f"Layers: [{a.layers[0]}, {a.layers[1]}], Heads: [{a.heads[0]}, {a.heads[1]}]",
            ))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{d.ljust(width)}  {s}" for d, s in rows) + "\n"


def split_ranges(total: int, parts: int) -> list[tuple[int, int]]:
    """Balanced contiguous 1-based inclusive ranges; earlier parts take the remainder."""
    base, extra = divmod(total, parts)
    out, start = [], 1
    for i in range(parts):
        size = base + (1 if i < extra else 0)
        out.append((start, start + size - 1))
        start += size
    return out


def parse_grid(text: str) -> tuple[int, int]:
    try:
        stages, groups = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise PlanningError(f"grid must look like STAGESxGROUPS, got {text!r}") from None
    return stages, groups


def plan(strategy: str, layers: int, heads: int, devices: int, grid: tuple[int, int] | None = None) -> PartitionPlan:
    if strategy not in STRATEGIES:
        raise PlanningError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    if devices < 1 or layers < 1 or heads < 1:
        raise PlanningError("layers, heads and devices must be positive")
    if strategy == "layer_wise":
        stages, groups = devices, 1
    elif strategy == "tensor_wise":
        stages, groups = 1, devices
    else:
        if grid is None:
            raise PlanningError("hybrid partition needs a grid")
        stages, groups = grid
    if grid is not None and tuple(grid) != (stages, groups):
        raise PlanningError(f"grid {grid[0]}x{grid[1]} does not fit {strategy}")
    if stages * groups != devices:
        raise PlanningError(f"grid {stages}x{groups} needs {stages * groups} devices, got {devices}")
    if heads % groups:
        raise PlanningError(f"{heads} heads cannot be split evenly across {groups} tensor groups")
    if layers < stages:
        raise PlanningError(f"{layers} layers cannot fill {stages} pipeline stages")
    layer_ranges = split_ranges(layers, stages)
    head_ranges = split_ranges(heads, groups)
    assignments = []
    for s, lr in enumerate(layer_ranges):
        for g, hr in enumerate(head_ranges):
            assignments.append(DeviceAssignment(s * groups + g, lr, hr, s, g))
    return PartitionPlan(strategy, layers, heads, stages, groups, tuple(assignments))


# --------------------------------------------------------------------------
# simulated execution


def _merge(partials: list[np.ndarray]) -> np.ndarray:
    """Sum shard outputs in device order (deterministic reduction)."""
    acc = partials[0]
    for p in partials[1:]:
        acc = acc + p
    return acc


def simulate_forward(p: PartitionPlan, model: Model, tokens) -> np.ndarray:
    """Run ``tokens`` through per-device shards and merge; returns logits [T, vocab].

    Devices run one after another in-process.  A stage with one device uses
    the unsliced weights, so single-group plans match the plain forward bit
    for bit.
    """
    spec = model.spec
    if spec.network_type != "decoder_only":
        raise ConfigurationError("partition simulation covers decoder_only models")
    if p.n_layers != spec.layers or p.n_heads != spec.decoder_heads:
        raise PlanningError(
            f"plan is for {p.n_layers} layers / {p.n_heads} heads, model has {spec.layers} / {spec.decoder_heads}"
        )
    groups = p.tensor_groups
    if spec.ffn_dim % groups:
        raise PlanningError(f"ffn_dim {spec.ffn_dim} cannot be split across {groups} devices")
    rep = spec.decoder_heads // spec.decoder_kv_heads
    per_device = spec.decoder_heads // groups
    if groups > 1 and per_device % rep and rep % per_device:
        raise PlanningError("device head ranges would split a kv group")
    fcols = spec.ffn_dim // groups

    positions = np.arange(len(tokens))
    x = model.embed_rows(tokens, positions)
    for stage in range(p.pipeline_stages):
        devs = p.stage_devices(stage)
        lo, hi = devs[0].layers
        for layer in range(lo - 1, hi):
            pre = f"layers.{layer}."
            xn = model.norm_rows(x, pre + "attn_norm")
            if groups == 1:
                x = x + model.attention_partial(xn, pre + "attn", positions, causal=True)
            else:
                x = x + _merge([
                    model.attention_partial(xn, pre + "attn", positions, causal=True, heads=(d.heads[0] - 1, d.heads[1]))
                    for d in devs
                ])
            xn = model.norm_rows(x, pre + "ffn_norm")
            if groups == 1:
                x = x + model.ffn_partial(xn, pre)
            else:
                x = x + _merge([model.ffn_partial(xn, pre, cols=(d.group * fcols, (d.group + 1) * fcols)) for d in devs])
    return model.logits_rows(x)


# --------------------------------------------------------------------------
# analytic cost model


@dataclass(frozen=True)
class CostModel:
    """Abstract time units; the defaults are a documented configuration, not a measurement.

    ``t_merge(g)`` is the cost of one merge across ``g`` devices and grows
    linearly with ``g``.
    """

    t_layer_compute: float = 24.0
    merge_base: float = 0.5
    merge_per_device: float = 1.5
    t_hop: float = 0.0
    units_per_second: float = 7680.0

    def __post_init__(self):
        if min(self.t_layer_compute, self.merge_base, self.merge_per_device, self.t_hop) < 0:
            raise ValueError("cost parameters must be non-negative")

    def t_merge(self, groups: int) -> float:
        return self.merge_base + self.merge_per_device * (groups - 1) if groups > 1 else 0.0


@dataclass(frozen=True)
class Estimate:
    latency: float
    decode_speed: float
    throughput: float


def estimate(p: PartitionPlan, cost: CostModel = CostModel(), batch_size: int = 1, layers: int | None = None) -> Estimate:
    """Per-token latency, per-stream decode speed and aggregate throughput (tokens/second).

    A token passes every layer in turn, each split ``groups`` ways, and pays
    two merges per layer once tensors are split.  A saturated pipeline keeps
    ``pipeline_stages`` streams of ``batch_size`` in flight.
    """
    layers = p.n_layers if layers is None else layers
    g, s = p.tensor_groups, p.pipeline_stages
    latency = layers * cost.t_layer_compute / g
    if g > 1:
        latency += 2 * layers * cost.t_merge(g)
    latency += (s - 1) * cost.t_hop
    decode = cost.units_per_second / latency
    return Estimate(latency, decode, decode * s * batch_size)
