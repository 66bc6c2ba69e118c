"""Strategy space: coarse parallelism degrees plus per-operator shard axes.

A deployment strategy is the tuple (tp, ep, pp, batch) together with one
shard-axis choice per fused operator. Strategies round-trip losslessly
through a flat integer index vector, which is the representation consumed by
the search algorithms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

from .model import ModelSpec


class AxisChoice(IntEnum):
    """Weight shard axis for one operator.

    UNSHARDED replicates the operator on every device of the tensor-parallel
    group. DIM0 shards the weight's first (contraction) axis, DIM1 the second
    (output) axis. Index values are the wire encoding, so UNSHARDED must stay
    at 0: the all-zeros vector is the trivial single-device strategy.
    """

    UNSHARDED = 0
    DIM0 = 1
    DIM1 = 2


class OpClass(IntEnum):
    """Operator families the layout planner knows how to propagate."""

    DENSE_MATMUL = 0
    MOE_MATMUL = 1
    ATTENTION_CORE = 2
    ROUTER = 3
    ELEMENTWISE = 4


@dataclass(frozen=True)
class FusedOpDescriptor:
    """One fused operator of the per-token decode graph.

    shardable_axes lists the axes an operator can meaningfully split over the
    tensor-parallel group; UNSHARDED is always allowed and never listed.
    Operators with per_layer=True occur once per transformer layer, the rest
    once per model.
    """

    name: str
    op_class: OpClass
    shardable_axes: tuple[AxisChoice, ...]
    per_layer: bool

    def admits(self, axis: AxisChoice) -> bool:
        return axis is AxisChoice.UNSHARDED or axis in self.shardable_axes


_BOTH = (AxisChoice.DIM0, AxisChoice.DIM1)

# Canonical fused-operator sequence of one decode step. Order matters: the
# planner walks it as the dataflow order within a layer, with the four
# non-per-layer ops forming the pre/post segments around the layer stack.
_CANONICAL_OPS = (
    FusedOpDescriptor("embedding", OpClass.DENSE_MATMUL, _BOTH, per_layer=False),
    FusedOpDescriptor("qkv_proj", OpClass.DENSE_MATMUL, _BOTH, per_layer=True),
    FusedOpDescriptor("kv_cache_io", OpClass.ELEMENTWISE, (), per_layer=True),
    FusedOpDescriptor("attn_core", OpClass.ATTENTION_CORE, (AxisChoice.DIM1,), per_layer=True),
    FusedOpDescriptor("attn_out_proj", OpClass.DENSE_MATMUL, _BOTH, per_layer=True),
    FusedOpDescriptor("router_gate", OpClass.ROUTER, (), per_layer=True),
    FusedOpDescriptor("expert_ffn1", OpClass.MOE_MATMUL, _BOTH, per_layer=True),
    FusedOpDescriptor("expert_ffn2", OpClass.MOE_MATMUL, _BOTH, per_layer=True),
    FusedOpDescriptor("shared_ffn1", OpClass.DENSE_MATMUL, _BOTH, per_layer=True),
    FusedOpDescriptor("shared_ffn2", OpClass.DENSE_MATMUL, _BOTH, per_layer=True),
    FusedOpDescriptor("final_norm", OpClass.ELEMENTWISE, (), per_layer=False),
    FusedOpDescriptor("lm_head", OpClass.DENSE_MATMUL, _BOTH, per_layer=False),
)


def canonical_fused_ops(model: ModelSpec) -> tuple[FusedOpDescriptor, ...]:
    """Fused-operator list for one decode step of ``model``.

    Models without a shared expert drop the shared_ffn pair; everything else
    is always present.
    """
    if model.has_shared_expert:
        return _CANONICAL_OPS
    return tuple(op for op in _CANONICAL_OPS if not op.name.startswith("shared_ffn"))


# Power-of-two degree ladders. Batch extends to 1024 because decode
# throughput keeps improving with batch until KV cache or latency kills it.
DEFAULT_DEGREE_DOMAIN = (1, 2, 4, 8, 16, 32, 64)
DEFAULT_BATCH_DOMAIN = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024)


class EncodingError(ValueError):
    """Strategy component not present in its action-space domain."""


class DecodingError(ValueError):
    """Index vector malformed or out of range for the action space."""


@dataclass(frozen=True)
class ActionSpaceSpec:
    """Search domains for every sub-action.

    ``op_names`` are the operators the searcher controls, in head order;
    ``pinned`` fixes the remaining operators to constant axes (anything not
    listed is pinned UNSHARDED). Axis heads always have exactly
    ``DIM_CHOICES`` alternatives, admissible or not: picking an axis the
    operator does not admit yields an invalid strategy, not an encoding error.
    """

    tp_domain: tuple[int, ...] = DEFAULT_DEGREE_DOMAIN
    ep_domain: tuple[int, ...] = DEFAULT_DEGREE_DOMAIN
    pp_domain: tuple[int, ...] = DEFAULT_DEGREE_DOMAIN
    batch_domain: tuple[int, ...] = DEFAULT_BATCH_DOMAIN
    op_names: tuple[str, ...] = tuple(op.name for op in _CANONICAL_OPS)
    pinned: tuple[tuple[str, AxisChoice], ...] = ()

    DIM_CHOICES = 3

    def __post_init__(self) -> None:
        for label, domain in (
            ("tp_domain", self.tp_domain),
            ("ep_domain", self.ep_domain),
            ("pp_domain", self.pp_domain),
            ("batch_domain", self.batch_domain),
        ):
            if len(domain) == 0:
                raise ValueError(f"action_space.{label} must not be empty")
            if any(not isinstance(v, int) or v < 1 for v in domain):
                raise ValueError(f"action_space.{label} entries must be positive integers")
            if len(set(domain)) != len(domain):
                raise ValueError(f"action_space.{label} entries must be unique")
        if len(self.op_names) == 0:
            raise ValueError("action_space.op_names must not be empty")
        if len(set(self.op_names)) != len(self.op_names):
            raise ValueError("action_space.op_names entries must be unique")
        pinned_names = [name for name, _ in self.pinned]
        if len(set(pinned_names)) != len(pinned_names):
            raise ValueError("action_space.pinned entries must be unique")
        overlap = set(pinned_names) & set(self.op_names)
        if overlap:
            raise ValueError(f"action_space.pinned must not repeat controlled ops: {sorted(overlap)}")

    @property
    def num_ops(self) -> int:
        return len(self.op_names)

    @property
    def vector_length(self) -> int:
        """Length of the flat index encoding: four coarse heads plus one per op."""
        return 4 + self.num_ops

    @property
    def head_sizes(self) -> tuple[int, ...]:
        """Domain size per sub-action head, in encoding order."""
        return (
            len(self.tp_domain),
            len(self.ep_domain),
            len(self.pp_domain),
            len(self.batch_domain),
        ) + (self.DIM_CHOICES,) * self.num_ops

    @property
    def size(self) -> int:
        """Total number of encodable strategies."""
        n = 1
        for k in self.head_sizes:
            n *= k
        return n


@dataclass(frozen=True)
class Strategy:
    """One fully specified deployment: coarse degrees plus per-op axes.

    ``op_dims`` aligns with ``op_names``; operators outside that list take
    their axis from ``pinned_dims`` and default to UNSHARDED. A Strategy is
    self-describing so the simulator never needs the action space back.
    """

    tp: int
    ep: int
    pp: int
    batch: int
    op_names: tuple[str, ...]
    op_dims: tuple[AxisChoice, ...]
    pinned_dims: tuple[tuple[str, AxisChoice], ...] = field(default=())

    def __post_init__(self) -> None:
        for label, value in (("tp", self.tp), ("ep", self.ep), ("pp", self.pp), ("batch", self.batch)):
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"strategy.{label} must be a positive integer, got {value!r}")
        if len(self.op_dims) != len(self.op_names):
            raise ValueError(
                f"strategy.op_dims length {len(self.op_dims)} != op_names length {len(self.op_names)}"
            )

    @property
    def world_size(self) -> int:
        """Devices consumed by the deployment (batch is free, degrees are not)."""
        return self.tp * self.ep * self.pp

    def axis_of(self, op_name: str) -> AxisChoice:
        """Shard axis assigned to ``op_name``, following pins for uncontrolled ops."""
        try:
            return self.op_dims[self.op_names.index(op_name)]
        except ValueError:
            return dict(self.pinned_dims).get(op_name, AxisChoice.UNSHARDED)

    def replace_dims(self, op_dims: tuple[AxisChoice, ...]) -> "Strategy":
        return Strategy(self.tp, self.ep, self.pp, self.batch, self.op_names, op_dims, self.pinned_dims)


def encode_strategy(strategy: Strategy, space: ActionSpaceSpec) -> tuple[int, ...]:
    """Flatten a strategy into its index vector under ``space``.

    Raises EncodingError when any component value is not in its domain or the
    op lists disagree.
    """
    if strategy.op_names != space.op_names:
        raise EncodingError(
            f"strategy op_names {strategy.op_names} do not match action space {space.op_names}"
        )
    indices = []
    for label, value, domain in (
        ("tp", strategy.tp, space.tp_domain),
        ("ep", strategy.ep, space.ep_domain),
        ("pp", strategy.pp, space.pp_domain),
        ("batch", strategy.batch, space.batch_domain),
    ):
        try:
            indices.append(domain.index(value))
        except ValueError:
            raise EncodingError(f"{label}={value} is not in domain {domain}") from None
    indices.extend(int(axis) for axis in strategy.op_dims)
    return tuple(indices)


def decode_strategy(vector: tuple[int, ...], space: ActionSpaceSpec) -> Strategy:
    """Inverse of encode_strategy. Raises DecodingError on malformed vectors."""
    if len(vector) != space.vector_length:
        raise DecodingError(
            f"index vector has length {len(vector)}, expected {space.vector_length}"
        )
    sizes = space.head_sizes
    for pos, (idx, size) in enumerate(zip(vector, sizes)):
        if not isinstance(idx, int) or isinstance(idx, bool) or not 0 <= idx < size:
            raise DecodingError(f"index {idx!r} at position {pos} out of range [0, {size})")
    return Strategy(
        tp=space.tp_domain[vector[0]],
        ep=space.ep_domain[vector[1]],
        pp=space.pp_domain[vector[2]],
        batch=space.batch_domain[vector[3]],
        op_names=space.op_names,
        op_dims=tuple(AxisChoice(idx) for idx in vector[4:]),
        pinned_dims=space.pinned,
    )


# The classic 1-D tensor-parallel hand layout: project QKV and the first FFN
# matrix on their output axes, contract the following matmul on its input
# axis so each block ends in a partial sum, and gather logits from a
# vocab-split LM head. Everything token-routing or normalization related
# stays replicated.
_MEGATRON_AXES = {
    "embedding": AxisChoice.UNSHARDED,
    "qkv_proj": AxisChoice.DIM1,
    "kv_cache_io": AxisChoice.UNSHARDED,
    "attn_core": AxisChoice.DIM1,
    "attn_out_proj": AxisChoice.DIM0,
    "router_gate": AxisChoice.UNSHARDED,
    "expert_ffn1": AxisChoice.DIM1,
    "expert_ffn2": AxisChoice.DIM0,
    "shared_ffn1": AxisChoice.DIM1,
    "shared_ffn2": AxisChoice.DIM0,
    "final_norm": AxisChoice.UNSHARDED,
    "lm_head": AxisChoice.DIM1,
}


def megatron_fine_dims(ops: tuple[FusedOpDescriptor, ...]) -> tuple[AxisChoice, ...]:
    """Reference per-op axes of the textbook 1-D tensor-parallel layout.

    Defined for the canonical operator list; unknown op names are an error so
    a typo cannot silently pin an op UNSHARDED.
    """
    missing = [op.name for op in ops if op.name not in _MEGATRON_AXES]
    if missing:
        raise ValueError(f"no reference axis for ops: {missing}")
    return tuple(_MEGATRON_AXES[op.name] for op in ops)
