"""Token-string encoding of dynamic cells and its structural decoding.

A cell is a list of steps; each step is five tokens
``(in1, in2, op1, op2, agg)``. Step ``i`` may read from the five fixed
input slots or from any earlier step's aggregate, so its input tokens live
in ``[0, 5 + i)``. Aggregates that no later step consumes are concatenated
to form the cell output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

N_INPUT_SLOTS = 5
N_OPS = 6
N_AGGS = 6
TOKENS_PER_STEP = 5

# Slot order is fixed and recorded in run logs: previous-frame recurrent
# state and deep features first, then the current frame fine-to-coarse.
SLOT_NAMES = ("dec_prev", "layer4_prev", "layer2", "layer3", "layer4")
# Spatial resolution of each slot relative to the network input.
SLOT_STRIDES = (8, 32, 8, 16, 32)

OP_NAMES = (
    "sep_conv_3x3",
    "pool_up_conv1x1",
    "sep_conv_3x3_dil3",
    "sep_conv_5x5_dil6",
    "skip",
    "deform_conv_3x3",
)
AGG_NAMES = (
    "weighted_sum",
    "concat_conv1x1",
    "filter_predict",
    "affine_warp",
    "stack_conv3d",
    "gated_mul",
)


class GenotypeError(ValueError):
    """A token string that violates the cell grammar."""


@dataclass(frozen=True)
class Step:
    in1: int
    in2: int
    op1: int
    op2: int
    agg: int

    def tokens(self) -> list[int]:
        return [self.in1, self.in2, self.op1, self.op2, self.agg]


@dataclass(frozen=True)
class Genotype:
    steps: tuple[Step, ...]

    @property
    def depth(self) -> int:
        return len(self.steps)


def _check_step(index: int, in1: int, in2: int, op1: int, op2: int, agg: int):
    pool = N_INPUT_SLOTS + index
    for name, value in (("in1", in1), ("in2", in2)):
        if not 0 <= value < pool:
            raise GenotypeError(
                f"step {index} {name} token {value} out of range [0,{pool})")
    for name, value in (("op1", op1), ("op2", op2)):
        if not 0 <= value < N_OPS:
            raise GenotypeError(
                f"step {index} {name} token {value} out of range [0,{N_OPS})")
    if not 0 <= agg < N_AGGS:
        raise GenotypeError(
            f"step {index} agg token {agg} out of range [0,{N_AGGS})")


def decode(tokens: list[int], depth: int) -> Genotype:
    """Parse a flat token string of length 5*depth into a validated Genotype."""
    if depth < 1:
        raise GenotypeError(f"depth {depth} < 1")
    if len(tokens) != TOKENS_PER_STEP * depth:
        raise GenotypeError(
            f"token string length {len(tokens)} != {TOKENS_PER_STEP * depth}")
    steps = []
    for i in range(depth):
        in1, in2, op1, op2, agg = (int(t) for t in
                                   tokens[5 * i:5 * (i + 1)])
        _check_step(i, in1, in2, op1, op2, agg)
        steps.append(Step(in1, in2, op1, op2, agg))
    return Genotype(tuple(steps))


def encode(g: Genotype) -> list[int]:
    out: list[int] = []
    for step in g.steps:
        out.extend(step.tokens())
    return out


def parse_token_text(text: str) -> list[int]:
    """One line of comma-separated integers -> token list."""
    items = [s.strip() for s in text.strip().split(",") if s.strip()]
    if not items:
        raise GenotypeError("empty token string")
    try:
        return [int(s) for s in items]
    except ValueError as exc:
        raise GenotypeError(f"non-integer token in {text!r}") from exc


def format_tokens(tokens: list[int]) -> str:
    return ",".join(str(t) for t in tokens)


def random_genotype(depth: int, rng) -> Genotype:
    steps = []
    for i in range(depth):
        pool = N_INPUT_SLOTS + i
        steps.append(Step(int(rng.integers(pool)), int(rng.integers(pool)),
                          int(rng.integers(N_OPS)), int(rng.integers(N_OPS)),
                          int(rng.integers(N_AGGS))))
    return Genotype(tuple(steps))


@dataclass(frozen=True)
class CellGraph:
    """Structural DAG of a decoded cell.

    Node ids: 0..4 are the input slots, 5+i is step i's aggregate. Edges
    carry the candidate-op id applied along them. ``output_set`` holds the
    aggregates no later step consumes, in node-id order.
    """

    depth: int
    edges: tuple[tuple[int, int, int, int], ...]  # (src, step, slot 1|2, op)
    output_set: tuple[int, ...]
    agg_ids: tuple[int, ...] = field(default=())

    @property
    def n_nodes(self) -> int:
        return N_INPUT_SLOTS + self.depth


def build_graph(g: Genotype) -> CellGraph:
    consumed: set[int] = set()
    edges = []
    for i, step in enumerate(g.steps):
        consumed.add(step.in1)
        consumed.add(step.in2)
        edges.append((step.in1, i, 1, step.op1))
        edges.append((step.in2, i, 2, step.op2))
    output_set = tuple(N_INPUT_SLOTS + i for i in range(g.depth)
                       if N_INPUT_SLOTS + i not in consumed)
    return CellGraph(depth=g.depth, edges=tuple(edges),
                     output_set=output_set,
                     agg_ids=tuple(s.agg for s in g.steps))


def space_size(depth: int) -> int:
    """Count of distinct token strings of the given depth."""
    if depth < 1:
        raise GenotypeError(f"depth {depth} < 1")
    total = 1
    for i in range(depth):
        total *= (N_INPUT_SLOTS + i) ** 2 * N_OPS * N_OPS * N_AGGS
    return total


# Closed-form trainable-scalar counts per block at cell width c. These must
# track the builders in ops.py; the allocation-walk tests enforce that.

def op_param_count_formula(op_id: int, c: int) -> int:
    if op_id == 0 or op_id == 2:  # depthwise 3x3 + pointwise with bias
        return 9 * c + c * c + c
    if op_id == 1:  # 1x1 conv with bias after pool+upsample
        return c * c + c
    if op_id == 3:  # depthwise 5x5 + pointwise with bias
        return 25 * c + c * c + c
    if op_id == 4:  # skip
        return 0
    if op_id == 5:  # offset conv (18 maps, with bias) + main 3x3 with bias
        return 18 * c * 9 + 18 + c * c * 9 + c
    raise GenotypeError(f"op id {op_id} out of range [0,{N_OPS})")


def agg_param_count_formula(agg_id: int, c: int) -> int:
    if agg_id == 0:  # two per-channel weight vectors
        return 2 * c
    if agg_id == 1:  # 1x1 conv 2c->c with bias
        return 2 * c * c + c
    if agg_id == 2:  # pooled-filter correlation, no weights
        return 0
    if agg_id == 3:  # linear c->6 affine head
        return 6 * c + 6
    if agg_id == 4:  # depth-2 3x3 conv with bias
        return c * c * 2 * 9 + c
    if agg_id == 5:  # gating, no weights
        return 0
    raise GenotypeError(f"aggregation id {agg_id} out of range [0,{N_AGGS})")


def cell_param_count(g: Genotype, cell_width: int, dec_width: int,
                     input_channels: list[int]) -> int:
    """Trainable scalars in a cell: harmonizers, step ops, output projection."""
    if len(input_channels) != N_INPUT_SLOTS:
        raise GenotypeError(
            f"expected {N_INPUT_SLOTS} input channel counts, "
            f"got {len(input_channels)}")
    total = sum(ci * cell_width + cell_width for ci in input_channels)
    for step in g.steps:
        total += op_param_count_formula(step.op1, cell_width)
        total += op_param_count_formula(step.op2, cell_width)
        total += agg_param_count_formula(step.agg, cell_width)
    n_out = len(build_graph(g).output_set)
    total += n_out * cell_width * dec_width + dec_width
    return total


def emit_dot(g: Genotype) -> str:
    """Render the cell DAG as a DOT digraph.

    Input slots are plain boxes, candidate ops orange, aggregations green,
    all labeled with their numeric ids; a final node marks the output
    concatenation.
    """
    graph = build_graph(g)
    lines = ["digraph cell {", "  rankdir=TB;"]
    for s in range(N_INPUT_SLOTS):
        lines.append(f'  in{s} [label="{s}: {SLOT_NAMES[s]}" shape=box];')

    def src_name(node: int) -> str:
        return f"in{node}" if node < N_INPUT_SLOTS else f"agg{node - N_INPUT_SLOTS}"

    for i, step in enumerate(g.steps):
        for slot, (src, op) in enumerate(((step.in1, step.op1),
                                          (step.in2, step.op2)), start=1):
            opn = f"op{i}_{slot}"
            lines.append(
                f'  {opn} [label="{op}" shape=box style=filled '
                f'fillcolor=orange];')
            lines.append(f"  {src_name(src)} -> {opn};")
            lines.append(f"  {opn} -> agg{i};")
        lines.append(
            f'  agg{i} [label="{step.agg}" shape=box style=filled '
            f'fillcolor=green];')
    lines.append('  output [label="concat" shape=box];')
    for node in graph.output_set:
        lines.append(f"  {src_name(node)} -> output;")
    lines.append("}")
    return "\n".join(lines) + "\n"
