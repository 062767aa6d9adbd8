"""Per-frame segmentation network, assembled cells, and the video forward.

The static net is a small encoder-decoder: three encoder stages at strides
8/16/32 feed a decoder that fuses them at stride 8 into ``dec`` and a 1x1
classifier. A dynamic net runs the full static net on frame 0 only; later
frames run the encoder plus a cell that merges previous-frame state
(``dec``, ``layer4``) with current-frame features into the new ``dec``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .genotype import Genotype, N_INPUT_SLOTS, build_graph
from .ops import AggregationOp, Block, CandidateOp, Conv, Harmonizer


@dataclass
class FrameBundle:
    layer2: Tensor
    layer3: Tensor
    layer4: Tensor
    dec: Tensor | None = None
    pred: Tensor | None = None


class StaticNet(Block):
    """Toy encoder-decoder honoring the stride-8/16/32 feature contract."""

    def __init__(self, rng: np.random.Generator, n_classes: int,
                 dec_width: int = 16, widths: tuple[int, int, int] = (16, 24, 32)):
        super().__init__()
        self.n_classes = n_classes
        self.dec_width = dec_width
        self.widths = tuple(widths)
        w1, w2, w3 = widths
        self.stage1 = [Conv(rng, 3, w1, k=3, stride=2),
                       Conv(rng, w1, w1, k=3, stride=2),
                       Conv(rng, w1, w1, k=3, stride=2)]
        self.stage2 = [Conv(rng, w1, w2, k=3, stride=2),
                       Conv(rng, w2, w2, k=3)]
        self.stage3 = [Conv(rng, w2, w3, k=3, stride=2),
                       Conv(rng, w3, w3, k=3)]
        self.harmonizers = [Harmonizer(rng, w, dec_width) for w in widths]
        self.fuse1 = Conv(rng, 3 * dec_width, dec_width, k=3)
        self.fuse2 = Conv(rng, dec_width, dec_width, k=3)
        self.classifier = Conv(rng, dec_width, n_classes, k=1)
        self.aux_head = Conv(rng, w2, n_classes, k=1)
        for block in self._blocks():
            self.params.extend(block.params)

    def _blocks(self):
        return (self.stage1 + self.stage2 + self.stage3 + self.harmonizers
                + [self.fuse1, self.fuse2, self.classifier, self.aux_head])

    def encoder_parameters(self):
        out = []
        for block in self.stage1 + self.stage2 + self.stage3:
            out.extend(block.params)
        return out

    def decoder_parameters(self):
        out = []
        for block in self.harmonizers + [self.fuse1, self.fuse2,
                                         self.classifier, self.aux_head]:
            out.extend(block.params)
        return out

    def encode(self, frame: Tensor) -> FrameBundle:
        if frame.ndim != 4 or frame.shape[1] != 3:
            raise ShapeError(f"encode: expected (N,3,H,W), got {frame.shape}")
        if frame.shape[2] % 32 or frame.shape[3] % 32:
            raise ShapeError(
                f"encode: H,W {frame.shape[2:]}, must be divisible by 32")
        x = frame
        for conv in self.stage1:
            x = ag.relu(conv(x))
        layer2 = x
        for conv in self.stage2:
            x = ag.relu(conv(x))
        layer3 = x
        for conv in self.stage3:
            x = ag.relu(conv(x))
        return FrameBundle(layer2=layer2, layer3=layer3, layer4=x)

    def decode_features(self, bundle: FrameBundle) -> Tensor:
        h, w = bundle.layer2.shape[2:]
        parts = [harm(feat, h, w) for harm, feat in
                 zip(self.harmonizers,
                     (bundle.layer2, bundle.layer3, bundle.layer4))]
        x = ag.relu(self.fuse1(ag.concat_channels(parts)))
        return ag.relu(self.fuse2(x))

    def forward(self, frame: Tensor) -> FrameBundle:
        bundle = self.encode(frame)
        bundle.dec = self.decode_features(bundle)
        bundle.pred = self.classifier(bundle.dec)
        return bundle

    def aux_logits(self, bundle: FrameBundle) -> Tensor:
        return self.aux_head(bundle.layer3)


class Cell(Block):
    """An instantiated genotype: harmonize five slots, run the step DAG,
    concatenate unconsumed aggregates, project to the recurrent width."""

    def __init__(self, genotype: Genotype, rng: np.random.Generator,
                 cell_width: int, dec_width: int, input_channels: list[int]):
        super().__init__()
        if len(input_channels) != N_INPUT_SLOTS:
            raise ShapeError(
                f"cell needs {N_INPUT_SLOTS} input channel counts")
        self.genotype = genotype
        self.cell_width = cell_width
        self.dec_width = dec_width
        self.input_channels = list(input_channels)
        self.graph = build_graph(genotype)
        self.harmonizers = [Harmonizer(rng, ci, cell_width)
                            for ci in input_channels]
        self.step_blocks: list[tuple[CandidateOp, CandidateOp, AggregationOp]] = []
        for step in genotype.steps:
            self.step_blocks.append((
                CandidateOp(step.op1, cell_width, rng),
                CandidateOp(step.op2, cell_width, rng),
                AggregationOp(step.agg, cell_width, rng)))
        self.out_proj = Conv(rng, len(self.graph.output_set) * cell_width,
                             dec_width, k=1)
        for h in self.harmonizers:
            self.params.extend(h.params)
        for op1, op2, agg in self.step_blocks:
            self.params.extend(op1.params + op2.params + agg.params)
        self.params.extend(self.out_proj.params)

    def __call__(self, slots: list[Tensor]) -> Tensor:
        if len(slots) != N_INPUT_SLOTS:
            raise ShapeError(f"cell expects {N_INPUT_SLOTS} inputs, "
                             f"got {len(slots)}")
        h, w = slots[2].shape[2:]  # current-frame stride-8 feature size
        pool = [harm(x, h, w) for harm, x in zip(self.harmonizers, slots)]
        for step, (op1, op2, agg) in zip(self.genotype.steps, self.step_blocks):
            pool.append(agg(op1(pool[step.in1]), op2(pool[step.in2])))
        outputs = [pool[node] for node in self.graph.output_set]
        return self.out_proj(ag.concat_channels(outputs))


class DynamicCellNet:
    """Static net on frame 0, encoder + cell recurrence afterwards."""

    def __init__(self, static: StaticNet, cell: Cell,
                 classifier: Conv | None = None):
        self.static = static
        self.cell = cell
        self.classifier = classifier if classifier is not None \
            else static.classifier

    def forward_first(self, frame: Tensor) -> FrameBundle:
        return self.static.forward(frame)

    def forward_next(self, prev: FrameBundle, frame: Tensor) -> FrameBundle:
        if prev.dec is None or prev.layer4 is None:
            raise ShapeError("previous bundle is missing dec or layer4")
        bundle = self.static.encode(frame)
        bundle.dec = self.cell([prev.dec, prev.layer4, bundle.layer2,
                                bundle.layer3, bundle.layer4])
        bundle.pred = self.classifier(bundle.dec)
        return bundle

    def parameters(self):
        params = self.static.parameters() + self.cell.parameters()
        if self.classifier is not self.static.classifier:
            params += self.classifier.params
        return params


def upsampled_loss(pred: Tensor, labels: np.ndarray) -> Tensor:
    """Cross-entropy after resizing logits to the label resolution."""
    h, w = labels.shape[-2:]
    return ag.softmax_cross_entropy(ag.bilinear_resize(pred, h, w), labels)


def sequence_loss(net: DynamicCellNet, frames: np.ndarray,
                  labels) -> Tensor:
    """Sum of per-frame losses for frames after the first.

    ``frames`` is (T,3,H,W) or (B,T,3,H,W); ``labels`` matches with one map
    per frame (entry 0 may be None; later Nones are an error).
    """
    if frames.ndim == 4:
        frames = frames[None]
        labels = [None if l is None else np.asarray(l)[None] for l in labels]
    total = None
    prev = net.forward_first(Tensor(frames[:, 0]))
    for t in range(1, frames.shape[1]):
        if labels[t] is None:
            raise ShapeError(f"frame {t} has no labels")
        prev = net.forward_next(prev, Tensor(frames[:, t]))
        term = upsampled_loss(prev.pred, labels[t])
        total = term if total is None else ag.add(total, term)
    return total
