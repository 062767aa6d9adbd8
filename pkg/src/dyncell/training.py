"""Training loops: static pre-training, cell training, end-to-end tuning.

During search the static net is frozen and its per-frame outputs are
precomputed once per split, so candidate training touches only cell
parameters and a private copy of the classifier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import params_checksum
from .data import Sequence
from .metrics import ConfusionMatrix, metrics_report
from .network import (Cell, DynamicCellNet, StaticNet, sequence_loss,
                      upsampled_loss)
from .ops import Conv
from .optim import Adam, SgdMomentum, poly_lr


@dataclass
class StaticTrainConfig:
    epochs: int = 60
    batch_size: int = 32
    encoder_lr: float = 5e-2
    decoder_lr: float = 1e-2
    momentum: float = 0.9
    poly_power: float = 0.9
    aux_weight: float = 0.3
    seed: int = 1


@dataclass
class CellTrainConfig:
    epochs: int = 8
    batch_size: int = 16
    lr: float = 8e-3
    seed: int = 2


@dataclass
class FinetuneConfig:
    pretrain_epochs: int = 10
    epochs: int = 20
    batch_size: int = 8
    cell_lr: float = 8e-3          # end-to-end phase runs at half this
    static_lr: float = 5e-4
    momentum: float = 0.9
    seed: int = 3


def _frame_stack(seqs: list[Sequence]):
    frames = np.concatenate([np.stack(s.frames) for s in seqs])
    labels = np.concatenate([np.stack(s.labels).astype(np.int64)
                             for s in seqs])
    return frames, labels


def pretrain_static(net: StaticNet, train: list[Sequence],
                    val: list[Sequence], cfg: StaticTrainConfig,
                    log=None, loss_hook=None) -> dict:
    """Poly-scheduled SGD on single frames with an auxiliary head at 0.3."""
    frames, labels = _frame_stack(train)
    n = frames.shape[0]
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    max_iter = cfg.epochs * steps_per_epoch
    enc = SgdMomentum(net.encoder_parameters(), cfg.encoder_lr, cfg.momentum)
    dec = SgdMomentum(net.decoder_parameters(), cfg.decoder_lr, cfg.momentum)
    it = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            bundle = net.forward(Tensor(frames[idx]))
            loss = upsampled_loss(bundle.pred, labels[idx])
            if cfg.aux_weight:
                aux = upsampled_loss(net.aux_logits(bundle), labels[idx])
                loss = ag.add(loss, ag.scale(aux, cfg.aux_weight))
            enc.zero_grad()
            dec.zero_grad()
            loss.backward()
            enc.lr = poly_lr(cfg.encoder_lr, it, max_iter, cfg.poly_power)
            dec.lr = poly_lr(cfg.decoder_lr, it, max_iter, cfg.poly_power)
            enc.step()
            dec.step()
            if loss_hook:
                loss_hook(loss.item())
            it += 1
        if log:
            log(f"static epoch {epoch + 1}/{cfg.epochs} loss {loss.item():.4f}")
    return evaluate_static(net, val)


def evaluate_static(net: StaticNet, seqs: list[Sequence]) -> dict:
    cm = ConfusionMatrix(net.n_classes)
    with ag.no_grad():
        for seq in seqs:
            for img, lab in zip(seq.frames, seq.labels):
                bundle = net.forward(Tensor(img[None]))
                h, w = lab.shape
                logits = ag.bilinear_resize(bundle.pred, h, w)
                cm.update(lab, np.argmax(logits.data[0], axis=0))
    return metrics_report(cm)


def majority_class_report(seqs: list[Sequence], n_classes: int) -> dict:
    """Reward of always predicting the most frequent label."""
    counts = np.zeros(n_classes, dtype=np.int64)
    for seq in seqs:
        for lab in seq.labels:
            counts += np.bincount(lab.ravel(), minlength=n_classes)
    major = int(np.argmax(counts))
    cm = ConfusionMatrix(n_classes)
    for seq in seqs:
        for lab in seq.labels:
            cm.update(lab, np.full_like(lab, major))
    return metrics_report(cm)


# ---------------------------------------------------------------------------
# frozen-static caching for candidate training
# ---------------------------------------------------------------------------

@dataclass
class CachedSequence:
    """Frozen per-frame tensors: encoder features per frame, frame-0 dec."""

    layer2: list[np.ndarray]
    layer3: list[np.ndarray]
    layer4: list[np.ndarray]
    dec0: np.ndarray
    labels: list[np.ndarray]


class BundleCache:
    """Precomputed static outputs keyed by split name + net checksum."""

    def __init__(self):
        self._store: dict[tuple[str, str], list[CachedSequence]] = {}

    def get(self, name: str, net: StaticNet,
            seqs: list[Sequence]) -> list[CachedSequence]:
        key = (name, params_checksum(net.parameters()))
        if key not in self._store:
            self._store[key] = [self._compute(net, s) for s in seqs]
        return self._store[key]

    @staticmethod
    def _compute(net: StaticNet, seq: Sequence) -> CachedSequence:
        l2s, l3s, l4s = [], [], []
        with ag.no_grad():
            for img in seq.frames:
                b = net.encode(Tensor(img[None]))
                l2s.append(b.layer2.data)
                l3s.append(b.layer3.data)
                l4s.append(b.layer4.data)
            first = net.forward(Tensor(seq.frames[0][None]))
        return CachedSequence(layer2=l2s, layer3=l3s, layer4=l4s,
                              dec0=first.dec.data,
                              labels=[l.astype(np.int64) for l in seq.labels])


def _cached_sequence_loss(cell: Cell, classifier: Conv,
                          batch: list[CachedSequence]):
    """Recurrent loss over cached static features for a batch of sequences."""
    t_len = len(batch[0].layer2)
    dec = Tensor(np.concatenate([c.dec0 for c in batch]))
    total = None
    for t in range(1, t_len):
        slots = [dec,
                 Tensor(np.concatenate([c.layer4[t - 1] for c in batch])),
                 Tensor(np.concatenate([c.layer2[t] for c in batch])),
                 Tensor(np.concatenate([c.layer3[t] for c in batch])),
                 Tensor(np.concatenate([c.layer4[t] for c in batch]))]
        dec = cell(slots)
        labels = np.stack([c.labels[t] for c in batch])
        term = upsampled_loss(classifier(dec), labels)
        total = term if total is None else ag.add(total, term)
    return total


def evaluate_cached(cell: Cell, classifier: Conv,
                    cached: list[CachedSequence], n_classes: int) -> dict:
    cm = ConfusionMatrix(n_classes)
    with ag.no_grad():
        for c in cached:
            dec = Tensor(c.dec0)
            for t in range(1, len(c.layer2)):
                dec = cell([dec, Tensor(c.layer4[t - 1]), Tensor(c.layer2[t]),
                            Tensor(c.layer3[t]), Tensor(c.layer4[t])])
                h, w = c.labels[t].shape
                logits = ag.bilinear_resize(classifier(dec), h, w)
                cm.update(c.labels[t], np.argmax(logits.data[0], axis=0))
    return metrics_report(cm)


def precompute_static(net: StaticNet, seqs: list[Sequence]):
    """Freeze a split: per-frame encoder features plus the frame-0 dec."""
    return [BundleCache._compute(net, s) for s in seqs]


class CellTrainer:
    """Adam training of one candidate cell over frozen static features."""

    def __init__(self, net: StaticNet, cell: Cell, meta_train, meta_val,
                 cfg: CellTrainConfig, classifier: Conv | None = None):
        self.net = net
        self.cell = cell
        self.cfg = cfg
        if meta_train and isinstance(meta_train[0], Sequence):
            meta_train = precompute_static(net, meta_train)
        if meta_val and isinstance(meta_val[0], Sequence):
            meta_val = precompute_static(net, meta_val)
        self.meta_train = meta_train
        self.meta_val = meta_val
        self.classifier = classifier or self._copy_classifier(net)
        self.opt = Adam(cell.parameters() + self.classifier.params, cfg.lr)
        self.rng = np.random.default_rng(cfg.seed)
        self.epochs_run = 0

    @staticmethod
    def _copy_classifier(net: StaticNet) -> Conv:
        c = Conv(np.random.default_rng(0), net.dec_width, net.n_classes, k=1)
        c.w.data = net.classifier.w.data.copy()
        c.b.data = net.classifier.b.data.copy()
        return c

    def train_epochs(self, n: int):
        bs = self.cfg.batch_size
        for _ in range(n):
            order = self.rng.permutation(len(self.meta_train))
            for start in range(0, len(order), bs):
                chunk = [self.meta_train[i] for i in order[start:start + bs]]
                loss = _cached_sequence_loss(self.cell, self.classifier, chunk)
                self.opt.zero_grad()
                loss.backward()
                self.opt.step()
            self.epochs_run += 1

    def evaluate(self) -> float:
        return evaluate_cached(self.cell, self.classifier, self.meta_val,
                               self.net.n_classes)["reward"]


def train_cell(net: StaticNet, cell: Cell, meta_train, meta_val,
               cfg: CellTrainConfig, stop_at_fraction: float = 1.0) -> float:
    """Train a candidate for ceil(epochs * fraction) epochs; return the
    meta-val reward. The static net stays untouched."""
    trainer = CellTrainer(net, cell, meta_train, meta_val, cfg)
    trainer.train_epochs(math.ceil(cfg.epochs * stop_at_fraction))
    return trainer.evaluate()


# ---------------------------------------------------------------------------
# end-to-end fine-tuning
# ---------------------------------------------------------------------------

def finetune_end_to_end(net: StaticNet, cell: Cell, train: list[Sequence],
                        val: list[Sequence], cfg: FinetuneConfig,
                        log=None) -> dict:
    """Joint tuning: Adam at half the cell rate, SGD-momentum for the rest."""
    dyn = DynamicCellNet(net, cell)
    cell_opt = Adam(cell.parameters(), cfg.cell_lr / 2.0)
    static_opt = SgdMomentum(net.parameters(), cfg.static_lr, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train[i] for i in order[start:start + cfg.batch_size]]
            frames = np.stack([np.stack(s.frames) for s in chunk])
            labels = [None] + [
                np.stack([s.labels[t] for s in chunk]).astype(np.int64)
                for t in range(1, frames.shape[1])]
            loss = sequence_loss(dyn, frames, labels)
            cell_opt.zero_grad()
            static_opt.zero_grad()
            loss.backward()
            cell_opt.step()
            static_opt.step()
        if log:
            log(f"finetune epoch {epoch + 1}/{cfg.epochs} "
                f"loss {loss.item():.4f}")
    return evaluate_dynamic(dyn, val)


def evaluate_dynamic(dyn: DynamicCellNet, seqs: list[Sequence]) -> dict:
    """Reward over frames after the first, the frames the cell predicts."""
    cm = ConfusionMatrix(dyn.static.n_classes)
    with ag.no_grad():
        for seq in seqs:
            prev = dyn.forward_first(Tensor(seq.frames[0][None]))
            for t in range(1, len(seq.frames)):
                prev = dyn.forward_next(prev, Tensor(seq.frames[t][None]))
                lab = seq.labels[t]
                logits = ag.bilinear_resize(prev.pred, *lab.shape)
                cm.update(lab, np.argmax(logits.data[0], axis=0))
    return metrics_report(cm)


def copy_forward_report(net: StaticNet, seqs: list[Sequence]) -> dict:
    """Baseline: frame-0 dec reused unchanged for every later frame."""
    cm = ConfusionMatrix(net.n_classes)
    with ag.no_grad():
        for seq in seqs:
            first = net.forward(Tensor(seq.frames[0][None]))
            pred = net.classifier(first.dec)
            for t in range(1, len(seq.frames)):
                lab = seq.labels[t]
                logits = ag.bilinear_resize(pred, *lab.shape)
                cm.update(lab, np.argmax(logits.data[0], axis=0))
    return metrics_report(cm)
