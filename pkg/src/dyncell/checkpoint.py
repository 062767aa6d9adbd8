"""Versioned npz checkpoints for nets, cells, and the controller.

Parameter arrays are stored in construction order, which is deterministic
for every model here, so save -> rebuild -> load round-trips bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

VERSION = 1


class CheckpointError(ValueError):
    pass


def params_checksum(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.data.tobytes())
    return h.hexdigest()


def save_arrays(path: Path, kind: str, arrays: list[np.ndarray], meta: dict):
    payload = {f"arr_{i:04d}": a for i, a in enumerate(arrays)}
    header = json.dumps({"version": VERSION, "kind": kind, "meta": meta},
                        sort_keys=True)
    payload["header"] = np.frombuffer(header.encode(), dtype=np.uint8)
    np.savez(Path(path), **payload)


def load_arrays(path: Path, expect_kind: str):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("version") != VERSION:
            raise CheckpointError(
                f"{path}: unsupported version {header.get('version')}")
        if header.get("kind") != expect_kind:
            raise CheckpointError(
                f"{path}: kind {header.get('kind')!r} != {expect_kind!r}")
        names = sorted(k for k in z.files if k.startswith("arr_"))
        arrays = [z[k] for k in names]
    return arrays, header["meta"]


def copy_into(params, arrays):
    if len(params) != len(arrays):
        raise CheckpointError(
            f"parameter count mismatch: {len(params)} vs {len(arrays)}")
    for p, a in zip(params, arrays):
        if p.data.shape != a.shape:
            raise CheckpointError(
                f"shape mismatch: {p.data.shape} vs {a.shape}")
        p.data = a.astype(np.float64).copy()


def checkpoint_kind(path: Path) -> str:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
    return header.get("kind", "")


# -- model-specific wrappers -------------------------------------------------

def save_static_net(path: Path, net):
    save_arrays(path, "static", [p.data for p in net.parameters()],
                {"n_classes": net.n_classes, "dec_width": net.dec_width,
                 "widths": list(net.widths)})


def load_static_net(path: Path):
    from .network import StaticNet
    arrays, meta = load_arrays(path, "static")
    net = StaticNet(np.random.default_rng(0), int(meta["n_classes"]),
                    dec_width=int(meta["dec_width"]),
                    widths=tuple(meta["widths"]))
    copy_into(net.parameters(), arrays)
    return net


def _cell_meta(cell) -> dict:
    from .genotype import encode
    return {"tokens": encode(cell.genotype), "depth": cell.genotype.depth,
            "cell_width": cell.cell_width, "dec_width": cell.dec_width,
            "input_channels": list(cell.input_channels)}


def _build_cell(meta):
    from .genotype import decode
    from .network import Cell
    genotype = decode(meta["tokens"], int(meta["depth"]))
    return Cell(genotype, np.random.default_rng(0), int(meta["cell_width"]),
                int(meta["dec_width"]), list(meta["input_channels"]))


def save_cell(path: Path, cell, classifier):
    arrays = [p.data for p in cell.parameters()] + \
             [classifier.w.data, classifier.b.data]
    save_arrays(path, "cell", arrays, _cell_meta(cell))


def load_cell(path: Path):
    from .ops import Conv
    arrays, meta = load_arrays(path, "cell")
    cell = _build_cell(meta)
    n_cell = len(cell.parameters())
    copy_into(cell.parameters(), arrays[:n_cell])
    cw, cb = arrays[n_cell:]
    classifier = Conv(np.random.default_rng(0), cw.shape[1], cw.shape[0], k=1)
    copy_into(classifier.params, [cw, cb])
    return cell, classifier


def save_dynamic_net(path: Path, net, cell):
    arrays = [p.data for p in net.parameters()] + \
             [p.data for p in cell.parameters()]
    meta = {"static": {"n_classes": net.n_classes,
                       "dec_width": net.dec_width,
                       "widths": list(net.widths)},
            "cell": _cell_meta(cell)}
    save_arrays(path, "dynamic", arrays, meta)


def load_dynamic_net(path: Path):
    from .network import DynamicCellNet, StaticNet
    arrays, meta = load_arrays(path, "dynamic")
    sm = meta["static"]
    net = StaticNet(np.random.default_rng(0), int(sm["n_classes"]),
                    dec_width=int(sm["dec_width"]),
                    widths=tuple(sm["widths"]))
    cell = _build_cell(meta["cell"])
    n_static = len(net.parameters())
    copy_into(net.parameters(), arrays[:n_static])
    copy_into(cell.parameters(), arrays[n_static:])
    return DynamicCellNet(net, cell)
