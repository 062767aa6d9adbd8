"""The candidate loop: sample, train to the halfway probe, early-stop or
finish, score on meta-val, feed the controller, log everything.

Run logs are append-only JSONL with a content digest over all record
fields except wall time, so same-seed runs produce identical digests.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .controller import Controller, PpoConfig, save_controller
from .genotype import SLOT_NAMES, decode
from .network import Cell, StaticNet
from .training import (BundleCache, CachedSequence, CellTrainer,
                       CellTrainConfig)


class SearchError(RuntimeError):
    pass


@dataclass
class SearchConfig:
    n_candidates: int = 60
    depth: int = 2
    cell_width: int = 16
    early_stop_fraction: float = 0.5
    cell_train: CellTrainConfig = field(default_factory=CellTrainConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    seed: int = 10


@dataclass
class SearchRecord:
    index: int
    tokens: list[int]
    status: str                    # "completed" | "early_stopped"
    halfway_reward: float
    final_reward: float | None
    wall_time: float
    seed: int

    @property
    def reward(self) -> float:
        return self.final_reward if self.final_reward is not None \
            else self.halfway_reward

    def digest_fields(self) -> dict:
        d = asdict(self)
        d.pop("wall_time")
        return d


@dataclass
class RunLog:
    config: dict
    records: list[SearchRecord] = field(default_factory=list)

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(json.dumps(r.digest_fields(), sort_keys=True).encode())
            h.update(b"\n")
        return h.hexdigest()

    def save(self, path: Path):
        with open(path, "w") as f:
            f.write(json.dumps({"kind": "runlog", "version": 1,
                                "slot_names": list(SLOT_NAMES),
                                "config": self.config}, sort_keys=True) + "\n")
            for r in self.records:
                f.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @staticmethod
    def load(path: Path) -> "RunLog":
        path = Path(path)
        if not path.exists():
            raise SearchError(f"run log not found: {path}")
        with open(path) as f:
            header = json.loads(f.readline())
            if header.get("kind") != "runlog":
                raise SearchError(f"{path}: not a run log")
            records = [SearchRecord(**json.loads(line))
                       for line in f if line.strip()]
        return RunLog(config=header["config"], records=records)


def early_stop_decision(halfway_reward: float, history: list[float]) -> bool:
    """Stop when the probe falls below the mean of all previous probes."""
    if not history:
        return False
    return halfway_reward < float(np.mean(history))


def select_top_k(log: RunLog, k: int) -> list[list[int]]:
    completed = [r for r in log.records if r.status == "completed"]
    if len(completed) < k:
        raise SearchError(
            f"only {len(completed)} completed candidates, need {k}")
    ranked = sorted(completed, key=lambda r: (-r.final_reward, r.index))
    return [r.tokens for r in ranked[:k]]


def _slot_channels(net: StaticNet) -> list[int]:
    w1, w2, w3 = net.widths
    return [net.dec_width, w3, w1, w2, w3]


def run_search(net: StaticNet, meta_train, meta_val, cfg: SearchConfig,
               out_dir: Path | None = None, log=None) -> RunLog:
    """Full controller-driven search over frozen static features."""
    cache = BundleCache()
    cached_train = cache.get("meta_train", net, meta_train) \
        if meta_train and not isinstance(meta_train[0], CachedSequence) \
        else meta_train
    cached_val = cache.get("meta_val", net, meta_val) \
        if meta_val and not isinstance(meta_val[0], CachedSequence) \
        else meta_val

    controller = Controller(cfg.depth, seed=cfg.seed)
    sample_rng = np.random.default_rng(cfg.seed + 1)
    epochs = cfg.cell_train.epochs
    half = math.ceil(epochs * cfg.early_stop_fraction)
    runlog = RunLog(config={"search": _config_dict(cfg)})
    history: list[float] = []
    batch = []
    for index in range(cfg.n_candidates):
        t0 = time.time()
        trace = controller.sample(sample_rng)
        genotype = decode(trace.tokens, cfg.depth)
        cand_seed = cfg.seed * 100_000 + index
        cell = Cell(genotype, np.random.default_rng(cand_seed),
                    cfg.cell_width, net.dec_width, _slot_channels(net))
        tcfg = CellTrainConfig(epochs=epochs,
                               batch_size=cfg.cell_train.batch_size,
                               lr=cfg.cell_train.lr, seed=cand_seed)
        trainer = CellTrainer(net, cell, cached_train, cached_val, tcfg)
        trainer.train_epochs(half)
        halfway = trainer.evaluate()
        stop = early_stop_decision(halfway, history)
        history.append(halfway)
        if stop:
            record = SearchRecord(index=index, tokens=trace.tokens,
                                  status="early_stopped",
                                  halfway_reward=halfway, final_reward=None,
                                  wall_time=time.time() - t0, seed=cand_seed)
            trace.reward = halfway
        else:
            trainer.train_epochs(epochs - half)
            final = trainer.evaluate()
            record = SearchRecord(index=index, tokens=trace.tokens,
                                  status="completed", halfway_reward=halfway,
                                  final_reward=final,
                                  wall_time=time.time() - t0, seed=cand_seed)
            trace.reward = final
        runlog.records.append(record)
        batch.append(trace)
        if len(batch) == cfg.ppo.batch_size:
            controller.ppo_update(batch, cfg.ppo)
            batch = []
        if log:
            log(f"candidate {index + 1}/{cfg.n_candidates} "
                f"{record.status} reward {record.reward:.4f}")
    if batch:
        controller.ppo_update(batch, cfg.ppo)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        runlog.save(out_dir / "runlog.jsonl")
        save_controller(out_dir / "controller.npz", controller)
    return runlog


def _config_dict(cfg: SearchConfig) -> dict:
    d = asdict(cfg)
    return d
