"""On-disk pools of trained models.

Layout: ``<root>/<world>/manifest.json`` plus one ``<seed>.ckpt`` per model.
A pool belongs to one configuration (problem digest, training config, world);
opening it under a different configuration is an error rather than a silent
reuse. Checkpoints are written to a temporary name and renamed, and the
manifest is rewritten the same way, so readers never see partial files.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from forgetbench import nn_core
from forgetbench.harness.problem import Problem
from forgetbench.seeding import derive_seed
from forgetbench.train import TrainConfig, train

log = logging.getLogger(__name__)

WORLDS = ("original", "retrained")
MANIFEST_VERSION = 1


class ConfigMismatchError(ValueError):
    pass


def pool_config_hash(problem: Problem, train_cfg: TrainConfig, world: str) -> str:
    payload = {"problem": problem.digest(), "train": dataclasses.asdict(train_cfg), "world": world}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def training_seed(world: str, seed: int) -> int:
    """Original and retrained models with the same pool seed get unrelated
    initializations and batch orders."""
    return derive_seed(seed, world)


def _train_one(problem: Problem, train_cfg: TrainConfig, world: str, seed: int, path: str) -> float:
    idx = problem.splits.train if world == "original" else problem.splits.retain
    start = time.perf_counter()
    params = train(problem.ds, idx, problem.arch, train_cfg, training_seed(world, seed))
    elapsed = time.perf_counter() - start
    nn_core.save_checkpoint(params, path)
    return elapsed


class ModelPoolStore:
    def __init__(self, root, workers: int = 1):
        self.root = Path(root)
        self.workers = max(1, int(workers))
        self.trainings = {w: 0 for w in WORLDS}
        self._lock = threading.Lock()

    def pool_dir(self, world: str) -> Path:
        if world not in WORLDS:
            raise ValueError(f"world must be one of {WORLDS}, got {world!r}")
        return self.root / world

    def read_manifest(self, world: str) -> dict | None:
        path = self.pool_dir(world) / "manifest.json"
        if not path.exists():
            return None
        return json.loads(path.read_text())

    def _write_manifest(self, world: str, manifest: dict) -> None:
        path = self.pool_dir(world) / "manifest.json"
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
        tmp.replace(path)

    def _open(self, world: str, config_hash: str) -> dict:
        manifest = self.read_manifest(world)
        if manifest is None:
            return {"version": MANIFEST_VERSION, "world": world, "config_hash": config_hash, "entries": {}}
        if manifest.get("config_hash") != config_hash:
            raise ConfigMismatchError(
                f"pool {self.pool_dir(world)} was built for a different configuration; use a fresh store directory"
            )
        return manifest

    def build_pool(self, world: str, seeds, problem: Problem, train_cfg: TrainConfig) -> list[dict]:
        """Make sure a checkpoint exists for every seed; train only the missing ones.

        Returns the manifest entries for ``seeds`` in order.
        """
        seeds = [int(s) for s in seeds]
        if len(set(seeds)) != len(seeds):
            raise ValueError("pool seeds must be distinct")
        config_hash = pool_config_hash(problem, train_cfg, world)
        pool = self.pool_dir(world)
        with self._lock:
            pool.mkdir(parents=True, exist_ok=True)
            manifest = self._open(world, config_hash)
            entries = manifest["entries"]
            missing = [s for s in seeds if str(s) not in entries or not (pool / entries[str(s)]["file"]).exists()]
            if missing:
                jobs = [(problem, train_cfg, world, s, str(pool / f"{s}.ckpt")) for s in missing]
                if self.workers > 1 and len(jobs) > 1:
                    with ProcessPoolExecutor(self.workers) as ex:
                        times = list(ex.map(_train_one, *zip(*jobs)))
                else:
                    times = [_train_one(*job) for job in jobs]
                for s, t in zip(missing, times):
                    entries[str(s)] = {"seed": s, "file": f"{s}.ckpt", "train_seconds": t}
                self.trainings[world] += len(missing)
                log.info("trained %d %s models", len(missing), world)
            self._write_manifest(world, manifest)
            return [dict(entries[str(s)]) for s in seeds]

    def load(self, world: str, seed: int) -> nn_core.ModelParams:
        return nn_core.load_checkpoint(self.pool_dir(world) / f"{int(seed)}.ckpt")

    def load_pool(self, world: str, seeds) -> list[nn_core.ModelParams]:
        return [self.load(world, s) for s in seeds]

    def manifest_count(self, world: str) -> int:
        manifest = self.read_manifest(world)
        return 0 if manifest is None else len(manifest["entries"])


def default_store_dir() -> Path:
    return Path(os.environ.get("FORGETBENCH_STORE", "forgetbench-store"))
