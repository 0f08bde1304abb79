"""Reference world/model construction with on-disk caching.

The reference checkpoint backs every statistical test and demo; training it
takes a few minutes once, after which the cached container is reused.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .fileio import load_tensors, save_tensors, write_csv
from .net import EpsilonNet
from .schedule import make_schedule
from .training import TrainConfig, train
from .world import World, WorldConfig

REFERENCE_TRAIN = TrainConfig(epochs=120, batches_per_epoch=100, batch=16,
                              lr=0.15, seed=0)
REFERENCE_CLASSIFIER = dict(steps=3000, batch=32, lr=1.0, seed=0)
REFERENCE_WORLD = WorldConfig()


def default_cache_dir() -> Path:
    env = os.environ.get("ATTNEDIT_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "attnedit"


def load_or_train_world(cache_dir: Path | None = None) -> World:
    """Reference world with a trained classifier, cached on disk."""
    cache_dir = Path(cache_dir) if cache_dir else default_cache_dir()
    path = cache_dir / "classifier.ckpt"
    world = World(REFERENCE_WORLD)
    if path.exists():
        from .world import EventClassifier

        clf = EventClassifier(world.config)
        clf.params = {k: np.asarray(v, dtype=clf.dtype)
                      for k, v in load_tensors(path).items()}
        clf.fitted = True
        world.classifier = clf
    else:
        world.fit_classifier(**REFERENCE_CLASSIFIER)
        save_tensors(path, world.classifier.params)
    return world


def load_or_train_reference(cache_dir: Path | None = None):
    """Returns (world, net, schedule); trains and caches on first use."""
    cache_dir = Path(cache_dir) if cache_dir else default_cache_dir()
    world = load_or_train_world(cache_dir)
    sched = make_schedule()
    net = EpsilonNet(freq_bins=world.config.freq_bins, frames=world.config.frames,
                     text_dim=world.config.embed_dim, seed=0)
    path = cache_dir / "reference.ckpt"
    if path.exists():
        tensors = load_tensors(path)
        net.params = {k: np.asarray(v, dtype=net.dtype) for k, v in tensors.items()}
    else:
        curve = train(net, world, sched, REFERENCE_TRAIN)
        save_tensors(path, net.params)
        write_csv(cache_dir / "reference_loss.csv", ("step", "loss"), curve)
    return world, net, sched
