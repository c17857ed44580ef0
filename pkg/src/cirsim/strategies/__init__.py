"""Strategy registry.

Names accepted by :func:`build_strategy`: ``naive``, ``ewc``, ``lwf``,
``joint``, ``hatcir``, ``horde``, ``dwgrnet``, ``er200``, ``er2000`` and the
parameterized replay form ``er<capacity>`` (``er`` alone means 200).
"""

from __future__ import annotations

import re
from dataclasses import fields

from ..nn_core import TrainConfig
from .base import ExperienceAccessError, ExperienceView, NetSpec, Strategy
from .baselines import Ewc, Joint, Lwf, Naive, Replay
from .dwgrnet import DwgrConfig, DwgrNet
from .hatcir import HatCir, HatCirConfig
from .horde import Horde, HordeConfig

STRATEGY_NAMES = ("naive", "er200", "er2000", "ewc", "lwf", "joint", "hatcir", "horde", "dwgrnet")

__all__ = [
    "STRATEGY_NAMES",
    "ExperienceAccessError",
    "ExperienceView",
    "NetSpec",
    "Strategy",
    "build_strategy",
]


def _coerce(cls, options: dict) -> object:
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in options.items():
        if key not in known:
            raise ValueError(f"unknown {cls.__name__} option {key!r}")
        kwargs[key] = value
    return cls(**kwargs)


def build_strategy(
    name: str,
    n_classes: int,
    input_dim: int,
    train: TrainConfig | None = None,
    options: dict | None = None,
    seed: int = 0,
    n_experiences: int | None = None,
    net_spec: NetSpec | None = None,
) -> Strategy:
    train = train or TrainConfig()
    net_spec = net_spec or NetSpec()
    options = dict(options or {})
    common = dict(n_classes=n_classes, input_dim=input_dim, train=train, net_spec=net_spec, seed=seed)
    if name == "naive":
        return Naive(**common)
    if name == "joint":
        return Joint(**common)
    if name == "ewc":
        return Ewc(**common, ewc_lambda=float(options.get("ewc_lambda", 1.0)))
    if name == "lwf":
        return Lwf(**common, alpha=float(options.get("alpha", 1.0)), temperature=float(options.get("temperature", 2.0)))
    match = re.fullmatch(r"er(\d*)", name)
    if match:
        capacity = int(match.group(1) or options.get("capacity", 200))
        replay_batch = options.get("replay_batch_size")
        return Replay(**common, capacity=capacity, replay_batch_size=int(replay_batch) if replay_batch else None)
    if name == "hatcir":
        return HatCir(**common, config=_coerce(HatCirConfig, options), n_experiences=n_experiences)
    if name == "horde":
        return Horde(**common, config=_coerce(HordeConfig, options))
    if name == "dwgrnet":
        return DwgrNet(**common, config=_coerce(DwgrConfig, options))
    raise ValueError(f"unknown strategy {name!r}")
