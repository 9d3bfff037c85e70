"""Python bindings for the lbi world-model pipeline."""

import torch as _torch  # load libtorch symbols before the extension  # noqa: F401

from ._core import (  # noqa: F401
    BattleEnv,
    EnvState,
    Scenario,
    collect,
    describe_terminal,
    render,
)

__all__ = [
    "BattleEnv",
    "EnvState",
    "Scenario",
    "collect",
    "describe_terminal",
    "render",
]
