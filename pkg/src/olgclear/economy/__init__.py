"""Household blocks of the single- and multi-asset economies."""
from __future__ import annotations

from types import ModuleType


def model_for(cfg) -> ModuleType:
    """Module implementing the economy that ``cfg`` configures."""
    from . import multi, single
    if isinstance(cfg, multi.MultiAssetConfig):
        return multi
    if isinstance(cfg, single.SingleAssetConfig):
        return single
    raise TypeError(f"not an economy config: {type(cfg).__name__}")
