"""Ledger simulator: synthetic chains, a shift service and planted ground truth."""

from .backend import SimServiceBackend
from .builder import Trade, World, WorldBuilder, generate_world, plant_pattern
from .config import BotSpec, HubSpec, Plants, WorldConfig, acceptance_plants, small_plants
from .writer import write_world

__all__ = [
    "BotSpec",
    "HubSpec",
    "Plants",
    "SimServiceBackend",
    "Trade",
    "World",
    "WorldBuilder",
    "WorldConfig",
    "acceptance_plants",
    "generate_world",
    "plant_pattern",
    "small_plants",
    "write_world",
]
