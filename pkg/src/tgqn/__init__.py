"""Transformer-based generative query network on procedural toy rooms."""
from .config import ModelConfig, RunConfig
from .model import TGQN, OrderedContext, order_observations

__all__ = ["ModelConfig", "RunConfig", "TGQN", "OrderedContext", "order_observations"]
