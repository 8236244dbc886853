"""Toy-scale trainer for exported alignment datasets.

Runs supervised fine-tuning and preference optimization on a small
byte-level decoder defined in this package, driven by the dataset and
trainer-config files another tool exports. Emits per-sample score
records so the reported losses can be re-derived independently.
"""

from trainer_bridge.errors import BridgeConfigError, BridgeDataError, BridgeError

__all__ = ["BridgeError", "BridgeConfigError", "BridgeDataError"]
