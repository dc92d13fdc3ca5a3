"""Autoregressive generation of traffic scenes on HD maps."""
from .scene import (Actor, ActorClass, Centerline, HDMap, LaneSegment, OrientedBox, Scene, SDVState,
                    canonical_order)

__all__ = ["Actor", "ActorClass", "Centerline", "HDMap", "LaneSegment", "OrientedBox", "Scene", "SDVState",
           "canonical_order"]
__version__ = "0.1.0"
