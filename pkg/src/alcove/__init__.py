"""alcove: active exploration and constrained grasping in confined spaces,
simulated at desk scale with a deterministic four-level benchmark."""

__version__ = "0.1.0"
