"""Camera-based end-to-end parking: simulator, perception, policy and tooling."""

__version__ = "0.1.0"
