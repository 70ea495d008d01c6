"""Cross-attention LiDAR + camera feature alignment at desk scale, on numpy."""

__version__ = "0.1.0"
