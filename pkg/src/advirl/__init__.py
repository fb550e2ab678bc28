"""Black-box adversarial attacks on voxel radiance fields driven by PPO."""

__version__ = "0.1.0"
