"""Coverage-based gaze loss for imitation learning, on a small numpy autodiff core."""

__version__ = "0.1.0"
GZT_FORMAT_VERSION = "GZT1"
