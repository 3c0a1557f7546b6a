"""Progressive adaptive multimodal fusion for action quality score regression."""

__version__ = "0.1.0"

MODALITIES = ("rgb", "flow", "audio")
