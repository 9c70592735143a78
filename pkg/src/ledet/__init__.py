"""Label-efficient detection: semi-supervised few-shot object detection."""

__version__ = "0.1.0"
