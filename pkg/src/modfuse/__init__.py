"""modfuse: asynchronous multimodal sequence fusion with representation decoupling."""

__version__ = "0.1.0"
