"""picnet: pluralistic image completion with dual reconstructive/generative
training paths, at a scale small enough to test every moving part."""

__version__ = "0.1.0"
