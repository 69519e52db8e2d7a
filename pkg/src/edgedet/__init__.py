"""edgedet: build, compress, footprint-plan and evaluate a small detector
for microcontroller-class deployment, entirely on the desk."""

__version__ = "0.1.0"
