"""slideqc: quality-control toolkit for whole-slide images.

Synthesizes grid-annotated training collages from a patch-class oracle,
trains compact segmentation networks for tissue/blur/fold/pen detection,
runs tile-and-stitch slide inference, and evaluates mask agreement against
an external QC tool with a blind human review workflow.
"""

__version__ = "0.1.0"
