"""Two-stage tiled object detection for high-resolution frame streams.

A coarse attention pass over a rough crop grid selects the active cells of a
finer grid; only those are evaluated at full detail, and the results are
fused by NMS and cross-border merging. Crop evaluation can be distributed
over TCP worker processes with the next frame's attention precomputed
concurrently.
"""

__version__ = "0.1.0"
