"""Source-free adaptation toolkit for oriented object detection.

Mean-teacher self-training over oriented boxes with zero-shot guided
pseudo-label refinement, a corruption-dataset generator, and rotated-box
PASCAL-VOC evaluation, runnable end to end with mock or file-backed model
backends.
"""

__version__ = "0.1.0"
