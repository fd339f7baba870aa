"""Desk-scale motion-tracking training lab.

Adaptive clip sampling, mixture-of-experts tracking policies,
teacher-student training, dataset curation, and evaluation on a planar
articulated biped.
"""

__version__ = "0.1.0"
