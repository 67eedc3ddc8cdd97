"""Paranasal sinus label-map analysis.

Modules: ``nifti_io`` (NIfTI-1 read/write), ``schema`` (label codes),
``metrics`` (DSC / ASSD), ``features``, ``scoring`` (modified Lund-Mackay),
``augment``, ``phantom`` (synthetic ground truth) and ``cohort`` / ``cli``.
"""

__version__ = "0.1.0"
