"""Analysis toolkit for whole-body CT segmentations: NIfTI I/O, resampling,
label handling, Dice/NSD evaluation, nonparametric statistics and
volume/attenuation morphometry."""

__version__ = "0.1.0"
