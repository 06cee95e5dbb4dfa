"""Motion-robust quantitative cardiac T1 mapping toolkit."""

__version__ = "0.1.0"

from .curvefit import FitResult, fit_map, fit_pixel, r_squared
from .field import DisplacementField, VelocityField, integrate_svf, warp_image
from .imaging import Frame, Grid2D, Mask, Series, load_series, normalize_minmax
from .mocor import CaseResult, MocorConfig, run_mocor
from .phantom import PhantomSpec, make_phantom
from .signal import MolliParams, StoneParams, molli_correct, molli_signal, stone_signal

__all__ = [
    "__version__",
    "CaseResult",
    "DisplacementField",
    "FitResult",
    "Frame",
    "Grid2D",
    "Mask",
    "MocorConfig",
    "MolliParams",
    "PhantomSpec",
    "Series",
    "StoneParams",
    "VelocityField",
    "fit_map",
    "fit_pixel",
    "integrate_svf",
    "load_series",
    "make_phantom",
    "molli_correct",
    "molli_signal",
    "normalize_minmax",
    "r_squared",
    "run_mocor",
    "stone_signal",
    "warp_image",
]
