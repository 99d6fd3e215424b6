"""Multi-spectral object re-identification on a small numpy autodiff engine.

Three per-spectrum ViT encoders feed a cyclic token-permutation fusion and a
cross-spectrum token reconstruction module; see ``topreid.model.TopReID``.
"""

from .config import RunConfig
from .evaluation import EvalReport, compute_map_cmc, evaluate
from .model import ModelConfig, TopReID
from .train import train
from .vit import SPECTRA, EncoderConfig

__all__ = [
    "SPECTRA",
    "EncoderConfig",
    "EvalReport",
    "ModelConfig",
    "RunConfig",
    "TopReID",
    "compute_map_cmc",
    "evaluate",
    "train",
]
__version__ = "0.1.0"
