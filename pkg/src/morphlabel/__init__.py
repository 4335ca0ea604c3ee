"""Gaussian pseudo-labels, morphological attention, and a desk-scale
training harness for elliptical structure segmentation."""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    ConicCoeffs,
    EllipseParams,
    conic_to_ellipse,
    ellipse_to_conic,
    extract_boundary,
    fit_ellipse_direct,
    fit_mask_ellipse,
    rasterize_ellipse,
)
from .pseudolabel import (  # noqa: F401
    build_pyramid,
    gaussianize,
    generate_pseudo_label,
    heatmap_from_params,
    rotate_coordinate_grids,
)
from .losses import (  # noqa: F401
    LossBreakdown,
    bce_loss,
    composite_loss,
    dice_loss,
    linf_loss,
    supervision_weights,
)
from .network import MASegNet, ModelConfig, build_model, infer, ma_block  # noqa: F401
from .metrics import dsc, hausdorff, sensitivity  # noqa: F401
from .phantoms import Phantom, gen_phantom, gen_volume, kfold_split  # noqa: F401
from .training import TrainConfig, TrainLog, train  # noqa: F401
