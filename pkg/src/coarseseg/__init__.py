"""Learning semantic segmentation from noisy positive and negative coarse annotations.

A segmentation network and a per-pixel confusion-matrix network are trained
jointly on coarse drawings: positive coarse masks over the object and negative
(complementary) strokes over the background, with a fixed zero-diagonal
transition matrix routing the complementary branch. Includes synthetic
coarse-annotation generation, training/evaluation harnesses, and a CLI.
"""

__version__ = "0.1.0"

IGNORE = 255  # sentinel in 8-bit label maps: pixel carries no annotation

from .datasets import (  # noqa: E402,F401
    CoarseMap,
    LabelSpace,
    SegDataset,
    SegSample,
    build_mnist_seg,
    load_dataset,
    save_dataset,
    split,
)
from .noise import (  # noqa: E402,F401
    NoiseLevel,
    coverage_ratio,
    fracture,
    synth_negative_coarse,
    synth_positive_coarse,
    thicken,
    thin,
)
from .model import (  # noqa: E402,F401
    ArchDescriptor,
    ModelParams,
    build_transition_matrix,
    cm_forward,
    complementary_prediction,
    noisy_prediction,
    seg_forward,
)
from .loss import (  # noqa: E402,F401
    LossBreakdown,
    LossConfig,
    grad_check,
    loss_comp,
    loss_final,
    loss_obj,
    masked_ce,
    trace_mean,
)
