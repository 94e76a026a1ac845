"""High-order paired-pyramid semantic segmentation on plain numpy.

The package stacks four layers of machinery:

    tensor       float64 autodiff arrays and the conv/BN/pool/resize ops
    highorder    rank-decomposed polynomial feature modules
    backbone     dilated residual feature extractor (output stride 8)
    paired_aspp  atrous pyramid whose branches read early/late stage pairs

plus the surrounding pipeline: synthetic datasets with controlled texture
statistics (data), training/inference (pipeline), metrics, checkpoints
(serialize), run configuration (config), and a command line (cli).
"""

from .backbone import (
    Backbone,
    BackboneConfig,
    StageMetadata,
    backbone_config,
    fold_receptive_field,
    stage_metadata,
    stage_shapes,
)
from .config import ConfigError, load_config_file, load_dataset_spec
from .data import (
    IGNORE_LABEL,
    GenerationError,
    SegSample,
    SyntheticSpec,
    builtin_spec,
    gen_synthetic,
    load_dataset,
    read_pgm,
    read_ppm,
    write_pgm,
    write_ppm,
)
from .highorder import HrParams, hr_forward, hr_params, hr_predictor_check, hr_project
from .metrics import ConfusionMatrix, miou
from .model import ModelConfig, SegModel, load_model, model_forward
from .paired_aspp import (
    BranchCoverage,
    PairedAspp,
    PairedAsppConfig,
    ScaleCoverage,
    branch_specs,
    pair,
    scale_coverage,
)
from .pipeline import (
    SGD,
    DegenerateBatchError,
    InferConfig,
    TrainConfig,
    augment,
    cross_entropy_loss,
    evaluate,
    infer_multiscale,
    poly_lr,
    predict,
    sgd_step,
    softmax_probs,
    train_model,
)
from .serialize import load_checkpoint, read_tensor, save_checkpoint, write_tensor
from .tensor import (
    BatchNormParams,
    Conv2dParams,
    Tensor,
    add,
    backward,
    batch_norm,
    bilinear_resize,
    bn_params,
    concat_channels,
    conv2d,
    conv_output_size,
    conv_params,
    eltwise_mul,
    global_avg_pool,
    max_pool,
    mean_all,
    no_grad,
    relu,
    same_padding,
    sum_all,
)

__version__ = "0.1.0"
