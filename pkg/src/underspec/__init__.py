"""Training sets of models with locally independent, on-manifold input gradients."""

from .core import MlpParams, MlpSpec, forward, init_params, input_gradient, input_gradients, mlp_forward
from .datasets import Batch, DatasetBundle, GenConfig, gen_collages
from .errors import (BadMagic, ConfigError, DimensionMismatch, FileFormatError, NumericalError,
                     ShapeError, TruncatedFile, UnderspecError)
from .evaluate import EvalReport, evaluate_models, gradient_mi, spearman_grad_corr, underspec_report
from .losses import TUNED_WEIGHTS, LossBreakdown, LossWeights, batch_loss, indep_loss, manifold_loss, param_gradient
from .manifold import AeModel, ManifoldModel, PcaModel, estimate_intrinsic_dim, fit_pca, train_autoencoder
from .specialize import MaskSet, compute_masks, finetune, greedy_distill
from .training import ConvergenceLog, ModelSet, TrainConfig, train_models

__version__ = "0.1.0"
