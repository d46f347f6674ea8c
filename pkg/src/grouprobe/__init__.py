"""Influence, one-step Newton, and retraining effects of removing groups of training points."""

from .data_io import (DataFormatError, Dataset, TestPoint, load_dense_csv, load_sparse,
                      synth_gaussian_binary, synth_test_points, write_dense_csv)
from .model import ConvergenceError, LossKind, TrainedModel, hessian, point_grad, point_hess, train
from .influence import (EffectRecord, EvalFunction, EvalKind, SubsetWeights, copies_of,
                        group_influence, interpolated_effect, param_influence_delta,
                        pointwise_influence, predicted_effect_via_params)
from .newton import (NewtonDiag, decompose_error, error_matrix_spectrum, newton_delta,
                     newton_diagnostics, newton_effect, single_point_scale)
from .retrain import actual_effect, batch_actual_effects, retrain_many
from .bounds import (BoundConstants, UndefinedStatistic, compute_constants, newton_error_bound,
                     selfloss_cone, spearman, underestimation_stats)

__version__ = "0.1.0"
