"""Brain-age regression from minimally preprocessed 3D volumes.

A numpy/scipy implementation of a 3D residual CNN with its own reverse-mode
autodiff, NIfTI-1 reader, crop/resample preprocessing, one-cycle AdamW
training, k-fold cross-validation and per-group bias metrics. A synthetic
phantom generator stands in for real scans.
"""
from .errors import (ConfigError, ContainerError, GradientError, NiftiError, PhantomError, PreprocessError,
                     RawBrainError, ShapeError, SpecMismatchError, TrainingError)
from .evaluation import EvalReport, bias_report, cross_validate, kfold_split, mae, standardized_mae
from .manifest import Dataset, Manifest, load_dataset
from .models import ModelSpec, ModelState, build_ann, build_resnet3d, count_parameters, forward, init_state, predict
from .nifti import Volume, read_nifti, write_nifti
from .phantom import PhantomParams, generate_dataset, generate_phantom, shifted_domain
from .preprocess import RESOLUTIONS, minimal_preprocess, resample_trilinear
from .tensor import Tape, Tensor
from .training import (Checkpoint, TrainConfig, fine_tune, load_checkpoint, lr_find, one_cycle, save_checkpoint,
                       train)

__version__ = "0.1.0"
