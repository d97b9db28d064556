"""perturblab: a desk-scale robustness laboratory.

Calibrated natural and adversarial perturbations, robust-training regimes,
and a seen/unseen/clean evaluation matrix over a small, fully deterministic
CNN stack.
"""

__version__ = "0.1.0"

from .attacks import AttackConfig, attack_drop, bim, pgd
from .calibrate import (CalibrationResult, CalibrationTarget,
                        calibrate_adversarial, calibrate_natural,
                        verify_calibration)
from .data import (DatasetBundle, DatasetSplit, batches, load_cifar10_binary,
                   load_dataset, load_idx, save_image, synth_blobs)
from .evaluate import (EvalRecord, MatrixReport, MatrixSettings,
                       delta_accuracy, emit_outputs, normalize_report,
                       run_matrix)
from .nn import (Architecture, ModelState, forward, init_model, load_model,
                 loss_softmax_xent, save_model, sgd_step)
from .perturb import (KINDS, PerturbationSpec, elastic, gaussian_blur,
                      gaussian_noise, intensity_to_params, occlude, perturb,
                      perturb_batch, saturate, wave)
from .rng import derive_seed, rng_for
from .training import (TrainConfig, TrainTrace, train, train_adversarial,
                       train_natural, train_standard)

__all__ = [name for name in dir() if not name.startswith("_")]
