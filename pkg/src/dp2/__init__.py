"""Differentially private adaptive optimization with delayed preconditioners."""

from .data import (RatingDataset, SparseDataset, SynthSpec, gen_synthetic,
                   gen_synthetic_ratings, load_ratings, load_sparse, sample_batch)
from .diagnostics import HsEstimate, hs_update, lemma1_check, snapshot_preconditioner
from .harness import RunConfig, load_config, run_sweep, run_train
from .models import (LogReg, MatFac, ModelParams, MultiLabel, RatingTriple, SparseExample,
                     batch_eval, init_params, per_example_grad, per_example_loss)
from .optimizers import (AdaptiveState, DpSquaredState, LrSchedule, Method, UpdateRule,
                         ablation_variant1_step, ablation_variant2_step,
                         bias_corrected_moment, dp2_step, dp_adaptive_step, dp_sgd_step)
from .privacy import (PrivacyConfig, PrivacyLedger, calibrate_sigma, clip, compute_epsilon,
                      epsilon_for, gaussian_mechanism, ledger_step)

__version__ = "0.1.0"
