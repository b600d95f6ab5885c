"""Adversarial robustness of VAE encoders: models, attacks and metrics on a small numpy autodiff core."""
from .gaussmath import DiagGaussian, kl_diag, skl
from .models import (HierarchicalVae, TrainConfig, VaeModel, desk_hvae, desk_vae, elbo, elbo_gt_k,
                     h_elbo, h_encode, load_checkpoint, nll_importance, save_checkpoint, fullsize_vae, train)
from .attacks import (AttackConfig, AttackError, AttackResult, DegenerateEncoderError, attack_batch,
                      hierarchical_supervised_attack, run_attack, supervised_attack, unsupervised_attack)
from .metrics import MsssimConfig, elbo_gt_k_curve, evaluate_attacks, msssim, msssim_triple, omega

__version__ = "0.1.0"
