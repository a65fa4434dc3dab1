"""Channel pruning with batch whitening and probabilistic channel masks, in numpy."""
from .analysis import analyze_probabilities, correlation_score
from .config import ExperimentConfig, load_config
from .export import export_pruned, fold_whitening
from .layer import BWCPLayer, activation_probability, bw_backward, bw_forward, prop3_delta
from .linalg import newton_schulz_root_inverse, normalized_covariance
from .network import Model, build_model, count_flops_params, residual_mask_combine
from .sampler import gumbel_softmax_mask, inference_mask, ste_mask
from .trainer import grad_check, sparse_loss, train_step

__version__ = "0.1.0"
