"""Reward-uncertainty estimation and adversarial policy optimization in a synthetic gold-reward world."""
from .advpo import (AdvpoConfig, PessimisticAdjustment, adjusted_reward, build_adjustment, compute_g,
                    dynamic_rescale, inner_min_value, lambda_star, oracle_inner_min, pessimism_gap,
                    samplewise_adjusted_reward)
from .exceptions import *  # noqa: F401,F403
from .linalg import SpdMatrix, cholesky, quad_form_inv, rank1_update, solve_spd
from .policy import PolicyState, RunMetrics, TrainConfig, kl_divergence, objective, policy_gradient, train
from .reward_model import (BradleyTerryRewardModel, EnsembleHeads, RewardEnsembleModel, RewardHead,
                           bt_grad, bt_loss, ensemble_reward, fit_bt, fit_ensemble)
from .synthworld import PreferenceDataset, SyntheticWorld, WorldConfig, gen_preferences, gen_world, gold_reward
from .uncertainty import (ConfidenceEllipsoidUncertainty, GaussianProcessUncertainty, PrecisionState,
                          build_precision, ci_uncertainty, correlation_report, gp_fit, gp_predict)

__version__ = "0.1.0"
