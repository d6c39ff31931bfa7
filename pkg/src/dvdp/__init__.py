"""Diffusion over a cascade of shrinking subspaces with per-component attenuation."""

from .cascade import EXPLICIT, IMPLICIT, LatentState, SubspaceCascade, build_cascade
from .denoiser import AnalyticDenoiser, ZeroDenoiser, analytic_epsilon, loss_term
from .mixture import GaussianMixture
from .mlp import MlpDenoiser, TrainConfig, grad_check, train
from .process import forward_trajectory, marginal_sample, posterior, transition_sample
from .sampler import SamplerConfig, ddim_sample, sample
from .schedule import DvdpSchedule, build_schedule, schedule_for, subspace_mode

__version__ = "0.1.0"
