"""Group-dance motion generation at desk scale.

A diffusion denoiser that decouples the dancer dimension (distance-aware
graph convolutions rebuilt per frame) from the time dimension (differential
attention alternating with windowed linear attention), plus the synthetic
data, training, metric, and scaling-benchmark machinery around it.
"""

from .core import Parameter, ParameterStore, Tensor, matmul, relu, softmax_rows
from .data import MotionFile, Sample, SyntheticDataset, gen_synthetic, load_motion, make_dataset, save_motion
from .diffusion import LossWeights, NoiseSchedule, generate, loss, make_schedule, p_sample_step, q_sample
from .graph import build_adjacency, gcn_layer, normalize_adjacency, normalized_graphs, prune_topk
from .metrics import MetricReport, diversity, gmc_proxy, tif
from .model import Denoiser, DenoiserConfig, load_checkpoint, restore_denoiser, save_checkpoint
from .train import AdamState, TrainConfig, adam_step, grad_check, make_adam, run_all_checks, train_toy

__version__ = "0.1.0"
