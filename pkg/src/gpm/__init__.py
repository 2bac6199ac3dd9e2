"""Global proxy-based hard mining for metric learning, at desk scale.

A small two-branch network (encoder + proxy head) is trained with pair or
triplet losses.  Per-place proxies from the compact head are cached in a
memory bank and indexed once per epoch to assemble mini-batches of mutually
similar places.
"""

from gpm.numerics import (
    DegenerateInputError,
    ParamTensor,
    SgdConfig,
    finite_diff_check,
    l2_normalize,
    matmul,
    sgd_step,
)
from gpm.model import EncoderConfig, Model
from gpm.losses import LossConfig, compute_loss, pairwise_similarity
from gpm.sampler import MemoryBank, BatchPlan, SamplerConfig, Sampler, build_batch_plan, knn_search
from gpm.dataset import GeneratorConfig, PlaceDataset, generate, make_eval_split
from gpm.evaluation import recall_at_k, cost_report
from gpm.training import RunConfig, train

__all__ = [
    "DegenerateInputError",
    "ParamTensor",
    "SgdConfig",
    "finite_diff_check",
    "l2_normalize",
    "matmul",
    "sgd_step",
    "EncoderConfig",
    "Model",
    "LossConfig",
    "compute_loss",
    "pairwise_similarity",
    "MemoryBank",
    "BatchPlan",
    "SamplerConfig",
    "Sampler",
    "build_batch_plan",
    "knn_search",
    "GeneratorConfig",
    "PlaceDataset",
    "generate",
    "make_eval_split",
    "recall_at_k",
    "cost_report",
    "RunConfig",
    "train",
]
