"""Joint hyper-parameter search for embedding verification.

Couples three coupled design choices into one searchable token sequence:
data cleaning thresholds, the scale-aware combined-margin softmax loss, and
MLP width/depth expansion ratios.  A recurrent controller samples candidate
combinations, each is proxy-trained and scored by weighted TAR@FAR, and the
controller is updated with PPO against a weighted-product accuracy/cost
reward.
"""

from .agent import (
    ControllerPolicy,
    PpoConfig,
    PpoState,
    SearchLog,
    SearchRecord,
    SearchSetup,
    Trajectory,
    ppo_update,
    reward,
    run_search,
    sample_batch,
)
from .backbone import BaseArch, Network, NetworkConfig, flops, instantiate
from .cleaner import CleanParams, CleanReport, CentroidTable, clean, merge_classes
from .cli import difficulty, main, retrain_topk
from .marginloss import LossParams, loss_backward, loss_forward, margin_fn
from .searchspace import Combination, SearchSpace, default_space
from .synthdata import (
    DatasetSpec,
    LabeledDataset,
    PairSet,
    build_pairset,
    generate_dataset,
    split,
)
from .traineval import (
    EvalSpec,
    TrainBudget,
    TrainedModel,
    acc_metric,
    tar_at_far,
    train_candidate,
)

__version__ = "0.1.0"
