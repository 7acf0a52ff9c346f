"""Path-connectivity regularization and pruning for small layered networks.

Modules:
    autodiff      define-then-run reverse-mode tape over float64 matrices
    network       layered MLPs, masks, binary serialization
    connectivity  total and per-node connectivity, the log regularizer
    pruning       magnitude, synflow, channel and loss-aware importance
    training      toy data, Adam with warmup/cosine, regularized training
    harness       property suites, multi-seed sweeps, command line
"""

from .connectivity import Mode, connect_regularizer, node_connectivity, total_connectivity
from .network import LayeredNetwork, PruneMask, apply_mask, init_random, load, predict, save
from .pruning import PruneSpec, build_mask, score
from .training import PRESETS, RegularizerConfig, TrainConfig, fine_tune, generate_toy, train

__version__ = "0.1.0"
