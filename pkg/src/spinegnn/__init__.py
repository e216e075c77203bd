"""Vertebra keypoint graph learning: synthetic spines, k-NN graphs, a joint
node/edge classifying message-passing GNN, and Hungarian/HMM baselines."""

from .spine import (AugmentationConfig, Keypoint, KeypointType, Segment,
                    SyntheticSpineConfig, augment, generate_synthetic_spine,
                    level_from_name, level_name, level_to_segment)
from .graphs import SpineGraph, assign_targets, build_knn_graph, compute_edge_feature
from .gnn import (GnnModel, LossWeights, TrainConfig, forward, loss,
                  parse_architecture, predict, train)
from .baselines import Hmm, associate_by_matching, baum_welch, hungarian, viterbi
from .metrics import (EvalReport, d_mean, edge_f1, f1, hard_subset,
                      identification_rate, illegitimacy_f1, wilcoxon_signed_rank)
from .dataset import Corpus, ScanRecord, load_corpus, save_corpus

__version__ = "0.1.0"
