"""Hidden Markov language models with very large, block-structured state spaces."""

from .brown import BlockPartition, EmissionSupport, brown_cluster, collect_bigrams
from .config import TrainConfig
from .corpus import Vocab, build_vocab, encode, load_corpus
from .hmm import DistParams, FilterState, brute_force_loglik, forward_backward, forward_batch, forward_serial
from .params import ModelConfig, compute_dist_params, init_params, param_count

__version__ = "0.1.0"
