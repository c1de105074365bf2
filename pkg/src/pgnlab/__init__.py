"""Pointer-generator Transformer NMT toolkit built on a small numpy autograd."""

from .autograd import Tensor, backward, no_grad
from .bpe import Tokenizer, TokenizerError, Vocabulary, decode, encode, train_bpe
from .corpus import (CorpusError, ParallelCorpus, SyntheticPairSpec, build_controlled_subsets,
                     load_parallel, subsample, synthesize_language_pair, token_heuristics)
from .metrics import attention_entropy, copy_usage_summary, pcopy_entropy_correlation, sp_bleu
from .pgn import context_vector, copy_distribution, copy_gate, mix, pgn_loss
from .runconfig import RunConfig, load_config
from .seq2seq import AttentionTrace, Seq2Seq
from .transformer import ConfigError, ModelConfig, Transformer

__version__ = "0.1.0"
