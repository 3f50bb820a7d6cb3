"""Prefix filters for early rejection during LLM decoding.

Filters are small predicates over output prefixes. They are learned from
oracle-labelled samples and then applied inside an adaptive rejection
sampler that never revisits a rejected prefix.
"""
from .decoder import (
    AttemptsExhausted,
    DecodeOutcome,
    DecoderConfig,
    TrieNode,
    Unsatisfiable,
    constrained_sample,
    fallback_reject_sample,
    residual_distribution,
    update_trie,
)
from .evalkit import bootstrap_ci, capture_rate, diff_significant, run_eval, top_k_share, transfer_matrix
from .filter_engine import (
    And,
    Contains,
    FilterSet,
    FilterSpec,
    Not,
    Or,
    RegexSearch,
    StrippedEmpty,
    SubstrCountAtLeast,
    eval_filter,
    eval_set,
    first_trigger,
    parse_filter_set,
    serialize_filter_set,
)
from .generator import Capability, NGramModel, RemoteModel, TableModel, Vocabulary, train_ngram
from .learner import LearningConfig, MinerSynthesizer, learn, mine_candidates, validate_filter
from .oracle import BalancedBrackets, LeakDetector, MiniMol, OracleVerdict, SubprocessOracle, brute_force_sound

__version__ = "0.1.0"
