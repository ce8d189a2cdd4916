"""Modular deep-prompt dense retrieval over a frozen transformer encoder."""

from .algebra import CompositionSpec, add, average, combine, compose_final, parse_expr, scale, subtract
from .decomposer import Lexicon, TaskSpec, decompose, select_modules
from .encoder import Backbone, EncoderConfig, Embedding, PromptStack, encode, score, tokenize
from .index import PassageIndex, build_index, search
from .metrics import ndcg_at_k, recall_at_k
from .registry import ModuleDescriptor, Registry, list_modules, load_module, save_module
from .trainer import TrainConfig, TrainExample, nll_loss, train_general, train_joint

__version__ = "0.1.0"
