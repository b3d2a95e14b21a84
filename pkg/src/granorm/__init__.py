"""Grammar-constrained semantic parsing with locally and globally
normalized training, small enough to verify against exact enumeration.
"""

from .grammar import (FIELD_END, Constructor, FieldDecl, GrammarError,
                      GrammarSpec, parse_grammar, render_grammar)
from .model import (GLOBAL, LOCAL, ModelError, Scorer, SrcVocab,
                    load_checkpoint, save_checkpoint)
from .search import SearchError, beam_search, exhaustive_derivations
from .training import TrainingConfig, TrainingError, train
from .transition import (ApplyConstr, GenToken, Reduce, TransitionError,
                         actions_to_ast, ast_to_actions, initial_state,
                         parse_sexpr, render_sexpr)

__version__ = "0.1.0"

__all__ = [
    "ApplyConstr", "Constructor", "FIELD_END", "FieldDecl", "GLOBAL",
    "GenToken", "GrammarError", "GrammarSpec", "LOCAL", "ModelError",
    "Reduce", "Scorer", "SearchError", "SrcVocab", "TrainingConfig",
    "TrainingError", "TransitionError", "actions_to_ast", "ast_to_actions",
    "beam_search", "exhaustive_derivations", "initial_state",
    "load_checkpoint", "parse_grammar", "parse_sexpr", "render_grammar",
    "render_sexpr", "save_checkpoint", "train",
]
