"""Compose LLM-generated SQL and Python to answer analytical questions over
relational databases, with scripted-replay evaluation tooling."""

from .answers import (
    FAILURE,
    AnswerSet,
    AnswerTuple,
    Constituent,
    MatchConfig,
    ParseError,
    answers_match,
    canonicalize_answer,
    is_failure,
    majority_answer,
)
from .dataset import DbEntry, DbRegistry, Question, load_dataset
from .pipelines import MethodId, PipelineEnv, Trace, run_method

__all__ = [
    "FAILURE",
    "AnswerSet",
    "AnswerTuple",
    "Constituent",
    "MatchConfig",
    "ParseError",
    "answers_match",
    "canonicalize_answer",
    "is_failure",
    "majority_answer",
    "DbEntry",
    "DbRegistry",
    "Question",
    "load_dataset",
    "MethodId",
    "PipelineEnv",
    "Trace",
    "run_method",
]

__version__ = "0.1.0"
