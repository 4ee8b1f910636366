"""pickrank: learning-to-rank toolkit for instruction-driven object retrieval.

Given an open-vocabulary instruction and an environment of candidate object
crops with surrounding-context images, the toolkit trains and serves a
ranking model whose output list a human operator reviews; the selection is
dispatched as a pick command.
"""

__version__ = "0.1.0"

from .corpus import Box, CandidateObject, Dataset, Environment, Sample, load_manifest  # noqa: F401
from .errors import DataError, ModelError, NumericError, PickrankError  # noqa: F401
from .metrics import QueryResult, Report, build_report, mrr, mrr_at_k, recall_at_k  # noqa: F401
from .model import ModelConfig, RankedList, batch_loss, build_model, similarity  # noqa: F401
