from .base import AnyOrderModel, as_token_array, check_prob_vector
from .bigram import BigramCounts, draft_window
from .tabular import TabularJointModel
from .transformer import TwoStreamConfig, TwoStreamTransformer, softmax_rows

__all__ = [
    "AnyOrderModel",
    "BigramCounts",
    "TabularJointModel",
    "TwoStreamConfig",
    "TwoStreamTransformer",
    "as_token_array",
    "check_prob_vector",
    "draft_window",
    "softmax_rows",
]
