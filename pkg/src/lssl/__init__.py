"""Linear state-space layers with HiPPO state matrices, in NumPy."""

from .disc import DiscreteSSM, discretize, gbt_discretize
from .estimators import HippoTransformer, LSSLClassifier, LSSLRegressor
from .hippo import hippo_system, structured_system
from .kernel import apply_convolutional, apply_recurrent, krylov_function, resolvent_kernel_fast
from .layer import LsslLayer, LsslModel, adapt_timescale, init_layer, init_model, model_forward
from .tasks import Dataset, make_delay_task, reconstruct_history

__version__ = "0.1.0"

__all__ = [
    "DiscreteSSM",
    "discretize",
    "gbt_discretize",
    "hippo_system",
    "structured_system",
    "krylov_function",
    "apply_convolutional",
    "apply_recurrent",
    "resolvent_kernel_fast",
    "LsslLayer",
    "LsslModel",
    "init_layer",
    "init_model",
    "model_forward",
    "adapt_timescale",
    "Dataset",
    "make_delay_task",
    "reconstruct_history",
    "LSSLClassifier",
    "LSSLRegressor",
    "HippoTransformer",
]
