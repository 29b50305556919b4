from .checkpoint import Provenance, TicketCheckpoint
from .config import AttackConfig, RunConfig, SearchSchedule
from .const import __version__
from .evaluate import EvalReport, evaluate, feature_distance, transfer_matrix
from .initializers import InitMethod, InitSpec
from .masking import Pattern
from .nets import Network, NetworkSpec, network_spec
from .r2s import R2SPolicy, r2s_evaluate, r2s_predict
from .search import finetune_ticket, search_rst, search_rtt, train_dense

__all__ = [
    "AttackConfig",
    "EvalReport",
    "InitMethod",
    "InitSpec",
    "Network",
    "NetworkSpec",
    "Pattern",
    "Provenance",
    "R2SPolicy",
    "RunConfig",
    "SearchSchedule",
    "TicketCheckpoint",
    "__version__",
    "evaluate",
    "feature_distance",
    "finetune_ticket",
    "network_spec",
    "r2s_evaluate",
    "r2s_predict",
    "search_rst",
    "search_rtt",
    "train_dense",
    "transfer_matrix",
]
