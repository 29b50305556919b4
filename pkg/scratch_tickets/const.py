"""Constants"""

__version__ = "0.3.0"

DEFAULT_BOUNDS = (0.0, 1.0)  # image inputs scaled to [0, 1]

DATA_DIR_ENV = "RST_DATA_DIR"
DEFAULT_DATA_DIR = "data"

CHECKPOINT_MAGIC = b"RSTK"
CHECKPOINT_VERSION = 1

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803

RESULT_COLUMNS = (
    "config_hash",
    "stage",
    "model",
    "provenance",
    "arch",
    "init",
    "pattern",
    "ratio",
    "seed",
    "attack",
    "norm",
    "epsilon",
    "alpha",
    "steps",
    "split",
    "samples",
    "natural_acc",
    "robust_acc",
    "attack_source",
    "feature_distance",
)

STAGES = ("search", "train", "finetune", "eval", "transfer", "r2s", "distance", "plot")
