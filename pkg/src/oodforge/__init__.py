"""Domain-wise adversarial training, its gradient-penalty relatives and a leave-one-domain-out harness."""
from .data import EnvironmentDataset, make_cmnist, make_synthetic_spurious, parse_idx
from .harness import RunRecord, SearchSpace, leave_one_out, sample_hparams, select_model
from .nets import ModelSpec, init
from .penalties import penalty_at, penalty_dat, penalty_irmv1, penalty_ldat, verify_identities
from .trainers import TrainerConfig, train

__version__ = "0.1.0"
