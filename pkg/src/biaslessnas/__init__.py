"""Fairness-aware joint search over batch composition and architectures."""

from .controller import (
    ControllerPolicy,
    Episode,
    ReinforceConfig,
    RewardConfig,
    compute_reward,
    grad_check_policy,
    reinforce_update,
)
from .data import (
    BatchPlan,
    GroupedDataset,
    SyntheticBiasConfig,
    generate_synthetic,
    load_dataset,
    make_batches,
    save_dataset,
)
from .evaluator import (
    EvalReport,
    disparate_impact,
    evaluate,
    statistical_parity_difference,
    unfairness_score,
)
from .nn_engine import ChildNetwork, compile_network, sgd_step
from .search_space import (
    ArchitectureEncoding,
    BgmSpec,
    BlockChoice,
    BlockType,
    SearchSpaceConfig,
    TokenSchema,
    canonical_text,
    decode_tokens,
    encode_tokens,
    enumerate_space,
    fixed_point,
    iter_space,
)
from .surrogate import SurrogateTable, build_table, surrogate_evaluate
from .trainer import FairLossReport, TrainConfig, fair_loss, train_child

__version__ = "0.1.0"
