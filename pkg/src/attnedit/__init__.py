"""Trainable text-conditioned diffusion over toy spectrograms with
attention-map recording/injection, scheduler-fused editing, three inversion
algorithms, and guidance-scale bootstrapping."""

from .attention import AttentionRecord, HookContext, PassContext, record_mean_map
from .bootstrap import GuidanceGrid, bootstrap_edit, select, similarity_score
from .editor import (
    EditInstruction,
    EditResult,
    TokenAlignment,
    align_tokens,
    fuse,
    refuse,
    run_edit,
)
from .errors import AttnEditError, ConfigError, NotFittedError, NumericError
from .evaluate import evaluate_testset
from .fuser import FuserConfig, schedule_ratio
from .inversion import (
    LatentTrajectory,
    ddim_invert,
    edit_friendly_invert,
    null_text_invert,
    reconstruct,
)
from .metrics import frechet_distance, kl_divergence, lsd, region_preservation
from .net import EpsilonNet
from .sampling import cfg_epsilon, encode_spectrogram, sample, to_spectrogram
from .schedule import (
    InferencePlan,
    NoiseSchedule,
    ddim_step,
    ddpm_posterior,
    ddpm_step,
    make_schedule,
    q_sample,
)
from .training import TrainConfig, train, training_loss
from .world import (
    EVENT_KINDS,
    EditCase,
    EventClassifier,
    EventSpec,
    World,
    WorldConfig,
    build_edit_testset,
)

__version__ = "0.1.0"
