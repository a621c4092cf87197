"""Joint data/weight diffusion models with self-guided weighted sampling.

Train a diffusion model over augmented vectors z = [a, w(a)] and sample
from the weighted target p(a) proportional to q(a) w(a) using guidance
read off the model's own clean-data estimate, with exact closed-form
oracles for desk-scale verification.
"""

__version__ = "0.1.0"

from . import autodiff
from .critic import (
    CriticConfig,
    CriticState,
    WeightSpec,
    advantage,
    expectile_loss,
    mc_expectile,
    train_critic,
    weight_eval,
)
from .denoiser import (
    AugmentedSample,
    EnergyTrainData,
    MlpConfig,
    MlpDenoiser,
    Normalization,
    ResidualConfig,
    ResidualDenoiser,
    TrainConfig,
    augment_dataset,
    load_checkpoint,
    prepare_fixed,
    save_checkpoint,
    time_embed,
    train,
)
from .metrics import (
    MetricsReport,
    compare_samples,
    energy_distance,
    energy_permutation_test,
    histogram_tv,
    mode_frequencies,
)
from .optim import AdamState, adam_step, init_adam
from .oracle import (
    EmpiricalDenoiser,
    SupportMeasure,
    grid_intractable_score,
    importance_resample_target,
    measure_from_dataset,
    measure_from_grid,
)
from .rng import SeededRng
from .sampler import (
    GuidanceConfig,
    SamplerOutput,
    extract_w,
    guided_eps,
    sample,
    sample_swg_r,
    sample_unguided,
    self_guidance_grad,
)
from .schedules import NoiseSchedule, build_cosine, build_schedule, build_vp
from .toyworld import (
    BanditDatasetConfig,
    EnergySpec,
    ToyDistribution,
    make_bandit_dataset,
    mode_distance_energy,
    sample_toy,
    weight_from_energy,
)
