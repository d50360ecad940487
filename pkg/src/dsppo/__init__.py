"""Multi-agent PPO laboratory for cooperative LEO satellite downlink precoding.

A cluster of satellites acts as a distributed MIMO base station and maps
delayed channel observations directly to transmit precoding matrices with a
dual-stage PPO (per-satellite stage plus a cooperative stage fed by shared
singular values).  The package also ships an independent-PPO baseline, an
exact tabular-MDP suite that numerically verifies the policy-improvement
bound, and an analytical FLOPS cost model.
"""

from .constellation import (
    SatelliteState,
    UserState,
    Cluster,
    build_constellation,
    propagate,
    elevation_angle,
    select_cluster,
    detect_handover,
)
from .channel import (
    RadioConfig,
    ChannelObservation,
    DelayBuffer,
    steering_vector,
    generate_channel,
    propagation_delay,
    discretize_delay,
    cluster_delay,
)
from .precoding import (
    Tpm,
    sinr,
    sum_rate,
    trace_power,
    project_power,
    singular_values,
)
from .env import MarlEnv, RewardThresholds, StepRecord, stage1_reward, stage2_reward
from .ppo import (
    Mlp,
    GaussianPolicy,
    PpoHyperParams,
    RolloutBuffer,
    AdamState,
    gae,
    clipped_surrogate,
    total_loss,
    adam_step,
    train_iteration,
)
from .flops import ArchSpec, FlopsReport, mlp_flops, svd_flops, episode_flops, total_flops

__version__ = "0.1.0"
