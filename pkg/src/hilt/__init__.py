"""Hybrid imitation learning for desk-scale manipulation.

Waypoint segments are predicted from point clouds by a salient-point
transformer and executed by a linear interpolating controller; fine phases
hand over to a dense diffusion policy over wrist-image action chunks.  The
package ships a synthetic quasistatic environment, scripted and teleoperated
data collection, dataset persistence, training, and evaluation tooling.
"""

from .pose import GRIPPER_CLOSED, GRIPPER_OPEN, Pose7, apply_delta, euler_to_matrix, pose_delta
from .pointcloud import (
    SALIENT_RADIUS,
    PointCloud,
    SalientTarget,
    build_salient_target,
    crop_workspace,
    fps_downsample,
    nearest_point_index,
)
from .dataset import (
    DatasetError,
    DemoStep,
    Episode,
    IntegrityError,
    InvariantError,
    Mode,
    SchemaVersionError,
    build_dense_view,
    dataset_hash,
    expand_waypoint_view,
    load_dataset,
    load_episode,
    save_episode,
    validate_episode,
    waypoint_segments,
)
from .executor import (
    ControllerLimits,
    ExecutorConfig,
    ExecutorError,
    RolloutRecord,
    plan_interpolation,
    replay_episode,
    run_episode,
    step_mode_machine,
)
from .simworld import (
    Env,
    ObserveConfig,
    Scene,
    SceneGenerationError,
    SceneObject,
    check_success,
    generate_scene,
    observe,
    render_wrist,
    scene_pose_errors,
    scripted_demo,
    step_env,
    translate_scene,
    world_anchor,
)
from .train_utils import Ema, TrainingDivergence
from .waypoint_policy import (
    VARIANTS,
    WaypointModelConfig,
    WaypointPolicy,
    WaypointTarget,
    WaypointTrainConfig,
    desk_config,
    train_waypoint,
)
from .dense_policy import (
    DenseModelConfig,
    DenseObservation,
    DensePolicy,
    DenseTrainConfig,
    desk_dense_config,
    make_schedule,
    paper_dense_config,
    q_sample,
    sample_action_chunk,
    train_dense,
)
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_dense,
    load_waypoint,
    save_checkpoint,
    save_dense,
    save_waypoint,
    sha256_file,
)

__version__ = "0.1.0"
