"""Motion-aware continual calibration for mobile gaze tracking."""
from ._accel import BACKEND
from .calibrator import CalibrationSet, CalibratorModel, ReplayBuffer, predict_gaze, recalibrate, update_buffer
from .harness import (
    MethodSpec,
    ProtocolConfig,
    Report,
    run_ablations,
    run_oneoff_matrix,
    run_protocol,
    sweep_replay,
    train_har_model,
)
from .metrics import euclidean_error, macro_f1, nmi
from .motionnet import HarConfig, HarModel, HarTrainConfig, classify, decode, encode, train_har
from .session import ImuWindow, SessionStream, load_session, save_session
from .synth import build_config, generate_session
from .trigger import GmmModel, TriggerConfig, absorb_task, fit_gmm, majority_vote, outlier_ratio, step

__version__ = "0.1.0"
