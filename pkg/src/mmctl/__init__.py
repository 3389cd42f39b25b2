"""Controllable joint audio-video diffusion on a synthetic desk-scale world.

A tiny joint diffusion transformer generates paired video frames and audio
waveforms with flow matching. Frozen-backbone bypass branches inject
reference-image, reference-audio, and structural (depth / pose) controls
through zero-initialized gated residuals, so attaching them never changes
the pretrained model's behavior until they are trained.
"""

from .codecs import AudioCodec, LatentSeq, VideoCodec
from .config import Config, load_config
from .diffusion import (
    GuidanceParams,
    NoiseSchedule,
    Pipeline,
    TrainHyper,
    two_stage_generate,
)
from .errors import (
    ConfigError,
    FormatError,
    InputError,
    MmctlError,
    PromptParseError,
    ShapeError,
    StateError,
)
from .mmcu import ControlUnit, build_control_unit
from .model import (
    JointModel,
    ModelConfig,
    attach_bypass,
    freeze_backbone,
    init_backbone,
)
from .numerics import Rng
from .prompt import StructuredPrompt, parse_prompt, render_prompt
from .synthdata import DataConfig, gen_dataset

__version__ = "0.1.0"

__all__ = [
    "AudioCodec",
    "Config",
    "ConfigError",
    "ControlUnit",
    "DataConfig",
    "FormatError",
    "GuidanceParams",
    "InputError",
    "JointModel",
    "LatentSeq",
    "MmctlError",
    "ModelConfig",
    "NoiseSchedule",
    "Pipeline",
    "PromptParseError",
    "Rng",
    "ShapeError",
    "StateError",
    "StructuredPrompt",
    "TrainHyper",
    "VideoCodec",
    "attach_bypass",
    "build_control_unit",
    "freeze_backbone",
    "gen_dataset",
    "init_backbone",
    "load_config",
    "parse_prompt",
    "render_prompt",
    "two_stage_generate",
    "__version__",
]
