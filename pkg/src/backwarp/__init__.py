"""backwarp: joint deblurring, interpolation and extrapolation of sharp
frames from pairs of motion-blurred inputs.

Latent features are decoded per pyramid level, flows between latent frames
are estimated coarse to fine over cost volumes, temporal direction is
recovered with a flow-magnitude rule, and frames are synthesized by
back-warping decoded reference features.
"""

from .errors import (BackwarpError, CheckpointError, ConfigError, ContractError,
                     DimensionError, IngestError, NumericError, RangeError)
from .indexing import FrameIndexing
from .model import Model, ModelConfig, PipelineOutput
from .optim import Adam
from .ordering import (OrderDecision, apply_order, decide_order, flow_fix,
                       flow_magnitude)
from .synth import (DatasetManifest, SceneSpec, SpriteSpec, analytic_flow,
                    build_dataset, generate_scenes, ingest_frames, load_sample,
                    render_sequence, synthesize_blur)
from .tensor import Tensor, concat, concat_channels, narrow, no_grad, repeat_batch
from .train import TrainConfig, frame_loss, flow_loss, total_loss, train

__version__ = "0.1.0"
