"""viewforge: packed image datasets, deterministic multi-view loading,
exact JE-SSL loss kernels, and a desk-scale training/sweep harness."""

from .augment import (
    ColorJitter,
    GaussianBlur,
    GaussianNoise,
    Grayscale,
    HorizontalFlip,
    RandomResizedCrop,
    Solarization,
    ToFloatNormalize,
    apply_pipeline,
    default_ssl_pipeline,
    format_pipeline,
    parse_pipeline,
)
from .container import (
    DatasetHandle,
    EncodingMode,
    ImageRecord,
    PackOptions,
    open_dataset,
    pack_dataset,
    validate,
)
from .loader import (
    Batch,
    InstanceViews,
    LoaderConfig,
    MultiViewLoader,
    ResolutionSchedule,
    Traversal,
    bench_throughput,
    build_epoch_plan,
    resolution_at,
)
from .losses import (
    BarlowParams,
    LossOutput,
    Reduction,
    SimClrParams,
    VicRegCoeffs,
    barlow_loss,
    build_instance_batch,
    cosine_similarity,
    simclr_loss,
    vicreg_loss,
)
from .model import (
    EncoderProjector,
    EncoderSpec,
    ProbeSpec,
    ProjectorSpec,
    SgdMomentum,
    backward_and_step,
    ema_update,
    offline_probe,
    online_probe_step,
)
from .relations import RelationMatrix, build_pair_relation, split_left_right
from .rng import RngStream
from .train import Method, RunReport, TrainSettings, Trainer, run_training

__version__ = "0.1.0"
