"""Tube-masked video encoders, multimodal feature distillation, and few-shot
ensemble inference, evaluated on a synthetic multimodal video benchmark."""

from .errors import ConfigurationError, ContractError, EpisodeSamplingError, NumericError
from .masking import TokenGrid, TubeMask, apply_mask, kept_spatial_count, tube_mask
from .synth import (
    Clip,
    DatasetSpec,
    Episode,
    Modality,
    ModalitySpec,
    MotionPattern,
    MultimodalSample,
    class_motion,
    generate_dataset,
    load_dataset,
    make_heatmap,
    sample_episode,
    save_dataset,
    standard_modalities,
)
from .models import (
    ClassifierHead,
    EncoderConfig,
    ModalityModel,
    ModelBundle,
    ProjectionHead,
    VideoDecoder,
    VideoEncoder,
    classify,
    encode,
    encode_batch,
    gradients,
    init_bundle,
    init_modality_model,
    load_bundle,
    reconstruct,
    save_bundle,
    tokenize,
)

__version__ = "0.1.0"
