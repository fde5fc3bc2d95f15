"""Arbitrary style transfer with local/global window attention and a
diffusion-based style prior."""

from .config import PriorConfig, TrainConfig, desk_preset, load_config, parse_config, save_config
from .data import DataPipeline, generate_corpus, load_image, save_image
from .errors import SpastError
from .feature_codec import (
    LEVEL_CHANNELS,
    LEVEL_STRIDES,
    LEVELS,
    Decoder,
    Encoder,
    decode,
    encode_pyramid,
    load_encoder_weights,
    save_encoder_weights,
)
from .lgwssm import (
    BlockedTensor,
    RegionGrid,
    StylizationParams,
    Stylizer,
    attention_weighted_stats,
    block,
    channel_norm,
    gwssm_forward,
    lgwssm_forward,
    lwssm_forward,
    region_attention,
    region_match,
    rearrange_regions,
    unblock,
)
from .losses import (
    Discriminator,
    LossReport,
    LossWeights,
    adversarial_losses,
    content_loss,
    gram_loss,
    identity_loss,
    style_loss,
    total_loss,
)
from .style_prior import (
    AvgPoolCodec,
    ConditionalDenoiser,
    LatentCodec,
    NoiseSchedule,
    StyleEmbedder,
    StylePrior,
    add_noise,
    build_schedule,
    load_prior,
    prior_recon_loss,
    save_prior,
    style_prior_loss,
)
from .trainer import (
    TrainState,
    init_state,
    load_checkpoint,
    save_checkpoint,
    stage_two_step,
    stylize,
    train,
    train_prior,
)
from .eval_metrics import EvalReport, benchmark_inference, evaluate, perceptual_distance, psnr

__version__ = "0.1.0"
