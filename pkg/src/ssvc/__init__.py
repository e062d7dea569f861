"""Contrastive-discriminator StarGAN for multi-domain conversion of cepstral feature maps."""

from .augment import FREQ_MASK, TIME_MASK, MaskSpec, apply_mask, augment_pair
from .estimator import StarGANConverter
from .features import (
    Dataset,
    DomainPair,
    FeatureMap,
    SynthConfig,
    load_features,
    sample_batch,
    save_features,
    synth_dataset,
)
from .losses import (
    LossWeights,
    discriminator_loss,
    fake_contrastive_loss,
    generator_loss,
    neg_cosine,
    simsiam_loss,
    st_adv_loss,
    supcon_loss,
)
from .metrics import loss_stability, mcd, msd
from .networks import Discriminator, Generator, NetConfig, build_networks, cin
from .tensor import Tensor, grad_check, stop_gradient
from .trainer import TrainConfig, ablate, convert, load_checkpoint, save_checkpoint, train, train_step

__version__ = "0.1.0"
