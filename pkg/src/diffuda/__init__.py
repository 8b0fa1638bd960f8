"""Two-stage unsupervised domain adaptive segmentation on diffusion features.

Stage 1 trains a denoising diffusion model on both domains while a pixel
discriminator behind a gradient reversal layer pushes the decoder
activations toward domain invariance. Stage 2 freezes the diffusion model,
trains a small segmentor on the extracted feature maps with supervised
source labels, and regularizes it with a prototype consistency loss built
from uncertainty-filtered target pseudo-labels.
"""

from .adaptation import (PCLConfig, Prototype, UncertaintyMap, compute_prototype,
                         make_pseudo_label, mc_uncertainty, pcl_loss,
                         refine_pseudo_label, stage2_loss)
from .alignment import (DomainDiscriminator, GradientReversal, discriminator_loss,
                        grl_apply, stage1_loss)
from .config import RunConfig, config_hash, desk_config, dump_config, parse_config
from .diffusion import (DiffusionBatch, NoiseSchedule, build_schedule, noise_loss,
                        p_sample_step, q_sample)
from .features import (DiffusionFeature, FeatureCache, FeatureSpec, extract_batch,
                       extract_features)
from .masks import LabelMask
from .segmentor import Segmentor, dice, seg_loss, segment
from .synth import DomainShift, SegSample, SynthConfig, generate_synthetic
from .unet import DenoiserUNet, capture_activations

__version__ = "0.1.0"
