"""Document-image super-resolution with cascaded 2x detail-preserving networks."""

from .cascade import (Cascade, CheckpointError, assemble_cascade,
                      load_checkpoint, save_checkpoint, super_resolve)
from .config import RunConfig, desk_scale_config
from .data import (DatasetManifest, PatchPair, bicubic_downsample,
                   bicubic_upsample, build_manifest, downsample_by,
                   extract_patches, generate_synthetic_corpus, load_image,
                   load_patch_pairs, make_pyramid, render_synthetic_patch,
                   save_image, upsample_by)
from .losses import (HedEdgeNetwork, IdentityFeatureExtractor, LossBreakdown,
                     LossWeights, MissingWeightsError, SobelEdgeNetwork,
                     TinyFeatureExtractor, Vgg19FeatureExtractor,
                     class_balanced_bce, edge_loss, perceptual_loss,
                     pixel_loss, total_loss)
from .metrics import (EvalItem, MetricReport, OcrEngine, TextPair,
                      evaluate_method, evaluate_sr, lcs_score,
                      levenshtein_score, psnr, ssim, summary_table)
from .model import (DPNet, DPNetConfig, ImageTensor, dpnet_forward,
                    init_dpnet, pixel_shuffle, validate_image)
from .training import (TrainingLog, TrainingSchedule, finetune_cascade,
                       lr_at_epoch, set_frozen, train_parallel)

__version__ = "0.1.0"
