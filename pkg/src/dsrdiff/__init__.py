"""Color-guided depth super-resolution with a compact latent diffusion prior."""
from .config import ModelConfig, TrainConfig, preset
from .data import (DatasetSplit, RGBDSample, extract_patches, load_dataset, make_synthetic_scene,
                   normalize_depth, synthesize_lr, synthetic_split)
from .diffusion import (GRN, Denoiser, NoiseSchedule, build_schedule, encode_condition,
                        forward_diffuse, predict_noise, recover_guidance, reverse_step)
from .dsrn import DSRN, dsrn_forward, ffm_fuse, grid_upsample, identity_init, inject_guidance
from .evaluation import MetricsRecord, evaluate, evaluate_bicubic, profile, render_error_map, rmse, run_ablation
from .guidance import GGN, GuidanceVector, compress_guidance, ggn_forward, pixel_unshuffle
from .model import CheckpointManifest, DSRDiff, load_checkpoint, save_checkpoint
from .training import loss_com, loss_img, train_stage1, train_stage2

__version__ = "0.1.0"
