"""Toy latent diffusion model: autoencoder, schedule, tokenizer, denoiser, sampler, training."""
from .autoencoder import decode, decode_np, encode, encode_np
from .data import ToyDataset, ToySample, sample as toy_sample, style_image
from .sampling import cfg_eps, combine_cfg, context_of, predict_eps, sample
from .schedule import NoiseSchedule, add_noise, ddim_invert_step, ddim_step, make_schedule, predict_x0
from .text import PromptEmbedding, tokenize
from .train import TrainConfig, train_toy
from .unet import AttentionRecord, Denoiser, from_checkpoint, to_checkpoint
