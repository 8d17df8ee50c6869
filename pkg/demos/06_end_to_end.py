"""Whole pipeline on a small field with quick desk-scale training.

Trains both stages briefly, then compresses with an NRMSE-equivalent bound,
decodes, and reports the guarantee, the byte accounting, and the comparison
against the keyframe-hold baseline.  Expect a few minutes on CPU; the
acceptance suite (tests/test_acceptance.py) runs the full-size version.
"""
import numpy as np
import torch

from latentzip import ScalarField, nrmse, synth_data, write_container
from latentzip.codec import RDTrainConfig, train_stage1
from latentzip.diffusion import Denoiser, DenoiserConfig, build_schedule, train_denoiser
from latentzip.fields import compression_ratio
from latentzip.partition import Strategy
from latentzip.pipeline import (Models, PipelineConfig, compress, decompress,
                                decompress_keyframe_hold, encode_all_latents,
                                fit_residual_basis, latent_window_batch_fn)

field = synth_data("advecting-blobs", (1, 96, 64, 64), seed=21)
train, val, hold = (0, 64), (64, 80), (80, 96)
hold_field = ScalarField(data=field.data[:, hold[0]:hold[1]].copy(),
                         var_names=field.var_names, dtype_bits=32)

print("stage 1: transform + hyperprior ...")
codec, _ = train_stage1(field, RDTrainConfig(total_iters=800, batch=8, seed=0,
                                             log_every=200), frame_range=train)

print("stage 2: conditioned denoiser ...")
sched = build_schedule(200)
torch.manual_seed(0)
denoiser = Denoiser(DenoiserConfig(latent_channels=16, width=64, blocks=2, heads=4))
latents = encode_all_latents(codec, field)
batch_fn = latent_window_batch_fn(latents, batch=8, window=16,
                                  strategy=Strategy(kind="interpolation", interval=3),
                                  frame_range=train)
train_denoiser(denoiser, sched, batch_fn, iters=800, lr=2e-4, seed=1, log_every=200)
models = Models(codec=codec, denoiser=denoiser, sched=sched)

print("fitting the residual basis on the validation split ...")
val_field = ScalarField(data=field.data[:, val[0]:val[1]].copy(),
                        var_names=field.var_names, dtype_bits=32)
models.basis = fit_residual_basis(val_field, models, PipelineConfig(steps=32), n_components=64)

tau = 0.02
cfg = PipelineConfig(interval=3, steps=32, tau=tau, seed=0)
container = compress(hold_field, models, cfg)
blob = write_container(container)
recon = decompress(container, models)

print(f"\ncontainer: {len(blob)} bytes  (L={container.size_l}, G={container.size_g})")
print(f"compression ratio {compression_ratio(hold_field.nbytes, container.size_l, container.size_g):.1f}x")
print(f"overall NRMSE {nrmse(hold_field, recon):.5f} under bound tau={tau}")

plain = compress(hold_field, models, PipelineConfig(interval=3, steps=32, seed=0))
diff = decompress(plain, models)
holdrec = decompress_keyframe_hold(plain, models)
print(f"\nat equal stored bytes (no correction): diffusion NRMSE {nrmse(hold_field, diff):.5f} "
      f"vs keyframe-hold {nrmse(hold_field, holdrec):.5f}")
