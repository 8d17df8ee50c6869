"""latentzip: error-bounded lossy compression of spatiotemporal scientific
tensors.  Keyframe latents are entropy-coded under a learned hyperprior; the
remaining frames are reconstructed by a conditional latent diffusion model and
corrected to a hard per-tile l2 bound."""

from .fields import (FrameNormalization, ScalarField, compression_ratio, denormalize_frame,
                     normalize_frame, nrmse)
from .partition import FrameSequence, IndexPartition, Strategy, make_partition, oplus
from .codec import LatentCodec, RDTrainConfig, TransformConfig, quantize, relax_quantize, \
    train_stage1
from .entropy import (DiscretePMFTable, FactorizedDensity, TableSet, discretized_gaussian_pmf,
                      fit_factorized_density, gaussian_table_set, rate_estimate)
from .diffusion import (Denoiser, DenoiserConfig, LatentMinMax, NoiseSchedule, build_schedule,
                        finetune_reduced_steps, forward_sample, sample_conditioned,
                        subsample_steps, training_step)
from .errorbound import (CorrectionPayload, ResidualBasis, apply_correction, decode_payload,
                         encode_payload, fit_basis, project, select_and_quantize)
from .container import (BlockRecord, CompressedContainer, ContainerHeader, accounting,
                        read_container, write_container)
from .pipeline import (Models, PipelineConfig, compress, decompress, decompress_keyframe_hold,
                       eval_sweep, evaluate, fit_residual_basis)
from .synthetic import synth_data
from .rawio import read_raw, write_raw

__version__ = "0.1.0"
