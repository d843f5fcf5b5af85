"""Vector quantization codecs and a reproducible benchmark harness.

Two codec families share a random-rotation preprocessing step: shifted-grid
codes with decoding-free unbiased inner-product estimation (``rabitq``), and
Lloyd-Max scalar codebooks with an optional one-bit Gaussian-sketch residual
correction (``turboquant``).  On top of them sit an outlier-aware
mixed-bitwidth splitter, evaluation protocols (error distributions,
Recall@1@k, tail diagnostics, timing), dataset ingestion, and a CLI.
"""

__version__ = "0.1.0"

from .errors import DegenerateInputError, FormatError
from .rotation import (FastRotationSpec, GaussianSketch, RotationSpec,
                       apply_fast_rotation, apply_rotation, load_rotation,
                       rotate_rows, sample_dense_rotation, sample_fast_rotation,
                       sample_gaussian_sketch, save_rotation, working_dim)
from .rabitq import (CandidateSet, ExhaustiveCritical, ExpectedFactor,
                     QueryContext, RabitqBatch, RabitqCode, prepare_query,
                     rabitq_estimate_incremental, rabitq_estimate_ip,
                     rabitq_quantize, rabitq_quantize_batch, rabitq_reconstruct,
                     read_rabitq_codes, select_rescale_factor, write_rabitq_codes)
from .turboquant import (ScalarCodebook, TqMseBatch, TqMseCode, TqProdBatch,
                         TqProdCode, build_lloydmax_codebook,
                         load_or_build_codebook, marginal_density,
                         read_tq_mse_codes, read_tq_prod_codes, tq_estimate_ip_mse,
                         tq_estimate_ip_prod, tq_quantize_mse, tq_quantize_prod,
                         tq_reconstruct, tq_reconstruct_prod, write_tq_mse_codes,
                         write_tq_prod_codes)
from .mixed_precision import (ChannelSplit, MixedCode, MixedPrecisionCodec,
                              effective_bitwidth, quantize_mixed,
                              reconstruct_mixed, select_outlier_channels,
                              serialize_mixed)
from .evaluation import (ErrorStats, QuantizePipeline, RecallResult, TheoryParams,
                         TimingResult, bench_quantize, brute_force_topk,
                         chebyshev_tail_check, ip_error_stats, make_pipeline,
                         optimal_bitwidth_reference, recall_at_1_at_k,
                         run_ip_error_experiment, run_recall_experiment)
from .data import (DatasetHandle, generate_synthetic, load_matrix, read_fvecs,
                   read_matf, write_fvecs, write_matf)
