"""Desk-scale digital over-the-air federated edge learning simulator."""

from .channel import ActivityVector, ChannelConfig, noise_variance, transmit
from .decoder import (
    DecodeDiagnostics,
    DecoderError,
    DecoderParams,
    DecoderState,
    LayerParams,
    PostProcConfig,
    cnn_forward,
    decode,
    decode_batch,
    em_update,
    init_state,
    input_block,
    output_block,
    postprocess,
    pseudo_channel,
    spike_slab_posterior,
)
from .feel_sim import (
    DeviceShard,
    FeelSimulation,
    GlobalModel,
    RoundRecord,
    collect_dataset,
    local_train,
    partition_dataset,
    run_experiment,
)
from .harness import ExperimentConfig, load_weights, run_cli, save_weights
from .quantizer import (
    ErrorAccumulator,
    QuantCodebook,
    apply_error_feedback,
    build_codebook,
    dequantize,
    fragment,
    popularity_order,
    quantize,
    quantize_batch,
)
from .ura_codebook import (
    BaseMatrix,
    CoherenceReport,
    ShearMatrix,
    UraCodebook,
    coherence_stats,
    init_base,
    synthesize,
)

__version__ = "0.1.0"
