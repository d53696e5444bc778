"""Desk-scale long-context transformer inference engine.

Context-parallel ring attention over sharded sequences, full/chunked/masked
language-model heads with bitwise-identical rows, fixed-length padded
decoding, two sequence-packing regimes, dynamic-tile vision tokenization,
and an exact analytic memory model.
"""

from .capacity import (
    GB,
    CapacityModel,
    MemoryEstimate,
    estimate_logit_memory,
    logits_bytes,
    logits_gigabytes,
    reduction_factor,
)
from .decode import (
    FixedLengthBuffer,
    GenerationRequest,
    KVCache,
    generate_fixed,
    generate_incremental,
)
from .errors import (
    CapacityError,
    CheckpointError,
    ConfigError,
    DegenerateRowError,
    DimensionError,
    EmptyMixtureError,
    EmptySelectionError,
    EmptyWindowError,
    EngineError,
    FrameFormatError,
    ImageFormatError,
    LayoutError,
    OversizeSampleError,
    RingBrokenError,
    UnderfullError,
)
from .harness import BenchSpec, bench_prefill, capacity_report, run_verify
from .head import (
    Chunked,
    Full,
    HeadMeter,
    LogitsMasked,
    compute_logits,
    loss_over_window,
)
from .kernels import (
    RopeConfig,
    SoftmaxAccumulator,
    apply_rope,
    attend_masked,
    causal_mask,
    causal_pad_mask,
    empty_accumulator,
    finalize_accumulator,
    full_pad_mask,
    gelu,
    matmul,
    merge_accumulators,
    reference_attention,
    rms_norm,
    rope_angles,
    softmax_rows,
)
from .model import (
    EOS_TOKEN,
    PAD_TOKEN,
    Model,
    ModelConfig,
    build_model,
    embed_multimodal,
    embed_tokens,
    forward,
    forward_tokens,
    load_checkpoint,
    save_checkpoint,
)
from .packing import (
    PAD_SEGMENT_ID,
    MixtureSource,
    PackedSequence,
    PackingMode,
    Sample,
    build_attention_mask,
    pack_samples,
    read_packed,
    sample_mixture,
    write_packed,
)
from .ring import ShardPlan, plan_shards, ring_attention, run_distributed_forward
from .transport import (
    DroppedRankRing,
    RingFrame,
    SteppedRing,
    TcpRing,
    TracingRing,
    decode_frame,
    encode_frame,
)
from .vision import (
    TileGrid,
    VisionConfig,
    VisionEncoder,
    VisualTokens,
    frame_token_budget,
    pixel_shuffle,
    pixel_unshuffle,
    read_image_file,
    resize_bilinear,
    select_tile_grid,
    tile_image,
    write_image_file,
)

__version__ = "0.1.0"
