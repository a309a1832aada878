"""Mixed 2/4-bit group weight quantization with sparse outliers and a pipelined matvec."""
from .bitpack import LayerCodes, LayerConfig, PackedLayer, pack_layer, pack_tile, unpack_layer, unpack_tile
from .container import (WeightMatrix, load_calibration, load_weights, read_packed_layer,
                        write_packed_layer)
from .engine import matvec_oracle, matvec_pipelined, reconstruct_dense, reconstruct_full
from .metrics import quant_error_stats, storage_bits_actual
from .pipeline import quantize_layer
from .plan import ChannelPlan, build_plan, compute_amplitudes

__version__ = "0.1.0"
