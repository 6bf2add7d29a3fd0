"""Power-of-two weight quantisation with bit-exact MAC/BAC datapath models."""

from .codec import PackedLayer, decode_codeword, encode_level, pack_layer, unpack_layer
from .layer_sim import EnergyModel, LayerConfig, LayerReport, compare_modes, energy_proxy, run_conv_layer
from .pe_sim import AccState, PEStats, bac_step, finalize, mac_step, run_filter
from .pruner import PruneConfig, dead_zone_prune, prune_and_quantize, renormalize_survivors, sparsity
from .quantizer import (
    QuantConfig,
    QuantizedLayer,
    QuantLevel,
    dequantize,
    log_quantize,
    normalize,
    quant_error_report,
    quantize_layer,
    uniform_quantize_layer,
)
from .tensor_io import Tensor, load_tensor, random_tensor, save_tensor

__version__ = "0.1.0"
