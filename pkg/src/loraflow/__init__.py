"""LoRa chirp modem with a rectified-flow denoiser for low-SNR demodulation."""

from .exceptions import FormatError, LoRaFlowError, NumericError, ParameterError, ShapeError, TruncationError
from .modem import LoRaParams, add_awgn, dechirp_demod, modulate_symbol, symbol_error_rate

__version__ = "0.1.0"

__all__ = [
    "FormatError", "LoRaFlowError", "NumericError", "ParameterError", "ShapeError", "TruncationError",
    "LoRaParams", "add_awgn", "dechirp_demod", "modulate_symbol", "symbol_error_rate",
]
