"""SVIPTR text-recognition backbone on numpy, with numba-accelerated kernels."""
from .backbone import REGISTRY, SVIPTR, VariantConfig, build_model, count_params, variant
from .ctc import Alphabet, ctc_loss, greedy_decode
from .flops import count_flops
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["REGISTRY", "SVIPTR", "VariantConfig", "build_model", "count_params", "variant",
           "Alphabet", "ctc_loss", "greedy_decode", "count_flops", "BACKEND"]
