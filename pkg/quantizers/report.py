"""
Angular error diagnostics for vector quantizers
"""

import logging
from typing import Dict, List, Sequence, Tuple

import numpy as np

from tensor_core import Tensor

from quantizers.base import QuantizationError
from quantizers.mddq import MddqParams, direction_params, mddq_quantize
from quantizers.naive import naive_vec_quantize
from quantizers.uniform import observe_calibrate


logger = logging.getLogger('EquiQuant.Quantizers.Report')

DEFAULT_MAGNITUDES = (0.1, 2.0)


def sample_vectors(n_samples: int, seed: int,
                   magnitudes: Tuple[float, float] = DEFAULT_MAGNITUDES) -> np.ndarray:
    """Isotropic directions with uniformly distributed lengths"""
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(n_samples, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    lengths = rng.uniform(magnitudes[0], magnitudes[1], size=(n_samples, 1))
    return (directions * lengths).astype(np.float32)


def angular_stats(original: np.ndarray, quantized: np.ndarray) -> Tuple[float, float]:
    """Mean cosine and mean angle (degrees); a collapsed vector counts as 90 degrees"""
    a = original.astype(np.float64)
    b = quantized.astype(np.float64)
    norms = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    cosine = np.zeros(len(a))
    alive = norms > 0
    cosine[alive] = np.clip(np.sum(a[alive] * b[alive], axis=1) / norms[alive], -1.0, 1.0)
    return float(cosine.mean()), float(np.degrees(np.arccos(cosine)).mean())


def quantize_naive(h: np.ndarray, bits: int) -> np.ndarray:
    p = observe_calibrate([h], signed=True, bits=bits)
    return naive_vec_quantize(Tensor(h), p).data


def quantize_mddq(h: np.ndarray, bits: int) -> np.ndarray:
    mag = observe_calibrate([np.linalg.norm(h, axis=1)], signed=False, bits=bits)
    return mddq_quantize(Tensor(h), MddqParams(mag=mag, dir=direction_params(bits))).data


QUANTIZERS = {
    'naive': quantize_naive,
    'mddq': quantize_mddq,
}


def angular_error_report(bits: Sequence[int], n_samples: int, seed: int,
                         magnitudes: Tuple[float, float] = DEFAULT_MAGNITUDES) -> List[Dict]:
    """
    Mean angle and cosine between random vectors and their quantized versions

    Each quantizer is calibrated on the sample itself (max |component| for the
    per-component grid, max norm for the magnitude grid).

    Args:
        bits: Bit-widths to evaluate, each in [2, 8]
        n_samples: Number of random vectors
        seed: Sampling seed
        magnitudes: Range of vector lengths

    Returns:
        One row per (bits, quantizer)
    """
    for b in bits:
        if not 2 <= b <= 8:
            raise QuantizationError(f"bits must lie in [2, 8], got {b}")
    if n_samples == 0:
        return []

    h = sample_vectors(n_samples, seed, magnitudes)
    rows = []
    for b in bits:
        for kind, quantize in QUANTIZERS.items():
            cosine, angle = angular_stats(h, quantize(h, b))
            rows.append({
                'bits': int(b),
                'quantizer': kind,
                'n_samples': int(n_samples),
                'mean_cosine': cosine,
                'mean_angle_deg': angle,
            })
            logger.debug(f"{kind} {b}-bit: cosine {cosine:.6f}, angle {angle:.3f} deg")
    return rows
