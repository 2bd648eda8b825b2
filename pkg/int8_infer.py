"""
Integer inference for EquiQuant
Int8/int4 linear kernels with 32-bit accumulation, checkpoint conversion, the
k-bit cost model and latency/memory benchmarks
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from checkpoint import Checkpoint
from geometry import MolGraph
from model import (EquivariantTransformer, ModelConfig, ModelError, QuantLinear, load_model,
                   resolve_scheme)
from quantizers import (ON, BaseQuantizer, MddqParams, QuantizationError, QuantParams,
                        dequantize_array, quantize_array)
from quantizers.mddq import ZERO_VECTOR_THRESHOLD
from tensor_core import L2_EPS, Tensor, round_half_away, squared_norm


logger = logging.getLogger('EquiQuant.Int8Infer')

ACCUMULATOR_LIMIT = 2 ** 31
# Largest slope of silu, used to bound how far one output step moves the energy head
SILU_MAX_SLOPE = 1.0998
WARMUP_RUNS = 10
COST_BITS = (4, 8, 16, 32)


@dataclass
class QLinear:
    """
    Integer dense layer y = requant(x_int @ W_int + b_int)

    Weights hold 8- or 4-bit codes in signed bytes with per-output-channel
    scales; the bias sits on the in_scale * w_scale accumulator grid.
    """
    name: str
    weight: np.ndarray
    weight_params: QuantParams
    in_params: QuantParams
    out_params: QuantParams
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.int8)
        if self.weight.min(initial=0) < self.weight_params.qmin or self.weight.max(initial=0) > self.weight_params.qmax:
            raise QuantizationError(f"{self.name}: weight codes outside the {self.weight_params.bits}-bit range")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.int64)
        multiplier = self.multiplier
        if not np.all(np.isfinite(multiplier)) or np.any(multiplier <= 0):
            raise QuantizationError(f"{self.name}: requantization multiplier must be finite and positive")
        in_peak = max(abs(self.in_params.qmin), self.in_params.qmax)
        w_peak = max(abs(self.weight_params.qmin), self.weight_params.qmax)
        bias_peak = 0 if self.bias is None else int(np.abs(self.bias).max(initial=0))
        worst = self.weight.shape[0] * in_peak * w_peak + bias_peak
        if worst >= ACCUMULATOR_LIMIT:
            raise QuantizationError(f"{self.name}: worst-case accumulator {worst} does not fit in int32")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def multiplier(self) -> np.ndarray:
        """Per-output-channel in_scale * w_scale / out_scale"""
        return (np.float64(self.in_params.scale) * self.weight_params.scale.astype(np.float64)
                / np.float64(self.out_params.scale))


def qlinear_forward(x_int: np.ndarray, layer: QLinear) -> np.ndarray:
    """
    Integer linear layer with int32 accumulation and requantization

    Args:
        x_int: Input codes on the layer's input grid [..., in]
        layer: Integer layer

    Returns:
        Output codes on the layer's output grid [..., out]
    """
    acc = np.matmul(np.asarray(x_int, dtype=np.int32), layer.weight.astype(np.int32))
    if layer.bias is not None:
        acc = acc + layer.bias.astype(np.int32)
    y = round_half_away(acc.astype(np.float64) * layer.multiplier)
    return np.clip(y, layer.out_params.qmin, layer.out_params.qmax).astype(np.int32)


def quantize_linear(linear: QuantLinear) -> QLinear:
    """Integer realization of a frozen fake-quantized linear layer"""
    quantizers = (linear.act_in, linear.weight_q, linear.act_out)
    if not linear.quantized or not all(q.frozen for q in quantizers):
        raise QuantizationError(f"{linear.name}: missing frozen QuantParams")
    weight_params = linear.weight_q.params()
    in_params = linear.act_in.params()
    bias = None
    if linear.bias is not None:
        scale = linear.act_in.step.data * linear.weight_q.step.data
        bias = round_half_away(linear.bias.data / scale)
        if np.abs(bias).max(initial=0) >= ACCUMULATOR_LIMIT:
            raise QuantizationError(f"{linear.name}: folded bias exceeds the int32 range")
        bias = bias.astype(np.int64)
    return QLinear(linear.name, quantize_array(linear.weight.data, weight_params), weight_params,
                   in_params, linear.act_out.params(), bias)


class IntegerLinear:
    """Runs a QLinear in place of a fake-quantized linear; inputs and outputs stay dequantized floats"""

    def __init__(self, layer: QLinear):
        self.layer = layer
        self.name = layer.name

    @property
    def quantized(self) -> bool:
        return True

    def __call__(self, x: Tensor) -> Tensor:
        codes = quantize_array(x.data, self.layer.in_params)
        return Tensor(dequantize_array(qlinear_forward(codes, self.layer), self.layer.out_params))

    def parameters(self) -> List[Tensor]:
        return []

    def quantizers(self) -> Dict[str, BaseQuantizer]:
        return {}


class _FrozenInteger(BaseQuantizer):
    """Inference-only quantizer: always on, nothing to observe or learn"""

    def __init__(self, name: str, bits: int, signed: bool):
        super().__init__(name, bits, signed)
        self.frozen = True
        self.state = ON

    def observe(self, data: np.ndarray):
        raise QuantizationError(f"{self.name}: integer quantizers cannot observe")

    def freeze(self):
        pass

    def parameters(self) -> List[Tensor]:
        return []


class IntegerMddq(_FrozenInteger):
    """
    MDDQ on the integer path

    Magnitudes and direction components are stored as integer codes; the
    quantized direction is renormalized in 32-bit float.
    """

    float_ops = ('renormalize',)

    def __init__(self, name: str, mp: MddqParams):
        super().__init__(name, mp.mag.bits, signed=False)
        self.mp = mp

    def encode(self, h: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Integer magnitude codes [..., 1] and direction codes [..., 3]"""
        h = np.asarray(h, dtype=np.float32)
        zero = np.sqrt(squared_norm(h)) < ZERO_VECTOR_THRESHOLD
        r = np.sqrt(squared_norm(h) + L2_EPS)
        mag = quantize_array(r, self.mp.mag)
        mag[zero] = 0
        return mag, quantize_array(h / r, self.mp.dir)

    def decode(self, h: np.ndarray, mag: np.ndarray, codes: np.ndarray) -> np.ndarray:
        h = np.asarray(h, dtype=np.float32)
        d = dequantize_array(codes, self.mp.dir)
        collapsed = np.sqrt(squared_norm(d)) < ZERO_VECTOR_THRESHOLD
        direction = d / np.sqrt(squared_norm(d) + L2_EPS)
        if np.any(collapsed):
            direction = np.where(collapsed, h / np.sqrt(squared_norm(h) + L2_EPS), direction)
        return dequantize_array(mag, self.mp.mag) * direction

    def forward(self, x: Tensor) -> Tensor:
        mag, codes = self.encode(x.data)
        return Tensor(self.decode(x.data, mag, codes))

    def params(self) -> MddqParams:
        return self.mp

    def get_name(self) -> str:
        return 'mddq'


class IntegerVector(_FrozenInteger):
    """Per-component integer codes for the naive vector scheme"""

    float_ops = ()

    def __init__(self, name: str, p: QuantParams):
        super().__init__(name, p.bits, signed=True)
        self.p = p

    def forward(self, x: Tensor) -> Tensor:
        return Tensor(dequantize_array(quantize_array(x.data, self.p), self.p))

    def params(self) -> QuantParams:
        return self.p

    def get_name(self) -> str:
        return 'naive'


def _weight_dtype(p: QuantParams) -> str:
    return 'i4' if p.bits <= 4 else 'i8'


def convert(ckpt: Checkpoint) -> Checkpoint:
    """
    Convert a trained fake-quantized checkpoint into an integer checkpoint

    Quantized linear weights become i8/i4 codes, biases are folded to i32 on the
    accumulator grid, the embedding, vector gates and readout heads stay FP32, and
    vector quantizers keep only their frozen parameters.

    Args:
        ckpt: Checkpoint written by save_model

    Returns:
        Integer checkpoint (an identical copy for FP32 checkpoints)
    """
    if ckpt.config.get('integer'):
        raise QuantizationError("Checkpoint is already converted")
    scheme = resolve_scheme(ckpt.config.get('scheme', 'fp32'))
    if not (scheme.quantizes_scalars or scheme.quantizes_vectors):
        logger.info("FP32 checkpoint: conversion is a copy")
        return Checkpoint(dict(ckpt.tensors), dict(ckpt.config))

    model = load_model(ckpt)
    missing = [name for name, q in model.quantizers().items() if not q.frozen]
    if missing:
        logger.error(f"Cannot convert: {len(missing)} quantizers were never frozen")
        raise QuantizationError(f"Missing frozen QuantParams for {', '.join(sorted(missing))}")

    out = Checkpoint(config={**ckpt.config, 'integer': True})
    linear_params = set()
    for name, linear in model.linears.items():
        linear_params.update(p.name for p in linear.parameters())
        if not linear.quantized:
            for p in linear.parameters():
                out.add(p.name, p.data)
            continue
        layer = quantize_linear(linear)
        out.add(f"{name}.weight", layer.weight, _weight_dtype(layer.weight_params), layer.weight_params)
        if layer.bias is not None:
            out.add(f"{name}.bias", layer.bias, 'i32')
        out.add(f"{name}.act_in", layer.in_params.scale, quant=layer.in_params)
        out.add(f"{name}.act_out", layer.out_params.scale, quant=layer.out_params)

    for name, p in model.named_parameters().items():
        if name not in linear_params:
            out.add(name, p.data)

    for point, q in model.vector_quantizers.items():
        if q.get_name() == 'mddq':
            mp = q.params()
            out.add(f"{point}.mag", mp.mag.scale, quant=mp.mag)
            out.add(f"{point}.dir", mp.dir.scale, quant=mp.dir)
        else:
            p = q.params()
            out.add(f"{point}.step", p.scale, quant=p)

    n_integer = sum(1 for linear in model.linears.values() if linear.quantized)
    logger.info(f"Converted {scheme.name} checkpoint: {n_integer} integer linears, "
                f"{len(model.vector_quantizers)} vector points")
    return out


def _qlinear_from_checkpoint(ckpt: Checkpoint, name: str) -> QLinear:
    weight = ckpt.get(f"{name}.weight")
    bias = ckpt.get(f"{name}.bias").array if f"{name}.bias" in ckpt else None
    return QLinear(name, weight.array, weight.quant, ckpt.get(f"{name}.act_in").quant,
                   ckpt.get(f"{name}.act_out").quant, bias)


def load_integer_model(ckpt: Checkpoint) -> EquivariantTransformer:
    """Model whose quantized linears and vector points run the integer path"""
    config = ckpt.config
    if not config.get('integer'):
        if resolve_scheme(config.get('scheme', 'fp32')).name == 'fp32':
            return load_model(ckpt)
        raise QuantizationError("Checkpoint has not been converted to integer form")
    if 'model' not in config:
        raise ModelError("Checkpoint carries no model config")

    model = EquivariantTransformer(ModelConfig(**config['model']), 'fp32', seed=config.get('seed', 0))
    model.scheme = resolve_scheme(config['scheme'])
    norm = config.get('normalization', {})
    model.energy_shift = float(norm.get('energy_shift', 0.0))
    model.energy_scale = float(norm.get('energy_scale', 1.0))
    model.force_scale = float(norm.get('force_scale', 1.0))

    for name in list(model.linears):
        if ckpt.get(f"{name}.weight").dtype in ('i8', 'i4'):
            model.linears[name] = IntegerLinear(_qlinear_from_checkpoint(ckpt, name))
    for name, p in model.named_parameters().items():
        entry = ckpt.get(name)
        if entry.array.shape != p.shape:
            raise ModelError(f"{name}: checkpoint shape {entry.array.shape} != model shape {p.shape}")
        p.data = np.array(entry.array, dtype=np.float32)
    for point in model.vector_points():
        if f"{point}.mag" in ckpt:
            mp = MddqParams(mag=ckpt.get(f"{point}.mag").quant, dir=ckpt.get(f"{point}.dir").quant)
            model.vector_quantizers[point] = IntegerMddq(point, mp)
        elif f"{point}.step" in ckpt:
            model.vector_quantizers[point] = IntegerVector(point, ckpt.get(f"{point}.step").quant)
    return model


def float_ops(model: EquivariantTransformer) -> List[str]:
    """Points of an integer model that still execute in float besides the FP32 heads"""
    return [f"{point}.{op}" for point, q in model.vector_quantizers.items()
            for op in getattr(q, 'float_ops', ())]


def energy_output_step(model: EquivariantTransformer, n_atoms: int) -> float:
    """
    Energy change (eV) bounded by a one-step move of the last quantized scalar activation

    Every channel of every atom moves by one output step of the last scalar
    update; the bound propagates that through the FP32 energy head.
    """
    last = model.linears[f"layer{model.config.n_layers - 1}.mlp2"]
    if isinstance(last, IntegerLinear):
        step = float(last.layer.out_params.scale)
    elif isinstance(last, QuantLinear) and last.quantized and last.act_out.frozen:
        step = float(last.act_out.step.data)
    else:
        raise QuantizationError("Energy output step needs a quantized scalar branch")
    hidden = step * np.abs(model.head1.data).sum(axis=0) * SILU_MAX_SLOPE
    per_atom = float(hidden @ np.abs(model.head2.data[:, 0])) * abs(model.energy_scale)
    return n_atoms * per_atom


@dataclass
class MemoryReport:
    """Bytes of quantized tensors (codes + per-channel scales) against their FP32 size"""
    rows: List[dict] = field(default_factory=list)
    quantized_bytes: int = 0
    fp32_bytes: int = 0
    total_bytes: int = 0

    @property
    def ratio(self) -> float:
        return self.quantized_bytes / self.fp32_bytes if self.fp32_bytes else 1.0


def memory_table(ckpt: Checkpoint) -> MemoryReport:
    report = MemoryReport()
    for entry in ckpt.tensors.values():
        report.total_bytes += entry.data_nbytes + entry.scale_nbytes
        if entry.dtype not in ('i8', 'i4') or entry.quant is None:
            continue
        size = entry.data_nbytes + entry.scale_nbytes
        fp32 = 4 * entry.array.size
        report.rows.append({'tensor': entry.name, 'dtype': entry.dtype, 'bytes': size,
                            'fp32_bytes': fp32, 'ratio': size / fp32})
        report.quantized_bytes += size
        report.fp32_bytes += fp32
    return report


@dataclass(frozen=True)
class CostModel:
    """Problem size for the asymptotic cost table"""
    n: int
    mean_neighbors: float
    F: int
    l_max: int = 1
    bits: int = 32

    def __post_init__(self):
        if self.bits not in COST_BITS:
            raise ValueError(f"bits must be one of {COST_BITS}, got {self.bits}")
        if not 0 <= self.l_max <= 3:
            raise ValueError(f"l_max must lie in [0, 3], got {self.l_max}")
        if self.n <= 0 or self.mean_neighbors <= 0 or self.F <= 0:
            raise ValueError("n, mean_neighbors and F must be positive")


# Per-edge cost of one interaction for each architecture family
ARCHITECTURES = {
    'schnet': lambda F, l: F,
    'painn': lambda F, l: 4 * F,
    'spookynet': lambda F, l: (l + 1) ** 2 * F,
    'nequip': lambda F, l: (l + 1) ** 6 * F,
    'so3krates': lambda F, l: (l + 1) ** 2 + F,
}


@dataclass(frozen=True)
class CostResult:
    arch: str
    full: float
    rho: float
    speedup: float

    @property
    def quantized(self) -> float:
        return self.full * self.rho


def theoretical_cost(cm: CostModel, arch: str) -> CostResult:
    """
    Asymptotic interaction cost at full precision and the k-bit ratios

    Returns:
        CostResult with full = n * <N> * per-edge term, rho = k/32 and speedup = 32/k
    """
    key = arch.lower()
    if key not in ARCHITECTURES:
        logger.error(f"Unknown architecture: {arch}")
        raise ValueError(f"Unknown architecture '{arch}' (available: {', '.join(ARCHITECTURES)})")
    full = cm.n * cm.mean_neighbors * ARCHITECTURES[key](cm.F, cm.l_max)
    return CostResult(arch=key, full=float(full), rho=cm.bits / 32, speedup=32 / cm.bits)


@dataclass
class BenchReport:
    latency: List[dict] = field(default_factory=list)
    memory: List[dict] = field(default_factory=list)
    float_ops: Dict[str, List[str]] = field(default_factory=dict)


def time_forward(model: EquivariantTransformer, graph: MolGraph, n_runs: int,
                 warmup: int = WARMUP_RUNS) -> np.ndarray:
    """Per-run forward latency in microseconds, warm-up runs excluded"""
    batch = model.batch(graph)
    for _ in range(warmup):
        model.forward(batch)
    times = np.empty(n_runs)
    for k in range(n_runs):
        start = time.perf_counter_ns()
        model.forward(batch)
        times[k] = (time.perf_counter_ns() - start) / 1000.0
    return times


def bench(variants: Dict[str, EquivariantTransformer], graph: MolGraph, n_runs: int = 1000,
          checkpoints: Optional[Dict[str, Checkpoint]] = None,
          baseline: Optional[str] = None) -> BenchReport:
    """
    Latency of each variant on one molecule plus memory of each checkpoint

    Args:
        variants: Name -> model
        graph: Molecule to run
        n_runs: Timed runs per variant (after 10 warm-up runs)
        checkpoints: Name -> checkpoint for the memory table
        baseline: Variant the speedups are relative to (first variant by default)

    Returns:
        BenchReport with median/mean microseconds and speedup t_baseline / t_variant
    """
    if n_runs < 1:
        raise ValueError(f"n_runs must be at least 1, got {n_runs}")
    if not variants:
        raise ValueError("bench needs at least one variant")
    baseline = baseline or next(iter(variants))
    timings = {name: time_forward(model, graph, n_runs) for name, model in variants.items()}
    reference = float(np.median(timings[baseline]))

    report = BenchReport()
    for name, times in timings.items():
        median = float(np.median(times))
        report.latency.append({'variant': name, 'runs': n_runs, 'median_us': median,
                               'mean_us': float(np.mean(times)), 'speedup': reference / median})
        report.float_ops[name] = float_ops(variants[name])
        logger.info(f"{name}: median {median:.1f} µs over {n_runs} runs")
    for name, ckpt in (checkpoints or {}).items():
        memory = memory_table(ckpt)
        report.memory.append({'variant': name, 'quantized_bytes': memory.quantized_bytes,
                              'fp32_bytes': memory.fp32_bytes, 'ratio': memory.ratio,
                              'total_bytes': memory.total_bytes})
    return report
