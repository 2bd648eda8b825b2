"""
Two-branch SO(3)-equivariant graph transformer for EquiQuant
Invariant scalar channels and equivariant vector channels, cosine-normalized neighbor
attention, and branch-separated quantizer attachment points
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import tensor_core as tc
from geometry import GraphBatch, MolGraph
from checkpoint import Checkpoint, save_checkpoint
from quantizers import (ON, BaseQuantizer, MddqParams, QuantizationError, QuantizerFactory,
                        fake_quantize_bias)
from tensor_core import Tensor


logger = logging.getLogger('EquiQuant.Model')

QK_EPS = 1e-6


class ModelError(ValueError):
    """Raised on inputs the model cannot embed or evaluate"""


@dataclass
class ModelConfig:
    """Architecture hyperparameters"""
    F0: int = 32
    F1: int = 32
    n_layers: int = 3
    n_rbf: int = 16
    cutoff: float = 5.0
    d_attn: int = 32
    n_species: int = 10
    attn_norm: bool = True

    def __post_init__(self):
        for name in ('F0', 'F1', 'n_layers', 'n_rbf', 'd_attn', 'n_species'):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.cutoff <= 0:
            raise ValueError(f"cutoff must be positive, got {self.cutoff}")


@dataclass(frozen=True)
class Scheme:
    """Which branches are quantized and with which bit-widths"""
    name: str
    weight_bits: Optional[int] = None
    act_bits: Optional[int] = None
    vector: Optional[str] = None
    vector_bits: int = 8

    @property
    def quantizes_scalars(self) -> bool:
        return self.weight_bits is not None

    @property
    def quantizes_vectors(self) -> bool:
        return self.vector is not None


SCHEMES = {
    'fp32': Scheme('fp32'),
    'int8-scalar-only': Scheme('int8-scalar-only', weight_bits=8, act_bits=8),
    'int8-full': Scheme('int8-full', weight_bits=8, act_bits=8, vector='mddq'),
    'w4a8': Scheme('w4a8', weight_bits=4, act_bits=8, vector='mddq'),
    'int8-vector-only': Scheme('int8-vector-only', vector='mddq'),
    'int8-naive-vec': Scheme('int8-naive-vec', weight_bits=8, act_bits=8, vector='naive'),
}
SCHEME_ALIASES = {'int8-scalar': 'int8-scalar-only'}


def resolve_scheme(name: str) -> Scheme:
    key = SCHEME_ALIASES.get(name, name)
    if key not in SCHEMES:
        raise QuantizationError(f"Unknown scheme '{name}' (available: {', '.join(SCHEMES)})")
    return SCHEMES[key]


@dataclass
class NodeFeatures:
    """Per-atom invariant scalars h0 [N, F0] and equivariant vectors h1 [N, F1, 3]"""
    h0: Tensor
    h1: Tensor


@dataclass
class ModelOutput:
    energy: Tensor
    forces: Tensor
    features: List[NodeFeatures] = field(default_factory=list)


class QuantLinear:
    """Dense layer x @ W (+ b) with optional input, weight and output fake quantizers"""

    def __init__(self, name: str, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = False, in_signed: bool = True):
        self.name = name
        self.in_signed = in_signed
        self.weight = Tensor.parameter(rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(in_dim, out_dim)),
                                       name=f"{name}.weight")
        self.bias = Tensor.parameter(np.zeros(out_dim), name=f"{name}.bias") if bias else None
        self.act_in: Optional[BaseQuantizer] = None
        self.weight_q: Optional[BaseQuantizer] = None
        self.act_out: Optional[BaseQuantizer] = None

    def attach(self, weight_bits: int, act_bits: int):
        self.act_in = QuantizerFactory.create('uniform', f"{self.name}.act_in", bits=act_bits,
                                              signed=self.in_signed)
        self.weight_q = QuantizerFactory.create('uniform', f"{self.name}.weight_q", bits=weight_bits,
                                                channel_axis=-1, n_channels=self.weight.shape[1])
        self.act_out = QuantizerFactory.create('uniform', f"{self.name}.act_out", bits=act_bits)

    @property
    def quantized(self) -> bool:
        return self.weight_q is not None

    def __call__(self, x: Tensor) -> Tensor:
        if not self.quantized:
            y = tc.matmul(x, self.weight)
            return y if self.bias is None else tc.add(y, self.bias)
        y = tc.matmul(self.act_in(x), self.weight_q(self.weight))
        if self.bias is not None:
            bias = self.bias
            if self.act_in.state == ON and self.weight_q.state == ON:
                bias = fake_quantize_bias(bias, self.act_in.step.data * self.weight_q.step.data)
            y = tc.add(y, bias)
        return self.act_out(y)

    def parameters(self) -> List[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def quantizers(self) -> Dict[str, BaseQuantizer]:
        if not self.quantized:
            return {}
        return {q.name: q for q in (self.act_in, self.weight_q, self.act_out)}


def attention_weights(q: Tensor, k: Tensor, edge_bias: Tensor, senders: np.ndarray,
                      receivers: np.ndarray, n_atoms: int,
                      normalize: bool = True) -> Tuple[Tensor, Tensor]:
    """
    Softmax attention of each atom over its neighbors

    Queries and keys are scaled to unit length (plus 1e-6 in the denominator) so the
    weights depend only on their directions. logit_ij = q_i . k_j / sqrt(d) + bias_ij.

    Args:
        q: Queries [N, d]
        k: Keys [N, d]
        edge_bias: Invariant per-edge bias [E]
        senders: Neighbor index j per edge
        receivers: Attending atom i per edge
        n_atoms: Number of atoms N
        normalize: Cosine-normalize queries and keys

    Returns:
        (alpha [E] summing to 1 per receiver, q.k term [E] before scaling)
    """
    if normalize:
        q = tc.div(q, tc.add(tc.l2norm(q), QK_EPS))
        k = tc.div(k, tc.add(tc.l2norm(k), QK_EPS))
    similarity = tc.sum(tc.mul(tc.gather(q, receivers), tc.gather(k, senders)), axis=-1)
    logits = tc.add(tc.mul(similarity, 1.0 / math.sqrt(q.shape[-1])), edge_bias)
    return tc.softmax_neighbors(logits, receivers, n_atoms), similarity


class EquivariantTransformer:
    """
    Embedding, n_layers two-branch attention layers and FP32 readout heads

    Quantized linears and vector quantizers are looked up by name on every
    forward pass, so the integer path can swap them in place.
    """

    def __init__(self, config: ModelConfig, scheme: str = 'fp32', seed: int = 0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        c = config

        self.embedding = Tensor.parameter(rng.normal(size=(c.n_species, c.F0)), name='embedding')
        self.linears: Dict[str, QuantLinear] = {}
        self.gate_weight: List[Tensor] = []
        self.gate_bias: List[Tensor] = []
        for layer in range(c.n_layers):
            prefix = f"layer{layer}"
            self._linear(f"{prefix}.wq", c.F0, c.d_attn, rng)
            self._linear(f"{prefix}.wk", c.F0, c.d_attn, rng)
            self._linear(f"{prefix}.wb", c.n_rbf, 1, rng, in_signed=False)
            self._linear(f"{prefix}.wv", c.F0, c.F0, rng)
            self._linear(f"{prefix}.mlp1", c.F0 + c.F1, c.F0, rng)
            self._linear(f"{prefix}.mlp2", c.F0, c.F0, rng)
            self._linear(f"{prefix}.gate", c.F0 + c.n_rbf, 2 * c.F1, rng, bias=True)
            self.gate_weight.append(Tensor.parameter(np.ones((c.F1, 1)), name=f"{prefix}.vec_gate.weight"))
            self.gate_bias.append(Tensor.parameter(np.zeros((c.F1, 1)), name=f"{prefix}.vec_gate.bias"))

        self.head1 = Tensor.parameter(rng.normal(0, 1 / math.sqrt(c.F0), size=(c.F0, c.F0)), name='head.w1')
        self.head1_bias = Tensor.parameter(np.zeros(c.F0), name='head.b1')
        self.head2 = Tensor.parameter(rng.normal(0, 1 / math.sqrt(c.F0), size=(c.F0, 1)), name='head.w2')
        self.head2_bias = Tensor.parameter(np.zeros(1), name='head.b2')
        self.force_head = Tensor.parameter(rng.normal(0, 1 / math.sqrt(c.F1), size=(c.F1, 1)),
                                           name='force_head.weight')

        # Target normalization, fitted from training data
        self.energy_shift = 0.0
        self.energy_scale = 1.0
        self.force_scale = 1.0

        self.vector_quantizers: Dict[str, BaseQuantizer] = {}
        self.scheme = resolve_scheme('fp32')
        self.attach_quantizers(scheme)

    def _linear(self, name: str, in_dim: int, out_dim: int, rng: np.random.Generator, **kwargs):
        self.linears[name] = QuantLinear(name, in_dim, out_dim, rng, **kwargs)

    def vector_points(self) -> List[str]:
        """Vector activations that carry a quantizer (layer-0 input is identically zero)"""
        points = []
        for layer in range(self.config.n_layers):
            if layer > 0:
                points.append(f"layer{layer}.h1_in")
            points.append(f"layer{layer}.m1")
        points.append('h1_out')
        return points

    def attach_quantizers(self, scheme: str) -> Dict[str, List[str]]:
        """
        Attach fake quantizers for a scheme

        Scalar-branch linears get symmetric weight and activation quantizers,
        vector activations get MDDQ (or the per-component baseline), and the
        embedding and readout heads stay FP32.

        Returns:
            Attachment description: point name -> quantizer kinds
        """
        target = resolve_scheme(scheme)
        if self.scheme.name != 'fp32' and target.name != self.scheme.name:
            raise QuantizationError(f"Model already carries scheme {self.scheme.name}")
        self.scheme = target
        if target.quantizes_scalars:
            for linear in self.linears.values():
                linear.attach(target.weight_bits, target.act_bits)
        if target.quantizes_vectors:
            for point in self.vector_points():
                self.vector_quantizers[point] = QuantizerFactory.create(target.vector, point, bits=target.vector_bits)
        description = describe_quantizers(self)
        logger.info(f"Scheme {target.name}: {sum(len(v) for v in description.values())} quantizers attached")
        return description

    def scalar_quantizers(self) -> Dict[str, BaseQuantizer]:
        found = {}
        for linear in self.linears.values():
            if hasattr(linear, 'quantizers'):
                found.update(linear.quantizers())
        return found

    def quantizers(self) -> Dict[str, BaseQuantizer]:
        return {**self.scalar_quantizers(), **self.vector_quantizers}

    def set_quant_state(self, branch: str, state: str):
        """Set every quantizer of a branch ('scalar' or 'vector') to a state"""
        group = self.scalar_quantizers() if branch == 'scalar' else self.vector_quantizers
        for q in group.values():
            q.set_state(state)

    def freeze(self, branch: str):
        group = self.scalar_quantizers() if branch == 'scalar' else self.vector_quantizers
        for q in group.values():
            q.freeze()

    def named_parameters(self) -> Dict[str, Tensor]:
        params = {'embedding': self.embedding}
        for linear in self.linears.values():
            if isinstance(linear, QuantLinear):
                for p in linear.parameters():
                    params[p.name] = p
        for p in self.gate_weight + self.gate_bias:
            params[p.name] = p
        for p in (self.head1, self.head1_bias, self.head2, self.head2_bias, self.force_head):
            params[p.name] = p
        return params

    def parameters(self) -> List[Tensor]:
        """Trainable tensors: FP32 shadow weights and learned step sizes"""
        steps = [p for q in self.quantizers().values() for p in q.parameters()]
        return list(self.named_parameters().values()) + steps

    def fit_normalization(self, graphs: Sequence[MolGraph]):
        """Per-atom energy shift, energy scale and force scale from reference data"""
        per_atom = np.array([g.ref_energy / g.n_atoms for g in graphs])
        forces = np.concatenate([g.ref_forces for g in graphs])
        self.energy_shift = float(per_atom.mean())
        self.energy_scale = float(per_atom.std()) or 1.0
        self.force_scale = float(np.sqrt(np.mean(forces ** 2))) or 1.0
        logger.debug(f"Normalization: shift {self.energy_shift:.4f} eV/atom, "
                     f"energy scale {self.energy_scale:.4f}, force scale {self.force_scale:.4f}")

    def _vector_quant(self, point: str, h: Tensor) -> Tensor:
        q = self.vector_quantizers.get(point)
        return h if q is None else q(h)

    def embed(self, species: np.ndarray) -> NodeFeatures:
        species = np.asarray(species, dtype=np.int64)
        if species.size and (species.min() < 0 or species.max() >= self.config.n_species):
            bad = species[(species < 0) | (species >= self.config.n_species)][0]
            raise ModelError(f"Unknown species {bad} (embedding has {self.config.n_species} entries)")
        h0 = tc.gather(self.embedding, species)
        h1 = Tensor(np.zeros((len(species), self.config.F1, 3)))
        return NodeFeatures(h0, h1)

    def layer_forward(self, layer: int, features: NodeFeatures, batch: GraphBatch) -> NodeFeatures:
        """One attention layer updating both branches with residual connections"""
        c = self.config
        prefix = f"layer{layer}"
        lin = self.linears
        n = batch.n_atoms
        senders, receivers = batch.senders, batch.receivers
        n_edges = len(senders)
        h0 = features.h0
        h1 = self._vector_quant(f"{prefix}.h1_in", features.h1)

        edge_bias = tc.reshape(lin[f"{prefix}.wb"](Tensor(batch.rbf)), (n_edges,))
        alpha, _ = attention_weights(lin[f"{prefix}.wq"](h0), lin[f"{prefix}.wk"](h0), edge_bias,
                                     senders, receivers, n, normalize=c.attn_norm)

        # Invariant branch
        values = tc.gather(lin[f"{prefix}.wv"](h0), senders)
        m0 = tc.scatter_add(tc.mul(values, tc.reshape(alpha, (n_edges, 1))), receivers, n)
        norms_sq = tc.sum(tc.mul(h1, h1), axis=-1)
        hidden = tc.silu(lin[f"{prefix}.mlp1"](tc.concat([m0, norms_sq], axis=-1)))
        h0_next = tc.add(h0, lin[f"{prefix}.mlp2"](hidden))

        # Equivariant branch
        gates = lin[f"{prefix}.gate"](tc.concat([tc.gather(h0, senders), Tensor(batch.rbf)], axis=-1))
        s = tc.reshape(tc.slice_last(gates, 0, c.F1), (n_edges, c.F1, 1))
        t = tc.reshape(tc.slice_last(gates, c.F1, 2 * c.F1), (n_edges, c.F1, 1))
        directions = Tensor(batch.unit_vectors.reshape(n_edges, 1, 3))
        message = tc.add(tc.mul(s, directions), tc.mul(t, tc.gather(h1, senders)))
        m1 = tc.scatter_add(tc.mul(message, tc.reshape(alpha, (n_edges, 1, 1))), receivers, n)
        m1 = self._vector_quant(f"{prefix}.m1", m1)
        gate = tc.silu(tc.add(tc.mul(tc.l2norm(m1), self.gate_weight[layer]), self.gate_bias[layer]))
        h1_next = tc.add(h1, tc.mul(m1, gate))
        return NodeFeatures(h0_next, h1_next)

    def forward(self, batch: GraphBatch, keep_features: bool = False) -> ModelOutput:
        """
        Energies per molecule (eV) and forces per atom (eV/Å)

        Energy sums a per-atom scalar head over h0; forces are a channel-mixing
        linear map of h1 with no bias.
        """
        if batch.n_atoms == 0:
            raise ModelError("Cannot evaluate an empty graph")
        features = self.embed(batch.species)
        kept = [features] if keep_features else []
        for layer in range(self.config.n_layers):
            features = self.layer_forward(layer, features, batch)
            if keep_features:
                kept.append(features)

        hidden = tc.silu(tc.add(tc.matmul(features.h0, self.head1), self.head1_bias))
        atom_energy = tc.add(tc.mul(tc.add(tc.matmul(hidden, self.head2), self.head2_bias),
                                    self.energy_scale), self.energy_shift)
        energy = tc.reshape(tc.scatter_add(atom_energy, batch.graph_index, batch.n_graphs), (batch.n_graphs,))

        h1 = self._vector_quant('h1_out', features.h1)
        mixed = tc.sum(tc.mul(h1, tc.reshape(self.force_head, (1, self.config.F1, 1))), axis=1)
        forces = tc.mul(mixed, self.force_scale)
        return ModelOutput(energy, forces, kept)

    def batch(self, graphs: Union[MolGraph, Sequence[MolGraph]]) -> GraphBatch:
        graphs = [graphs] if isinstance(graphs, MolGraph) else list(graphs)
        return GraphBatch.from_graphs(graphs, self.config.n_rbf, self.config.cutoff)

    def predict(self, graphs: Union[MolGraph, Sequence[MolGraph]]) -> Tuple[np.ndarray, np.ndarray]:
        """Numpy energies [n_graphs] and forces [n_atoms, 3] without recording a tape"""
        out = self.forward(self.batch(graphs))
        return out.energy.data.copy(), out.forces.data.copy()


def describe_quantizers(model: EquivariantTransformer) -> Dict[str, List[str]]:
    """Attachment point -> quantizer kinds"""
    description: Dict[str, List[str]] = {}
    for name, q in model.quantizers().items():
        point = name.rsplit('.', 1)[0] if name in model.scalar_quantizers() else name
        description.setdefault(point, []).append(q.get_name())
    return description


def attach_quantizers(model: EquivariantTransformer, scheme: str) -> Dict[str, List[str]]:
    return model.attach_quantizers(scheme)


def model_forward(model: EquivariantTransformer, graph: MolGraph) -> Tuple[float, np.ndarray]:
    """Energy (eV) and forces (eV/Å) of one molecule"""
    energy, forces = model.predict(graph)
    return float(energy[0]), forces


def checkpoint_config(model: EquivariantTransformer, extra: Optional[dict] = None) -> dict:
    config = {
        'model': asdict(model.config),
        'scheme': model.scheme.name,
        'seed': model.seed,
        'normalization': {
            'energy_shift': model.energy_shift,
            'energy_scale': model.energy_scale,
            'force_scale': model.force_scale,
        },
    }
    if extra:
        config.update(extra)
    return config


def save_model(model: EquivariantTransformer, path: Optional[str] = None, extra: Optional[dict] = None):
    """
    Store FP32 weights, learned steps and frozen quantizer params in a checkpoint

    Args:
        model: Model to store
        path: Optional file to write
        extra: Additional config entries echoed into the checkpoint

    Returns:
        Checkpoint
    """
    ckpt = Checkpoint(config=checkpoint_config(model, extra))
    for name, p in model.named_parameters().items():
        ckpt.add(name, p.data)
    for name, q in model.quantizers().items():
        if not q.frozen:
            continue
        params = q.params()
        if q.get_name() == 'mddq':
            ckpt.add(f"{name}.mag_step", q.mag_step.data, quant=params.mag)
            ckpt.add(f"{name}.dir_step", params.dir.scale, quant=params.dir)
        else:
            ckpt.add(f"{name}.step", q.step.data, quant=params)
    if path:
        save_checkpoint(ckpt, path)
    return ckpt


def load_model(ckpt) -> EquivariantTransformer:
    """Rebuild a model (FP32 or fake-quantized) from a checkpoint"""
    config = ckpt.config
    if 'model' not in config:
        raise ModelError("Checkpoint carries no model config")
    model = EquivariantTransformer(ModelConfig(**config['model']), config.get('scheme', 'fp32'),
                                   seed=config.get('seed', 0))
    norm = config.get('normalization', {})
    model.energy_shift = float(norm.get('energy_shift', 0.0))
    model.energy_scale = float(norm.get('energy_scale', 1.0))
    model.force_scale = float(norm.get('force_scale', 1.0))
    for name, p in model.named_parameters().items():
        entry = ckpt.get(name)
        if entry.array.shape != p.shape:
            raise ModelError(f"{name}: checkpoint shape {entry.array.shape} != model shape {p.shape}")
        p.data = np.array(entry.array, dtype=np.float32)
    for name, q in model.quantizers().items():
        if q.get_name() == 'mddq':
            if f"{name}.mag_step" not in ckpt:
                continue
            q.load_params(MddqParams(mag=ckpt.get(f"{name}.mag_step").quant,
                                     dir=ckpt.get(f"{name}.dir_step").quant))
        else:
            if f"{name}.step" not in ckpt:
                continue
            q.load_params(ckpt.get(f"{name}.step").quant)
        q.set_state(ON)
    return model
