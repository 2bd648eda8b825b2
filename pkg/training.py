"""
Training for EquiQuant
Composite loss, local equivariance error, Adam and branch-separated staged QAT
"""

import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

import tensor_core as tc
from dataset import Dataset
from geometry import MolGraph, Rotation, random_rotation, rotate_graph
from model import EquivariantTransformer, ModelConfig, resolve_scheme
from quantizers import OBSERVE, OFF, ON
from tensor_core import Gradients, ShapeError, Tape, Tensor, backward


logger = logging.getLogger('EquiQuant.Training')

MEV_PER_EV = 1000.0
MEV_PER_KCAL_MOL = 43.364
CALIBRATION_BATCHES = 8
EVAL_ROTATIONS = 8

FP32_STAGE = 'fp32'
WARMUP_STAGE = 'warmup'
FULL_STAGE = 'full'


class TrainingError(RuntimeError):
    """Raised when training or evaluation cannot proceed"""


def ev_to_mev(value):
    return value * MEV_PER_EV


def kcal_mol_to_mev(value):
    return value * MEV_PER_KCAL_MOL


def mev_to_kcal_mol(value):
    return value / MEV_PER_KCAL_MOL


@dataclass
class TrainConfig:
    """Optimization and schedule knobs"""
    epochs: int = 60
    warmup_epochs: int = 5
    lr: float = 1e-4
    lambda_energy: float = 1.0
    lambda_force: float = 10.0
    lambda_lee: float = 0.01
    n_lee_rotations: int = 1
    batch_size: int = 16
    seed: int = 0
    scheme: str = 'fp32'
    init: str = 'finetune'
    pretrain_epochs: int = 40

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError(f"epochs must be positive, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs must lie in [0, epochs), got {self.warmup_epochs} "
                             f"with {self.epochs} epochs")
        for name in ('lambda_energy', 'lambda_force', 'lambda_lee'):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size <= 0 or self.n_lee_rotations <= 0:
            raise ValueError("batch_size and n_lee_rotations must be positive")
        if self.pretrain_epochs < 0:
            raise ValueError(f"pretrain_epochs must be non-negative, got {self.pretrain_epochs}")
        if self.init not in ('finetune', 'scratch'):
            raise ValueError(f"init must be 'finetune' or 'scratch', got {self.init!r}")
        self.scheme = resolve_scheme(self.scheme).name


# Fixed leading fields of every emitted epoch record
RECORD_FIELDS = ('epoch', 'e_mae_mev', 'f_mae_mev_a', 'lee_mev_a', 'loss')


@dataclass
class EpochRecord:
    epoch: int
    e_mae_mev: float
    f_mae_mev_a: float
    lee_mev_a: float
    loss: float
    stage: str = FP32_STAGE
    loss_energy: float = 0.0
    loss_force: float = 0.0
    loss_lee: float = 0.0
    train_e_mae_mev: float = 0.0
    train_f_mae_mev_a: float = 0.0


@dataclass
class TrainLog:
    """One record per epoch, epochs strictly increasing"""
    records: List[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise TrainingError(f"Epoch {record.epoch} logged after epoch {self.records[-1].epoch}")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[EpochRecord]:
        return iter(self.records)

    @property
    def last(self) -> Optional[EpochRecord]:
        return self.records[-1] if self.records else None

    def to_records(self) -> List[dict]:
        return [asdict(r) for r in self.records]


@dataclass
class EvalResult:
    e_mae_mev: float
    f_mae_mev_a: float
    lee_mev_a: float
    n_molecules: int


class Adam:
    """Adam with constant learning rate over a fixed list of tensors"""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros(p.shape) for p in self.params]
        self._v = [np.zeros(p.shape) for p in self.params]

    def step(self, grads: Gradients):
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = np.asarray(grads[p], dtype=np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p.data[...] = (p.data - update).astype(p.data.dtype)


def loss(pred, ref_energy, ref_forces, lambda_energy: float = 1.0, lambda_force: float = 10.0,
         lambda_lee: float = 0.0, lee_term: Optional[Tensor] = None) -> Tuple[Tensor, Dict[str, float]]:
    """
    Weighted energy MAE, force MAE and equivariance penalty

    Args:
        pred: Model output with energy [B] and forces [N, 3] tensors
        ref_energy: Reference energies (eV)
        ref_forces: Reference forces (eV/Å)
        lambda_energy: Energy weight
        lambda_force: Force weight
        lambda_lee: Equivariance penalty weight
        lee_term: Differentiable equivariance error (eV/Å), or None

    Returns:
        (scalar loss tensor, unweighted term values)
    """
    if ref_energy is None or ref_forces is None:
        raise TrainingError("Loss needs reference energies and forces")
    ref_energy = np.asarray(ref_energy, dtype=np.float64).reshape(-1)
    ref_forces = np.asarray(ref_forces, dtype=np.float64)
    if pred.energy.shape != ref_energy.shape or pred.forces.shape != ref_forces.shape:
        raise ShapeError(f"loss: predictions {list(pred.energy.shape)}/{list(pred.forces.shape)} vs "
                         f"references {list(ref_energy.shape)}/{list(ref_forces.shape)}")

    energy_term = tc.mean(tc.abs(tc.sub(pred.energy, Tensor(ref_energy))))
    force_term = tc.mean(tc.abs(tc.sub(pred.forces, Tensor(ref_forces))))
    total = tc.add(tc.mul(energy_term, lambda_energy), tc.mul(force_term, lambda_force))
    terms = {'energy': energy_term.item(), 'force': force_term.item(), 'lee': 0.0}
    if lee_term is not None and lambda_lee > 0:
        total = tc.add(total, tc.mul(lee_term, lambda_lee))
        terms['lee'] = lee_term.item()
    return total, terms


def lee_penalty(model: EquivariantTransformer, graphs: Sequence[MolGraph], forces: Tensor,
                rotations: Sequence[Rotation]) -> Tensor:
    """Differentiable mean per-atom |f(R.G) - R.f(G)| (eV/Å) averaged over rotations"""
    total = None
    for rotation in rotations:
        turned = model.forward(model.batch([rotate_graph(g, rotation) for g in graphs])).forces
        expected = tc.matmul(forces, Tensor(rotation.matrix.T))
        error = tc.mean(tc.l2norm(tc.sub(turned, expected)))
        total = error if total is None else tc.add(total, error)
    return tc.mul(total, 1.0 / len(rotations))


@contextmanager
def observers_paused(model: EquivariantTransformer):
    """Switch observing quantizers to identity so evaluation leaves statistics untouched"""
    observing = [q for q in model.quantizers().values() if q.state == OBSERVE]
    for q in observing:
        q.set_state(OFF)
    try:
        yield
    finally:
        for q in observing:
            q.set_state(OBSERVE)


def _chunks(items: Sequence, size: int) -> Iterator[list]:
    for start in range(0, len(items), size):
        yield list(items[start:start + size])


def _segments(values: np.ndarray, counts: np.ndarray) -> List[np.ndarray]:
    return np.split(values, np.cumsum(counts)[:-1])


def _equivariance_errors(model: EquivariantTransformer, graphs: Sequence[MolGraph],
                         rounds: Sequence[Sequence[Rotation]]) -> np.ndarray:
    """Per-molecule force equivariance error (eV/Å), averaged over rounds of one rotation per molecule"""
    counts = np.array([g.n_atoms for g in graphs])
    totals = np.zeros(len(graphs))
    # Measured in 64-bit so FP32 round-off does not mask the architecture's error
    with observers_paused(model), tc.float64_oracle():
        _, base = model.predict(graphs)
        base_parts = _segments(base, counts)
        for rotations in rounds:
            _, turned = model.predict([rotate_graph(g, r) for g, r in zip(graphs, rotations)])
            expected = np.concatenate([r.apply(f) for r, f in zip(rotations, base_parts)])
            per_atom = np.linalg.norm(turned - expected, axis=-1)
            totals += np.array([part.mean() for part in _segments(per_atom, counts)])
    return totals / max(len(rounds), 1)


def lee(model: EquivariantTransformer, graph: MolGraph, rotations: Sequence[Rotation]) -> float:
    """
    Local equivariance error of the predicted forces

    Args:
        model: Model to probe
        graph: Molecule
        rotations: Rotations to average over

    Returns:
        Mean over rotations of the mean per-atom norm of f(R.G) - R.f(G), in meV/Å
    """
    if not rotations:
        raise TrainingError("LEE needs at least one rotation")
    errors = _equivariance_errors(model, [graph], [[r] for r in rotations])
    return float(ev_to_mev(errors[0]))


def evaluate(model: EquivariantTransformer, dataset: Dataset, n_rotations: int = EVAL_ROTATIONS,
             seed: int = 0, batch_size: int = 32) -> EvalResult:
    """
    Energy MAE (meV), force MAE (meV/Å) and LEE (meV/Å) averaged over molecules

    LEE draws n_rotations fresh random rotations per molecule.
    """
    graphs = list(dataset)
    if not graphs:
        raise TrainingError("Cannot evaluate an empty dataset")
    if not all(g.has_references() for g in graphs):
        raise TrainingError("Evaluation needs reference energies and forces on every molecule")

    rng = np.random.default_rng(seed)
    energy_errors, force_errors, lee_errors = [], [], []
    with observers_paused(model):
        for chunk in _chunks(graphs, batch_size):
            batch = model.batch(chunk)
            energy, forces = model.predict(chunk)
            energy_errors.extend(np.abs(energy.astype(np.float64) - batch.ref_energy))
            deviations = np.abs(forces.astype(np.float64) - batch.ref_forces)
            force_errors.extend(part.mean() for part in _segments(deviations, batch.atom_counts))
            if n_rotations > 0:
                rounds = [[random_rotation(rng) for _ in chunk] for _ in range(n_rotations)]
                lee_errors.extend(_equivariance_errors(model, chunk, rounds))

    return EvalResult(
        e_mae_mev=float(ev_to_mev(np.mean(energy_errors))),
        f_mae_mev_a=float(ev_to_mev(np.mean(force_errors))),
        lee_mev_a=float(ev_to_mev(np.mean(lee_errors))) if lee_errors else 0.0,
        n_molecules=len(graphs),
    )


def calibrate(model: EquivariantTransformer, graphs: Sequence[MolGraph], batch_size: int = 16,
              n_batches: int = CALIBRATION_BATCHES):
    """Run observation-only forward passes over the first n_batches batches"""
    for chunk in list(_chunks(list(graphs), batch_size))[:n_batches]:
        model.forward(model.batch(chunk))


def post_training_quantize(model: EquivariantTransformer, dataset: Dataset,
                           n_batches: int = CALIBRATION_BATCHES,
                           batch_size: int = 16) -> EquivariantTransformer:
    """Calibrate every attached quantizer on a few batches, freeze, and switch on"""
    if not model.quantizers():
        logger.warning(f"Scheme {model.scheme.name} has no quantizers, nothing to calibrate")
        return model
    if len(dataset) == 0:
        raise TrainingError("Post-training quantization needs calibration data")
    for branch in ('scalar', 'vector'):
        model.set_quant_state(branch, OBSERVE)
    calibrate(model, dataset.graphs, batch_size, n_batches)
    for branch in ('scalar', 'vector'):
        model.freeze(branch)
        model.set_quant_state(branch, ON)
    logger.info(f"Post-training quantization: {len(model.quantizers())} quantizers calibrated "
                f"on {min(n_batches, math.ceil(len(dataset) / batch_size))} batches")
    return model


def _check_finite(epoch: int, terms: Dict[str, float], total: float):
    for name in ('energy', 'force', 'lee'):
        if not math.isfinite(terms[name]):
            raise TrainingError(f"Epoch {epoch}: {name} loss term is not finite ({terms[name]})")
    if not math.isfinite(total):
        raise TrainingError(f"Epoch {epoch}: total loss is not finite ({total})")


def _start_quantization(model: EquivariantTransformer, train: Dataset, cfg: TrainConfig):
    """Calibrate and switch on scalar quantizers; vector quantizers start observing"""
    scheme = model.scheme
    pending = [q for q in model.quantizers().values() if not q.frozen]
    if not pending:
        model.set_quant_state('scalar', ON)
        model.set_quant_state('vector', OFF)
        return
    model.set_quant_state('scalar', OBSERVE)
    model.set_quant_state('vector', OBSERVE)
    calibrate(model, train.graphs, cfg.batch_size)
    if scheme.quantizes_scalars:
        model.freeze('scalar')
        model.set_quant_state('scalar', ON)
        logger.info(f"Scalar quantizers calibrated and enabled ({len(model.scalar_quantizers())})")


def qat_train(model: EquivariantTransformer, train: Dataset, val: Optional[Dataset],
              cfg: TrainConfig, log: Optional[TrainLog] = None) -> TrainLog:
    """
    Staged quantization-aware training

    Epochs before warmup_epochs quantize the scalar branch only while vector
    quantizers observe; from warmup_epochs on every quantizer is active and the
    equivariance penalty joins the loss when vectors are quantized. With an FP32
    model this is plain training.

    Args:
        model: Model with quantizers already attached (or FP32)
        train: Training molecules
        val: Validation molecules (training molecules are used when None)
        cfg: Training configuration
        log: Log to append to; epoch numbers continue from its length

    Returns:
        The log with one record per epoch
    """
    if len(train) == 0:
        raise TrainingError("Cannot train on an empty dataset")
    log = log if log is not None else TrainLog()
    scheme = model.scheme
    quantized = bool(model.quantizers())
    first_epoch = len(log)
    rng = np.random.default_rng([cfg.seed, first_epoch])
    params = model.parameters()
    optimizer = Adam(params, lr=cfg.lr)
    val = val if val is not None and len(val) else train

    if quantized:
        _start_quantization(model, train, cfg)

    logger.info(f"Training {scheme.name} for {cfg.epochs} epochs on {len(train)} molecules "
                f"(warm-up {cfg.warmup_epochs if quantized else 0})")
    for epoch in range(cfg.epochs):
        full = epoch >= cfg.warmup_epochs
        if quantized and full and any(q.state != ON for q in model.vector_quantizers.values()):
            for q in model.vector_quantizers.values():
                if not q.frozen:
                    q.freeze()
                q.set_state(ON)
            logger.info(f"Epoch {first_epoch + epoch}: vector quantizers frozen and enabled")
        stage = FP32_STAGE if not quantized else (FULL_STAGE if full else WARMUP_STAGE)
        lee_active = quantized and full and scheme.quantizes_vectors and cfg.lambda_lee > 0
        index = first_epoch + epoch

        sums = {'loss': 0.0, 'energy': 0.0, 'force': 0.0, 'lee': 0.0, 'e_abs': 0.0, 'f_abs': 0.0}
        order = rng.permutation(len(train))
        for chunk in _chunks(order, cfg.batch_size):
            graphs = [train.graphs[i] for i in chunk]
            batch = model.batch(graphs)
            with Tape() as tape:
                out = model.forward(batch)
                penalty = None
                if lee_active:
                    rotations = [random_rotation(rng) for _ in range(cfg.n_lee_rotations)]
                    penalty = lee_penalty(model, graphs, out.forces, rotations)
                total, terms = loss(out, batch.ref_energy, batch.ref_forces, cfg.lambda_energy,
                                    cfg.lambda_force, cfg.lambda_lee, penalty)
            _check_finite(index, terms, total.item())
            optimizer.step(backward(tape, total, params))
            for q in model.quantizers().values():
                q.clamp_steps()

            weight = len(graphs)
            sums['loss'] += total.item() * weight
            for name in ('energy', 'force', 'lee'):
                sums[name] += terms[name] * weight
            sums['e_abs'] += float(np.sum(np.abs(out.energy.data - batch.ref_energy)))
            per_atom = np.abs(out.forces.data - batch.ref_forces).mean(axis=-1)
            sums['f_abs'] += float(sum(part.mean() for part in _segments(per_atom, batch.atom_counts)))
            logger.debug(f"Epoch {index} batch of {weight}: loss {total.item():.6f}")

        n = len(train)
        result = evaluate(model, val, n_rotations=cfg.n_lee_rotations, seed=cfg.seed + index,
                          batch_size=max(cfg.batch_size, 32))
        record = EpochRecord(
            epoch=index,
            e_mae_mev=result.e_mae_mev,
            f_mae_mev_a=result.f_mae_mev_a,
            lee_mev_a=result.lee_mev_a,
            loss=sums['loss'] / n,
            stage=stage,
            loss_energy=sums['energy'] / n,
            loss_force=sums['force'] / n,
            loss_lee=sums['lee'] / n,
            train_e_mae_mev=float(ev_to_mev(sums['e_abs'] / n)),
            train_f_mae_mev_a=float(ev_to_mev(sums['f_abs'] / n)),
        )
        log.append(record)
        logger.info(f"Epoch {index} [{stage}]: loss {record.loss:.5f}, val energy MAE "
                    f"{record.e_mae_mev:.2f} meV, force MAE {record.f_mae_mev_a:.2f} meV/Å, "
                    f"LEE {record.lee_mev_a:.3e} meV/Å")
    return log


def fit(model_config: ModelConfig, cfg: TrainConfig, train: Dataset,
        val: Optional[Dataset] = None) -> Tuple[EquivariantTransformer, TrainLog]:
    """
    Build a model and train it for cfg.scheme

    With init 'finetune' the FP32 model is first trained for pretrain_epochs,
    then quantizers are attached and staged QAT runs for epochs. With init
    'scratch' staged QAT starts from random weights.
    """
    if len(train) == 0:
        raise TrainingError("Cannot train on an empty dataset")
    model = EquivariantTransformer(model_config, 'fp32', seed=cfg.seed)
    model.fit_normalization(train.graphs)
    log = TrainLog()
    if cfg.scheme != 'fp32' and cfg.init == 'finetune' and cfg.pretrain_epochs == 0:
        logger.warning("init 'finetune' with pretrain_epochs 0 skips FP32 pretraining; "
                       "QAT starts from random weights")
    if cfg.scheme != 'fp32' and cfg.init == 'finetune' and cfg.pretrain_epochs > 0:
        pretrain = replace(cfg, scheme='fp32', epochs=cfg.pretrain_epochs, warmup_epochs=0)
        qat_train(model, train, val, pretrain, log)
    if cfg.scheme != 'fp32':
        model.attach_quantizers(cfg.scheme)
    qat_train(model, train, val, cfg, log)
    return model, log
