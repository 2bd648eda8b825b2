#!/usr/bin/env python3
"""
EquiQuant - equivariance-aware quantization for equivariant graph transformers
Main entry point
"""

import os

# Single-threaded BLAS/OpenMP for stable timings and reductions; must precede numpy
for _var in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS', 'NUMEXPR_NUM_THREADS'):
    os.environ.setdefault(_var, '1')

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np
import yaml

from checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from config_loader import ConfigError, ConfigLoader
from dataset import DatasetError, XyzParseError, gen_synthetic, read_xyz, save_xyz, split
from geometry import GeometryError, random_rotation
from int8_infer import (ARCHITECTURES, CostModel, bench, convert, load_integer_model, memory_table,
                        theoretical_cost)
from model import ModelError, load_model, resolve_scheme, save_model
from quantizers import QuantizationError, angular_error_report
from reporters import ReporterFactory, Table
from tensor_core import ShapeError
from training import (RECORD_FIELDS, TrainingError, evaluate, fit, lee, post_training_quantize)


logger = logging.getLogger('EquiQuant')

VERSION = '1.0.0'
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DEFAULT_MOLECULES = 500
DEFAULT_ATOMS = (8, 16)
BENCH_RUNS = 1000
MANIFEST_SUFFIX = '.manifest.json'
MANIFEST_DIR = 'runs'

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DOMAIN = 2

DOMAIN_ERRORS = (CheckpointError, ConfigError, DatasetError, XyzParseError, GeometryError, ModelError,
                 QuantizationError, ShapeError, TrainingError, OSError)


class UsageError(Exception):
    """Command-line grammar error"""


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting on bad input"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunManifest:
    """Everything needed to re-run one invocation"""
    subcommand: str
    argv: List[str]
    config: Dict[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None
    artifacts: Dict[str, str] = field(default_factory=dict)
    versions: Dict[str, str] = field(default_factory=dict)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + '\n')
        logger.info(f"Wrote manifest {path}")
        return path

    @classmethod
    def read(cls, path) -> 'RunManifest':
        try:
            document = json.loads(Path(path).read_text())
        except ValueError as e:
            raise ConfigError(f"Manifest {path} is not valid JSON: {e}")
        if not isinstance(document, dict) or not isinstance(document.get('argv'), list):
            raise ConfigError(f"Manifest {path} carries no argv")
        known = {k: v for k, v in document.items() if k in cls.__dataclass_fields__}
        known.setdefault('subcommand', document['argv'][0] if document['argv'] else '')
        return cls(**known)


def versions() -> Dict[str, str]:
    return {
        'equiquant': VERSION,
        'python': platform.python_version(),
        'numpy': np.__version__,
        'pyyaml': yaml.__version__,
    }


def manifest_path(artifact: str) -> Path:
    return Path(str(artifact) + MANIFEST_SUFFIX)


def run_manifest_path(directory: str, command: str, argv: Sequence[str]) -> Path:
    """Manifest location for a run that wrote neither an artifact nor records"""
    digest = hashlib.sha256(json.dumps(list(argv)).encode()).hexdigest()[:12]
    return Path(directory) / f"{command}-{digest}{MANIFEST_SUFFIX}"


class Output:
    """Human-readable tables on stdout, JSON-lines records to --records (or stdout)"""

    def __init__(self, records_path: Optional[str] = None, stream: Optional[TextIO] = None):
        self.stream = stream or sys.stdout
        self.records_file = None
        if records_path:
            Path(records_path).parent.mkdir(parents=True, exist_ok=True)
            self.records_file = open(records_path, 'w')
        self.text = ReporterFactory.create('text', {'stream': self.stream})
        self.records = ReporterFactory.create('jsonl', {'stream': self.records_file or self.stream})

    def emit(self, table: Table):
        self.text.emit(table)
        self.records.emit(table)

    def close(self):
        self.stream.flush()
        if self.records_file:
            self.records_file.close()


def parse_range(text: str) -> Tuple[int, int]:
    """'LO..HI' to (LO, HI)"""
    try:
        lo, hi = text.split('..')
        return int(lo), int(hi)
    except ValueError:
        raise UsageError(f"Expected LO..HI, got {text!r}")


def parse_bits(text: str) -> List[int]:
    try:
        return [int(b) for b in text.split(',') if b.strip()]
    except ValueError:
        raise UsageError(f"Expected comma-separated bit-widths, got {text!r}")


def load_any_model(path: str):
    """FP32, fake-quantized or integer model from a checkpoint file"""
    ckpt = load_checkpoint(path)
    return (load_integer_model(ckpt) if ckpt.config.get('integer') else load_model(ckpt)), ckpt


def eval_table(name: str, label: str, result) -> Table:
    table = Table(name, ['model', 'e_mae_mev', 'f_mae_mev_a', 'lee_mev_a', 'n_molecules'])
    table.add(model=label, **asdict(result))
    return table


# Subcommands

def cmd_gen_data(args, out: Output) -> RunManifest:
    lo, hi = parse_range(args.atoms)
    dataset = gen_synthetic(args.n, (lo, hi), seed=args.seed, cutoff=args.cutoff)
    save_xyz(dataset, args.out)
    table = Table('dataset', ['path', 'n_molecules', 'atoms_lo', 'atoms_hi', 'seed'])
    table.add(path=args.out, n_molecules=len(dataset), atoms_lo=lo, atoms_hi=hi, seed=args.seed)
    out.emit(table)
    return RunManifest('gen-data', [], config=dict(dataset.metadata), seed=args.seed,
                       artifacts={'data': args.out})


def cmd_train(args, out: Output) -> RunManifest:
    model_config, train_config, resolved = ConfigLoader(args.config).load({'scheme': args.scheme,
                                                                           'seed': args.seed})
    data_path = args.data or resolved.get('data')
    if data_path:
        dataset = read_xyz(data_path, cutoff=model_config.cutoff)
    else:
        logger.info(f"No data given, generating {DEFAULT_MOLECULES} synthetic molecules")
        dataset = gen_synthetic(DEFAULT_MOLECULES, DEFAULT_ATOMS, seed=train_config.seed,
                                cutoff=model_config.cutoff)
    train, val, test = split(dataset, resolved['split'], seed=train_config.seed)

    model, log = fit(model_config, train_config, train, val if len(val) else None)
    save_model(model, args.out, extra={'train': resolved})

    table = Table('train', list(RECORD_FIELDS) + ['stage'])
    for record in log.to_records():
        table.add(**{k: record[k] for k in table.columns})
    out.emit(table)
    if len(test):
        out.emit(eval_table('test', train_config.scheme, evaluate(model, test, seed=train_config.seed)))

    artifacts = {'checkpoint': args.out}
    if data_path:
        artifacts['data'] = str(data_path)
    return RunManifest('train', [], config=resolved, seed=train_config.seed, artifacts=artifacts)


def cmd_quantize(args, out: Output) -> RunManifest:
    ckpt = load_checkpoint(args.ckpt)
    integer = convert(ckpt)
    save_checkpoint(integer, args.out)
    memory = memory_table(integer)
    table = Table('memory', ['tensor', 'dtype', 'bytes', 'fp32_bytes', 'ratio'])
    for row in memory.rows:
        table.add(**row)
    table.add(tensor='total', dtype='-', bytes=memory.quantized_bytes, fp32_bytes=memory.fp32_bytes,
              ratio=memory.ratio)
    out.emit(table)
    return RunManifest('quantize', [], config=dict(integer.config), artifacts={'checkpoint': args.ckpt,
                                                                                'integer': args.out})


def cmd_eval(args, out: Output) -> RunManifest:
    model, _ = load_any_model(args.ckpt)
    dataset = read_xyz(args.data, cutoff=model.config.cutoff)
    result = evaluate(model, dataset, n_rotations=args.rotations, seed=args.seed)
    out.emit(eval_table('eval', model.scheme.name, result))
    return RunManifest('eval', [], seed=args.seed, artifacts={'checkpoint': args.ckpt, 'data': args.data})


def cmd_lee(args, out: Output) -> RunManifest:
    if args.rotations < 1:
        raise UsageError("--rotations must be at least 1")
    model, _ = load_any_model(args.ckpt)
    dataset = read_xyz(args.data, cutoff=model.config.cutoff)
    rng = np.random.default_rng(args.seed)
    table = Table('lee', ['molecule', 'n_atoms', 'lee_mev_a'])
    values = []
    for index, g in enumerate(dataset):
        value = lee(model, g, [random_rotation(rng) for _ in range(args.rotations)])
        values.append(value)
        table.add(molecule=index, n_atoms=g.n_atoms, lee_mev_a=value)
    out.emit(table)
    summary = Table('lee_summary', ['model', 'rotations', 'n_molecules', 'mean_lee_mev_a', 'max_lee_mev_a'])
    summary.add(model=model.scheme.name, rotations=args.rotations, n_molecules=len(values),
                mean_lee_mev_a=float(np.mean(values)) if values else 0.0,
                max_lee_mev_a=float(np.max(values)) if values else 0.0)
    out.emit(summary)
    return RunManifest('lee', [], seed=args.seed, artifacts={'checkpoint': args.ckpt, 'data': args.data})


def cmd_bench(args, out: Output) -> RunManifest:
    if args.runs < 1:
        raise UsageError("--runs must be at least 1")
    fp32_model, fp32_ckpt = load_any_model(args.ckpt_fp32)
    int_model, int_ckpt = load_any_model(args.ckpt_int)
    if args.data:
        graph = read_xyz(args.data, cutoff=fp32_model.config.cutoff).graphs[0]
    else:
        graph = gen_synthetic(1, DEFAULT_ATOMS, seed=args.seed, cutoff=fp32_model.config.cutoff).graphs[0]

    report = bench({'fp32': fp32_model, 'int': int_model}, graph, n_runs=args.runs,
                   checkpoints={'fp32': fp32_ckpt, 'int': int_ckpt})
    latency = Table('latency', ['variant', 'runs', 'median_us', 'mean_us', 'speedup'])
    for row in report.latency:
        latency.add(**row)
    out.emit(latency)
    memory = Table('memory', ['variant', 'quantized_bytes', 'fp32_bytes', 'ratio', 'total_bytes'])
    for row in report.memory:
        memory.add(**row)
    out.emit(memory)
    flagged = Table('float_ops', ['variant', 'op'])
    for variant, ops in report.float_ops.items():
        for op in ops:
            flagged.add(variant=variant, op=op)
    out.emit(flagged)

    scheme = resolve_scheme(int_ckpt.config.get('scheme', 'fp32'))
    bits = scheme.weight_bits or (scheme.vector_bits if scheme.quantizes_vectors else 32)
    cm = CostModel(n=graph.n_atoms, mean_neighbors=max(graph.n_edges / graph.n_atoms, 1e-9),
                   F=int_model.config.F0, l_max=1, bits=bits)
    cost = Table('cost', ['arch', 'full', 'rho', 'speedup', 'quantized'])
    for arch in ARCHITECTURES:
        result = theoretical_cost(cm, arch)
        cost.add(arch=arch, full=result.full, rho=result.rho, speedup=result.speedup, quantized=result.quantized)
    out.emit(cost)
    return RunManifest('bench', [], seed=args.seed,
                       artifacts={'fp32': args.ckpt_fp32, 'int': args.ckpt_int})


def cmd_diag_mddq(args, out: Output) -> RunManifest:
    if args.samples < 0:
        raise UsageError("--samples must be non-negative")
    rows = angular_error_report(parse_bits(args.bits), args.samples, args.seed)
    table = Table('diag_mddq', ['bits', 'quantizer', 'n_samples', 'mean_cosine', 'mean_angle_deg'])
    for row in rows:
        table.add(**row)
    out.emit(table)
    return RunManifest('diag-mddq', [], seed=args.seed)


def cmd_ptq(args, out: Output) -> RunManifest:
    ckpt = load_checkpoint(args.ckpt)
    if resolve_scheme(ckpt.config.get('scheme', 'fp32')).name != 'fp32' or ckpt.config.get('integer'):
        raise QuantizationError("Post-training quantization starts from an FP32 checkpoint")
    model = load_model(ckpt)
    model.attach_quantizers(args.scheme)
    dataset = read_xyz(args.data, cutoff=model.config.cutoff)
    post_training_quantize(model, dataset, n_batches=args.batches)
    save_model(model, args.out, extra={'ptq': {'data': args.data, 'batches': args.batches}})
    out.emit(eval_table('ptq', model.scheme.name, evaluate(model, dataset, seed=args.seed)))
    return RunManifest('ptq', [], config={'scheme': model.scheme.name, 'batches': args.batches},
                       seed=args.seed, artifacts={'checkpoint': args.ckpt, 'data': args.data, 'out': args.out})


def cmd_replay(args, out: Output) -> RunManifest:
    manifest = RunManifest.read(args.manifest)
    if manifest.subcommand == 'replay':
        raise ConfigError("A replay manifest cannot be replayed")
    argv = list(manifest.argv)
    # The recorded seed may have come from the environment; pin it
    if manifest.seed is not None and '--seed' not in argv:
        argv += ['--seed', str(manifest.seed)]
    logger.info(f"Replaying {manifest.subcommand} from {args.manifest}")
    code = run(argv, stream=out.stream)
    if code != EXIT_OK:
        raise ConfigError(f"Replayed {manifest.subcommand} exited with code {code}")
    return RunManifest('replay', [], artifacts={'manifest': args.manifest})


COMMANDS = {
    'gen-data': cmd_gen_data,
    'train': cmd_train,
    'quantize': cmd_quantize,
    'eval': cmd_eval,
    'lee': cmd_lee,
    'bench': cmd_bench,
    'diag-mddq': cmd_diag_mddq,
    'ptq': cmd_ptq,
    'replay': cmd_replay,
}

# Subcommands whose manifest always lands beside the written artifact
ARTIFACT_FLAGS = {'gen-data': 'out', 'train': 'out', 'quantize': 'out', 'ptq': 'out'}


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog='equiquant',
        description='EquiQuant - equivariance-aware quantization of equivariant graph transformers'
    )
    parser.add_argument('--debug', action='store_true', help='Enable debug mode')
    common = ArgumentParser(add_help=False)
    common.add_argument('--records', help='Write JSON-lines records (and a run manifest) to this file')
    common.add_argument('--manifest-dir', dest='manifest_dir', default=MANIFEST_DIR,
                        help='Where the run manifest goes when no artifact or records file is written')
    sub = parser.add_subparsers(dest='command', parser_class=ArgumentParser)

    p = sub.add_parser('gen-data', parents=[common], help='Generate a synthetic Lennard-Jones dataset')
    p.add_argument('--out', required=True)
    p.add_argument('--n', type=int, default=DEFAULT_MOLECULES)
    p.add_argument('--atoms', default=f"{DEFAULT_ATOMS[0]}..{DEFAULT_ATOMS[1]}")
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--cutoff', type=float, default=5.0)

    p = sub.add_parser('train', parents=[common], help='Train FP32 or quantization-aware')
    p.add_argument('--config')
    p.add_argument('--scheme')
    p.add_argument('--data')
    p.add_argument('--out', required=True)
    p.add_argument('--seed', type=int, help='Overrides EQUIQUANT_SEED and the config seed')

    p = sub.add_parser('quantize', parents=[common], help='Convert a checkpoint to integer form')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--out', required=True)

    p = sub.add_parser('eval', parents=[common], help='Energy MAE, force MAE and LEE on a dataset')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--rotations', type=int, default=8)
    p.add_argument('--seed', type=int, default=0)

    p = sub.add_parser('lee', parents=[common], help='Per-molecule local equivariance error')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--rotations', type=int, default=8)
    p.add_argument('--seed', type=int, default=0)

    p = sub.add_parser('bench', parents=[common], help='Latency and memory of FP32 vs integer')
    p.add_argument('--ckpt-fp32', dest='ckpt_fp32', required=True)
    p.add_argument('--ckpt-int', dest='ckpt_int', required=True)
    p.add_argument('--runs', type=int, default=BENCH_RUNS)
    p.add_argument('--data')
    p.add_argument('--seed', type=int, default=0)

    p = sub.add_parser('diag-mddq', parents=[common], help='Angular error of vector quantizers')
    p.add_argument('--bits', default='2,4,8')
    p.add_argument('--samples', type=int, default=10_000)
    p.add_argument('--seed', type=int, default=0)

    p = sub.add_parser('ptq', parents=[common], help='Post-training quantization baseline')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--scheme', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--batches', type=int, default=8)
    p.add_argument('--seed', type=int, default=0)

    p = sub.add_parser('replay', parents=[common], help='Re-run a subcommand from its manifest')
    p.add_argument('--manifest', required=True)
    return parser


def setup_logging(debug: bool = False):
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT, stream=sys.stderr)
    if debug:
        logger.setLevel(logging.DEBUG)
        logging.getLogger().setLevel(logging.DEBUG)


def run(argv: Sequence[str], stream: Optional[TextIO] = None) -> int:
    """
    Run one subcommand

    Args:
        argv: Arguments without the program name
        stream: Where tables are written (default stdout)

    Returns:
        0 on success, 1 on a usage error, 2 on a data or model error
    """
    argv = list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return e.code if isinstance(e.code, int) else EXIT_OK

    setup_logging(args.debug)
    out = None
    try:
        out = Output(args.records, stream)
        manifest = COMMANDS[args.command](args, out)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except DOMAIN_ERRORS as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_DOMAIN
    finally:
        if out is not None:
            out.close()

    manifest.argv = [a for a in argv if a != '--debug']
    manifest.versions = versions()
    artifact = getattr(args, ARTIFACT_FLAGS.get(args.command, ''), None)
    if artifact:
        manifest.write(manifest_path(artifact))
    if args.records:
        manifest.write(manifest_path(args.records))
    # The replayed run writes its own manifest
    if not artifact and not args.records and args.command != 'replay':
        manifest.write(run_manifest_path(args.manifest_dir, args.command, manifest.argv))
    return EXIT_OK


def main():
    """Main entry point"""
    try:
        code = run(sys.argv[1:])
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        code = EXIT_DOMAIN
    except Exception as e:
        logger.error(f"Fatal error: {e}", exc_info=True)
        code = EXIT_DOMAIN
    sys.exit(code)


if __name__ == '__main__':
    main()
