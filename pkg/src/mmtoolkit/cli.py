''' The mmt command line: one subcommand per pipeline stage.

Exit codes are 0 on success, 1 when the pipeline fails on bad data or files and 2 on usage
errors. Every run writes its resolved configuration to run.config next to its outputs.
'''
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence
import argparse
import logging
import sys

from mmtoolkit.attention import (DEFAULT_SAMPLES, TRACES_NAME, analyze, collect_traces,
                                 export_profile, save_traces)
from mmtoolkit.benchmark import benchmark_generation, write_report
from mmtoolkit.config import RunConfig, resolve
from mmtoolkit.exceptions import MmtError, PromptError
from mmtoolkit.instruments import InstrumentMap
from mmtoolkit.metrics import compactness_report, evaluate_scores, write_compactness_csv
from mmtoolkit.models.checkpoint import ModelCheckpoint
from mmtoolkit.models.gradcheck import grad_check
from mmtoolkit.models.transformer import ModelConfig
from mmtoolkit.representation import EventSequence, decode, encode
from mmtoolkit.sampler import (GenerationMode, GenSpec, continuation_prompt, generate_many,
                               instrument_prompt, unconditioned_prompt)
from mmtoolkit.score import load_midi, save_midi
from mmtoolkit.training import MANIFEST_NAME, convert_dataset, load_dataset, train


LOGGER = logging.getLogger(__name__)

MIDI_SUFFIXES = ('.mid', '.midi')


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument('-v', '--verbose', action='count', default=0,
                        help='Log progress (-v) or details (-vv) to stderr')
    parser.add_argument('--seed', type=int, default=None,
                        help='Seed for all randomness (default: $MMT_SEED, then 0)')
    parser.add_argument('--config', default=None, help='JSON configuration file')
    parser.add_argument('--set', dest='overrides', action='append', default=[],
                        metavar='SECTION.KEY=VALUE', help='Override one configuration value')


def _add_instrument_map(parser: argparse.ArgumentParser):
    parser.add_argument('--instrument-map', default=None,
                        help='CSV mapping MIDI programs to instruments')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='mmt', description='Multitrack music transformer tools')
    subparsers = parser.add_subparsers(dest='command', metavar='COMMAND')
    subparsers.required = True

    convert = subparsers.add_parser('convert', help='Convert MIDI files into a dataset')
    convert.add_argument('--in', dest='input', required=True, help='MIDI file or directory')
    convert.add_argument('--out', required=True, help='Dataset directory')
    convert.add_argument('--max-beat', type=int, default=None)
    convert.add_argument('--workers', type=int, default=None)
    _add_instrument_map(convert)

    encode_parser = subparsers.add_parser('encode', help='Encode a MIDI file as an event CSV')
    encode_parser.add_argument('--in', dest='input', required=True)
    encode_parser.add_argument('--out', required=True)
    _add_instrument_map(encode_parser)

    decode_parser = subparsers.add_parser('decode', help='Decode an event CSV into a MIDI file')
    decode_parser.add_argument('--in', dest='input', required=True)
    decode_parser.add_argument('--out', required=True)
    _add_instrument_map(decode_parser)

    train_parser = subparsers.add_parser('train', help='Train a model on a dataset')
    train_parser.add_argument('--data', required=True, help='Dataset directory')
    train_parser.add_argument('--out', required=True, help='Run directory')
    train_parser.add_argument('--max-steps', type=int, default=None)
    train_parser.add_argument('--batch-size', type=int, default=None)
    train_parser.add_argument('--learning-rate', type=float, default=None)
    train_parser.add_argument('--validate-every', type=int, default=None)
    train_parser.add_argument('--patience', type=int, default=None)
    train_parser.add_argument('--no-augment', action='store_true')
    train_parser.add_argument('--progress', action='store_true', help='Show a progress bar')

    generate_parser = subparsers.add_parser('generate', help='Sample from a checkpoint')
    generate_parser.add_argument('--checkpoint', required=True)
    generate_parser.add_argument('--out', required=True, help='Output directory')
    generate_parser.add_argument('--mode', default=None,
                                 help='unconditioned, instruments or continuation')
    generate_parser.add_argument('--instruments', default=None,
                                 help='Comma-separated instrument names')
    generate_parser.add_argument('--prompt', default=None,
                                 help='Event CSV to continue (continuation mode)')
    generate_parser.add_argument('--beats', type=int, default=None,
                                 help='Beats of the prompt to keep (continuation mode)')
    generate_parser.add_argument('--samples', type=int, default=None)
    generate_parser.add_argument('--max-len', type=int, default=None)
    generate_parser.add_argument('--greedy', action='store_true')
    generate_parser.add_argument('--restrict-instruments', action='store_true',
                                 help='Only sample notes for declared instruments')
    _add_instrument_map(generate_parser)

    evaluate_parser = subparsers.add_parser('evaluate', help='Compute objective metrics')
    evaluate_parser.add_argument('--in', dest='input', required=True,
                                 help='Directory of MIDI files or event CSVs')
    evaluate_parser.add_argument('--out', required=True)
    evaluate_parser.add_argument('--compactness', action='store_true',
                                 help='Also count tokens under other representations')
    _add_instrument_map(evaluate_parser)

    benchmark_parser = subparsers.add_parser('benchmark', help='Time unconditioned generation')
    benchmark_parser.add_argument('--checkpoint', required=True)
    benchmark_parser.add_argument('--out', required=True)
    benchmark_parser.add_argument('--samples', type=int, default=10)
    benchmark_parser.add_argument('--max-len', type=int, default=None)
    benchmark_parser.add_argument('--warmup', type=int, default=1)

    attention_parser = subparsers.add_parser('attention', help='Analyze relative attention')
    attention_parser.add_argument('--checkpoint', required=True)
    attention_parser.add_argument('--data', required=True, help='Directory of event CSVs')
    attention_parser.add_argument('--out', required=True)
    attention_parser.add_argument('--samples', type=int, default=DEFAULT_SAMPLES)
    attention_parser.add_argument('--mean', action='store_true',
                                  help='Also export the mean over heads')

    gradcheck_parser = subparsers.add_parser('gradcheck', help='Check gradients numerically')
    gradcheck_parser.add_argument('--out', default=None, help='Directory for the report')
    gradcheck_parser.add_argument('--layers', type=int, default=2)
    gradcheck_parser.add_argument('--dim', type=int, default=16)
    gradcheck_parser.add_argument('--heads', type=int, default=4)
    gradcheck_parser.add_argument('--tolerance', type=float, default=1e-4)
    gradcheck_parser.add_argument('--max-entries', type=int, default=None)

    for subparser in subparsers.choices.values():
        _add_common(subparser)
    return parser


def _instrument_map(args) -> InstrumentMap:
    if getattr(args, 'instrument_map', None):
        return InstrumentMap.load(args.instrument_map)
    return InstrumentMap.default()


def _run_convert(args, run_config: RunConfig) -> int:
    source = Path(args.input)
    if source.is_dir():
        midi_paths = sorted(path for path in source.rglob('*')
                            if path.suffix.lower() in MIDI_SUFFIXES)
    else:
        midi_paths = [source]
    convert_dataset(midi_paths, args.out, _instrument_map(args), run_config.train.max_beat,
                    args.workers)
    run_config.write(args.out)
    return 0


def _run_encode(args, run_config: RunConfig) -> int:
    sequence = encode(load_midi(args.input), _instrument_map(args))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    sequence.write_csv(args.out)
    run_config.write(Path(args.out).parent)
    return 0


def _run_decode(args, run_config: RunConfig) -> int:
    score = decode(EventSequence.read_csv(args.input), instrument_map=_instrument_map(args))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_midi(score, args.out)
    run_config.write(Path(args.out).parent)
    return 0


def _run_train(args, run_config: RunConfig) -> int:
    run_config.write(args.out)
    checkpoint = train(run_config.train, run_config.model, show_progress=args.progress)
    LOGGER.info('Best validation loss %s at step %d', checkpoint.state.best_valid_loss,
                checkpoint.state.step)
    return 0


def _prompt(args, run_config: RunConfig) -> EventSequence:
    options = run_config.generate
    mode = GenerationMode.from_str(options.mode)
    if mode == GenerationMode.INSTRUMENTS:
        instrument_map = _instrument_map(args)
        return instrument_prompt(instrument_map.index_of(name) + 1
                                 for name in options.instruments)
    if mode == GenerationMode.CONTINUATION:
        if not args.prompt:
            raise PromptError('continuation mode needs --prompt')
        return continuation_prompt(EventSequence.read_csv(args.prompt), options.n_beats)
    return unconditioned_prompt()


def _run_generate(args, run_config: RunConfig) -> int:
    options = run_config.generate
    model = ModelCheckpoint.load(args.checkpoint).build_model()
    spec = GenSpec(options.mode, _prompt(args, run_config), max_len=options.max_len,
                   max_beat=options.max_beat, seed=run_config.seed,
                   restrict_to_declared_instruments=options.restrict_to_declared_instruments,
                   greedy=options.greedy, top_k_fraction=options.top_k_fraction)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    instrument_map = _instrument_map(args)
    for index, sequence in enumerate(generate_many(model, spec, options.n_samples)):
        sequence.write_csv(out_dir / f'sample_{index:03d}.csv')
        save_midi(decode(sequence, instrument_map=instrument_map),
                  out_dir / f'sample_{index:03d}.mid')
        LOGGER.info('Sample %d: %d events', index, len(sequence))
    run_config.write(out_dir)
    return 0


def _load_scores(directory: Path, instrument_map: InstrumentMap):
    paths = sorted(path for path in directory.iterdir()
                   if path.suffix.lower() in MIDI_SUFFIXES + ('.csv',))
    names, scores = [], []
    for path in paths:
        if path.suffix.lower() == '.csv':
            scores.append(decode(EventSequence.read_csv(path), instrument_map=instrument_map))
        else:
            scores.append(load_midi(path))
        names.append(path.name)
    return names, scores


def _run_evaluate(args, run_config: RunConfig) -> int:
    instrument_map = _instrument_map(args)
    names, scores = _load_scores(Path(args.input), instrument_map)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = evaluate_scores(scores)
    report.write_csv(out_dir / 'metrics.csv', names)
    (out_dir / 'summary.txt').write_text(report.summary())
    if args.compactness:
        write_compactness_csv(compactness_report(scores, instrument_map),
                              out_dir / 'compactness.csv')
    run_config.write(out_dir)
    return 0


def _run_benchmark(args, run_config: RunConfig) -> int:
    checkpoint = ModelCheckpoint.load(args.checkpoint)
    report = benchmark_generation(checkpoint, args.samples, run_config.generate.max_len,
                                  seed=run_config.seed, warmup=args.warmup)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report(report, out_dir / 'benchmark.txt')
    print(report.to_text(), end='')
    run_config.write(out_dir)
    return 0


def _dataset_sequences(directory: Path) -> List[EventSequence]:
    if (directory / MANIFEST_NAME).exists():
        return list(load_dataset(directory).values())
    names = sorted(path.name for path in directory.glob('*.csv'))
    return list(load_dataset(directory, names).values())


def _run_attention(args, run_config: RunConfig) -> int:
    model = ModelCheckpoint.load(args.checkpoint).build_model()
    traces = collect_traces(model, _dataset_sequences(Path(args.data)), args.samples)
    for trace in traces:
        trace.check()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_traces(traces, out_dir / TRACES_NAME)
    export_profile(analyze(traces, vocab=model.config.vocab), out_dir, include_mean=args.mean)
    run_config.write(out_dir)
    return 0


def _run_gradcheck(args, run_config: RunConfig) -> int:
    config = ModelConfig(layers=args.layers, model_dim=args.dim, heads=args.heads,
                         max_len=min(run_config.model.max_len, 16), dropout=0.0)
    report = grad_check(config, tolerance=args.tolerance, seed=run_config.seed,
                        max_entries=args.max_entries)
    print(report)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / 'gradcheck.txt').write_text(f'{report}\n')
        run_config.write(out_dir)
    return 0 if report.passed else 1


RUNNERS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    'convert': _run_convert,
    'encode': _run_encode,
    'decode': _run_decode,
    'train': _run_train,
    'generate': _run_generate,
    'evaluate': _run_evaluate,
    'benchmark': _run_benchmark,
    'attention': _run_attention,
    'gradcheck': _run_gradcheck,
}


def _flags(args) -> dict:
    ''' Explicit flags as (section, key) settings; flags that were not given are None '''
    def get(name):
        return getattr(args, name, None)

    training = args.command == 'train'
    flags = {
        ('train', 'data_dir'): get('data') if training else None,
        ('train', 'out_dir'): get('out') if training else None,
        ('train', 'max_beat'): get('max_beat'),
        ('train', 'max_steps'): get('max_steps'),
        ('train', 'batch_size'): get('batch_size'),
        ('train', 'learning_rate'): get('learning_rate'),
        ('train', 'validate_every'): get('validate_every'),
        ('train', 'patience'): get('patience'),
        ('train', 'augment'): False if get('no_augment') else None,
        ('generate', 'mode'): get('mode'),
        ('generate', 'instruments'): get('instruments'),
        ('generate', 'n_beats'): get('beats'),
        ('generate', 'max_len'): get('max_len'),
        ('generate', 'greedy'): True if get('greedy') else None,
        ('generate', 'restrict_to_declared_instruments'):
            True if get('restrict_instruments') else None,
    }
    if args.command == 'generate':
        flags[('generate', 'n_samples')] = get('samples')
    return flags


def _paths(args) -> Dict[str, Optional[str]]:
    names = ('input', 'out', 'data', 'checkpoint', 'prompt', 'instrument_map')
    return {name: getattr(args, name) for name in names if getattr(args, name, None)}


def _configure_logging(verbosity: int):
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity > 1:
        level = logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')


def dispatch(argv: Sequence[str] = None) -> int:
    ''' Run one subcommand and return its exit code '''
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    _configure_logging(args.verbose)

    try:
        run_config = resolve(args.command, args.config, args.overrides, _flags(args), args.seed,
                             _paths(args))
        return RUNNERS[args.command](args, run_config)
    except (MmtError, OSError) as exc:
        LOGGER.error('%s failed: %s', args.command, exc)
        return 1


def main():
    sys.exit(dispatch())
