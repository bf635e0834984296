import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field

import torch

from .datasim import DatasetSpec, few_shot_split, generate_dataset, read_embeddings, write_embeddings
from .evalkit import component_ablation, evaluate, export_geometry, fewshot_curve, loss_ablation, \
    prompt_ablation, prototype_geometry, scope_ablation, strategy_compare, temperature_sweep
from .helpers import atomic_write, canonical_json, setup_logging, sha256_file
from .fusion import KV_MODES
from .trainer import SCOPES, PcqModel, TrainConfig, load_checkpoint, run_gradient_suite, \
    save_checkpoint, train
from .protogen import STRATEGIES
from .version import __version__


logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2
GRADCHECK_TOLERANCE = 1e-4
MANIFEST_NAME = 'run_manifest.json'


@dataclass
class RunManifest:
    """Everything needed to reproduce one command's outputs"""
    command: str
    config: dict
    inputs: dict = field(default_factory=dict)
    output: str = ''
    tool_version: str = __version__

    def write(self, path):
        atomic_write(path, canonical_json(asdict(self)))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, '{}: error: {}\n'.format(self.prog, message))


def _int_list(text):
    return [int(x) for x in text.split(',') if x.strip()]


def _float_list(text):
    return [float(x) for x in text.split(',') if x.strip()]


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError('expected a positive integer, got {}'.format(value))
    return value


def _digests(*paths):
    return {p: sha256_file(p) for p in paths if p is not None and os.path.isfile(p)}


def _add_config_flags(p):
    g = p.add_argument_group('training configuration (overrides --config)')
    g.add_argument('--config', help='JSON file with flat (optionally dotted) TrainConfig keys')
    g.add_argument('--epochs', type=int)
    g.add_argument('--min-steps', dest='min_steps', type=int, help='floor on optimizer steps for epochs > 0')
    g.add_argument('--batch-size', dest='batch_size', type=int)
    g.add_argument('--lr', dest='base_lr', type=float)
    g.add_argument('--warmup-epochs', dest='warmup_epochs', type=int)
    g.add_argument('--weight-decay', dest='weight_decay', type=float)
    g.add_argument('--tau', type=float)
    g.add_argument('--lambda1', type=float)
    g.add_argument('--lambda2', type=float)
    g.add_argument('--m', type=int, help='prompt length')
    g.add_argument('--seed', type=int)
    g.add_argument('--scope', dest='trainable_scope', choices=SCOPES)
    g.add_argument('--strategy', dest='prototype_strategy', choices=STRATEGIES)
    g.add_argument('--kv-mode', dest='kv_mode', choices=KV_MODES)
    g.add_argument('--eval-noise', dest='eval_noise', action='store_true', default=None)
    g.add_argument('--straight-through', dest='straight_through', action='store_true', default=None)
    p.add_argument('--dry-run', action='store_true', help='print the resolved configuration and exit')


CONFIG_FLAGS = ('epochs', 'min_steps', 'batch_size', 'base_lr', 'warmup_epochs', 'weight_decay', 'tau', 'lambda1',
                'lambda2', 'm', 'seed', 'trainable_scope', 'prototype_strategy', 'kv_mode', 'eval_noise',
                'straight_through')


def resolve_config(args):
    """Config file values, then command-line overrides, validated"""
    values = {}
    if getattr(args, 'config', None):
        with open(args.config) as f:
            values = TrainConfig.from_dict(json.load(f)).to_dict()
    for name in CONFIG_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            values[name] = value
    return TrainConfig.from_dict(values)


def _add_sweep_flags(p, data=True):
    if data:
        p.add_argument('--data', required=True, help='PCQE embedding file')
        p.add_argument('--shots', type=int, default=8)
    p.add_argument('--seeds', type=_int_list, default=[0], help='comma-separated seeds')
    p.add_argument('--workers', type=_positive_int, default=os.environ.get('PCQ_WORKERS', '1'),
                   help='worker processes (default: $PCQ_WORKERS or 1)')
    p.add_argument('--out', required=True, help='output directory')
    _add_config_flags(p)


def _add_spec_flags(p):
    d = DatasetSpec()
    p.add_argument('--classes', type=int, default=d.num_classes)
    p.add_argument('--dim', type=int, default=d.dim)
    p.add_argument('--per-class', type=int, default=d.n_per_class)
    p.add_argument('--spread', type=float, default=d.intra_spread)
    p.add_argument('--separation', type=float, default=d.inter_separation)
    p.add_argument('--data-seed', type=int, default=None, help='dataset seed (defaults to --seed)')


def _spec_from_args(args, seed):
    return DatasetSpec(args.classes, args.dim, args.per_class, args.spread, args.separation, seed).validate()


def build_parser():
    parser = _Parser(prog='pcq', description='Prototype quantisation experiments on labelled embeddings')
    parser.add_argument('-v', '--verbose', action='store_true')
    parser.add_argument('--version', action='version', version='%(prog)s ' + __version__)
    sub = parser.add_subparsers(dest='command', parser_class=_Parser)
    sub.required = True

    p = sub.add_parser('gen-data', help='write a synthetic embedding file')
    _add_spec_flags(p)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True)
    p.add_argument('--dry-run', action='store_true')

    p = sub.add_parser('train', help='train and write a checkpoint plus report')
    p.add_argument('--data', required=True)
    p.add_argument('--shots', type=int, default=None, help='train on a few-shot split and test on the rest')
    p.add_argument('--split-seed', type=int, default=None, help='few-shot split seed (defaults to --seed)')
    p.add_argument('--out', required=True)
    _add_config_flags(p)

    p = sub.add_parser('eval', help='evaluate a checkpoint on an embedding file')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--dry-run', action='store_true')

    p = sub.add_parser('sweep-temperature', help='temperature ablation')
    p.add_argument('--taus', type=_float_list, default=None, help='comma-separated temperatures')
    _add_sweep_flags(p)
    for name in ('ablate-loss', 'ablate-strategy', 'ablate-prompt', 'ablate-component', 'ablate-scope'):
        _add_sweep_flags(sub.add_parser(name, help='{} harness'.format(name[len('ablate-'):])))

    p = sub.add_parser('fewshot', help='few-shot accuracy curve on generated data')
    _add_spec_flags(p)
    p.add_argument('--shots-grid', type=_int_list, default=[1, 2, 4, 8, 16])
    _add_sweep_flags(p, data=False)

    p = sub.add_parser('project', help='2-d projection of prototypes and features')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--svg', action='store_true')
    p.add_argument('--dry-run', action='store_true')

    p = sub.add_parser('gradcheck', help='finite-difference check of every loss gradient')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--configurations', type=int, default=10)
    p.add_argument('--out', default=None, help='optional directory for gradcheck.json and the run manifest')
    p.add_argument('--dry-run', action='store_true')
    return parser


def cmd_gen_data(args):
    spec = _spec_from_args(args, args.seed if args.data_seed is None else args.data_seed)
    if args.dry_run:
        print(canonical_json(spec.to_dict()), end='')
        return EXIT_OK
    write_embeddings(args.out, generate_dataset(spec))
    RunManifest('gen-data', spec.to_dict(), output=args.out).write(args.out + '.manifest.json')
    logger.info('wrote %s', args.out)
    return EXIT_OK


def cmd_train(args):
    config = resolve_config(args)
    if args.dry_run:
        print(canonical_json(config.to_dict()), end='')
        return EXIT_OK
    split_seed = config.seed if args.split_seed is None else args.split_seed
    data = read_embeddings(args.data)
    if args.shots:
        train_data, test_data = few_shot_split(data, args.shots, split_seed)
    else:
        train_data = test_data = data
    state = train(config, train_data)
    save_checkpoint(state, os.path.join(args.out, 'checkpoint'))
    report, out = evaluate(state.model, test_data, config)
    atomic_write(os.path.join(args.out, 'report.json'), canonical_json({
        'metrics': report.to_dict(), 'history': state.history, 'geometry': prototype_geometry(out.prototypes)}))
    RunManifest('train', dict(config.to_dict(), data=args.data, shots=args.shots, split_seed=split_seed),
                _digests(args.data, args.config), args.out).write(
        os.path.join(args.out, MANIFEST_NAME))
    logger.info('accuracy %.4f  paa %s', report.accuracy, report.paa)
    return EXIT_OK


def cmd_eval(args):
    state = load_checkpoint(args.checkpoint)
    if args.dry_run:
        print(canonical_json(state.config.to_dict()), end='')
        return EXIT_OK
    data = read_embeddings(args.data, state.model.num_classes)
    report, out = evaluate(state.model, data)
    atomic_write(os.path.join(args.out, 'report.json'), canonical_json({
        'metrics': report.to_dict(), 'geometry': prototype_geometry(out.prototypes)}))
    RunManifest('eval', state.config.to_dict(),
                _digests(args.data, os.path.join(args.checkpoint, 'manifest.json')), args.out).write(
        os.path.join(args.out, MANIFEST_NAME))
    print('accuracy {:.4f}  paa {}'.format(report.accuracy, report.paa))
    return EXIT_OK


HARNESSES = {
    'ablate-loss': loss_ablation,
    'ablate-strategy': strategy_compare,
    'ablate-prompt': prompt_ablation,
    'ablate-component': component_ablation,
    'ablate-scope': scope_ablation,
}


def cmd_harness(args):
    config = resolve_config(args)
    if args.dry_run:
        print(canonical_json(config.to_dict()), end='')
        return EXIT_OK
    data = read_embeddings(args.data)
    if args.command == 'sweep-temperature':
        kwargs = {'taus': args.taus} if args.taus else {}
        result = temperature_sweep(config, data, seeds=args.seeds, shots=args.shots, workers=args.workers, **kwargs)
    else:
        result = HARNESSES[args.command](config, data, seeds=args.seeds, shots=args.shots, workers=args.workers)
    result.write(args.out)
    RunManifest(args.command, dict(config.to_dict(), seeds=args.seeds, shots=args.shots),
                _digests(args.data, args.config), args.out).write(os.path.join(args.out, MANIFEST_NAME))
    for row in result.summary:
        print('{variant}: accuracy {accuracy_mean:.4f} +/- {accuracy_std:.4f}'.format(**row))
    return EXIT_OK


def cmd_fewshot(args):
    config = resolve_config(args)
    spec = _spec_from_args(args, config.seed if args.data_seed is None else args.data_seed)
    if args.dry_run:
        print(canonical_json({'config': config.to_dict(), 'spec': spec.to_dict()}), end='')
        return EXIT_OK
    result = fewshot_curve(config, spec, shots=args.shots_grid, seeds=args.seeds, workers=args.workers)
    result.write(args.out)
    RunManifest('fewshot', dict(config.to_dict(), seeds=args.seeds, shots=args.shots_grid, spec=spec.to_dict()),
                _digests(args.config), args.out).write(os.path.join(args.out, MANIFEST_NAME))
    for row in result.summary:
        print('{variant}-shot: accuracy {accuracy_mean:.4f} +/- {accuracy_std:.4f}'.format(**row))
    return EXIT_OK


def cmd_project(args):
    state = load_checkpoint(args.checkpoint)
    if args.dry_run:
        print(canonical_json(state.config.to_dict()), end='')
        return EXIT_OK
    data = read_embeddings(args.data, state.model.num_classes)
    # the initial prototypes are a pure function of the config
    before = PcqModel(state.model.num_classes, state.model.dim, state.config)
    if state.config.prototype_strategy == 'centroid':
        before.load_state_dict(state.model.state_dict())
    with torch.no_grad():
        after = state.model.prototypes().detach()
        initial = before.prototypes().detach()
        features = state.model.adapter(data.features)
    svg = os.path.join(args.out, 'geometry.svg') if args.svg else None
    export_geometry(initial, after, features, data.labels, os.path.join(args.out, 'geometry.csv'), svg)
    RunManifest('project', state.config.to_dict(),
                _digests(args.data, os.path.join(args.checkpoint, 'manifest.json')), args.out).write(
        os.path.join(args.out, MANIFEST_NAME))
    return EXIT_OK


def cmd_gradcheck(args):
    if args.dry_run:
        print(canonical_json({'seed': args.seed, 'configurations': args.configurations}), end='')
        return EXIT_OK
    errors = run_gradient_suite(args.seed, args.configurations)
    for name, err in errors.items():
        print('{:<6} max relative error {:.3e}'.format(name, err))
    if args.out:
        atomic_write(os.path.join(args.out, 'gradcheck.json'), canonical_json(errors))
        RunManifest('gradcheck', {'seed': args.seed, 'configurations': args.configurations},
                    output=args.out).write(os.path.join(args.out, MANIFEST_NAME))
    return EXIT_OK if max(errors.values()) < GRADCHECK_TOLERANCE else EXIT_FAILURE


COMMANDS = {
    'gen-data': cmd_gen_data,
    'train': cmd_train,
    'eval': cmd_eval,
    'sweep-temperature': cmd_harness,
    'fewshot': cmd_fewshot,
    'project': cmd_project,
    'gradcheck': cmd_gradcheck,
}
COMMANDS.update({name: cmd_harness for name in HARNESSES})


def main(argv=None):
    """Entry point; returns 0 on success, 1 on usage errors and 2 on runtime failures"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    setup_logging(logging.DEBUG if args.verbose else logging.INFO)
    try:
        return COMMANDS[args.command](args)
    except Exception as e:
        logger.error('%s failed: %s: %s', args.command, type(e).__name__, e)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
