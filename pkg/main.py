import argparse
import logging
import os
import sys
from dataclasses import dataclass, replace

import numpy as np

from checkpoint import load_checkpoint, restore_model, save_checkpoint
from data import (
    ProjectionSpec, SphericalDataset, label_palette, load_idx_arrays, load_manifest,
    project_digits, render_equirect, synth_segmentation_set, write_dataset, write_pnm,
)
from gradcheck import GradientChecker
from layers import KernelMask
from mesh import mesh_at_level, write_mesh_cache, write_obj
from network import PRESETS, build_model, input_tensor, preset_spec
from operators import export_matrix_market, operator_set_at_level, operator_summary
from training import (
    LOSS_WEIGHT_MODES, TRAIN_PRESETS, AdamState, ClassWeights, Trainer, ablation_run, benchmark_inference,
    evaluate, format_metrics, width_sweep,
)
from utils import (
    DataFormatError, NumericalError, RngStreams, UsageError, environment_overrides, exit_code_for,
    load_config_file,
)

MNIST_FILES = {
    'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
    'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'),
}
METRICS = ('accuracy', 'per-class', 'miou')


@dataclass(frozen=True)
class Option:
    type: type
    default: object
    help: str
    choices: tuple = None
    flag: bool = False


def _bool(value):
    if isinstance(value, bool):
        return value
    if str(value).lower() in ('1', 'true', 'yes', 'on'):
        return True
    if str(value).lower() in ('0', 'false', 'no', 'off', ''):
        return False
    raise ValueError(f"not a boolean: {value!r}")


_TRAINING_OPTIONS = {
    'epochs': Option(int, None, "epochs (default: task preset)"),
    'lr': Option(float, None, "initial learning rate (default: task preset)"),
    'decay': Option(float, None, "step-decay factor (default: task preset)"),
    'decay_period': Option(int, None, "epochs between decays (default: task preset)"),
    'batch': Option(int, None, "batch size (default: task preset)"),
    'width': Option(float, 1.0, "channel width multiplier"),
    'class_weights': Option(str, None, "loss weighting", LOSS_WEIGHT_MODES),
    'ignore_index': Option(int, None, "label value left out of loss and metrics"),
}

COMMAND_OPTIONS = {
    'mesh': {
        'level': Option(int, 3, "subdivision level"),
        'format': Option(str, 'obj', "output format", ('obj', 'bin')),
        'out': Option(str, None, "output path (default: icosphere_level<L>.<ext>)"),
    },
    'ops': {
        'level': Option(int, 3, "subdivision level"),
        'out_dir': Option(str, None, "output directory (default: operators_level<L>)"),
    },
    'gradcheck': {
        'level': Option(int, 2, "fixture mesh level"),
        'width': Option(int, 3, "fixture channel count"),
        'inject_sign_flip': Option(_bool, False, "negate MeshConv gradients to confirm failures are caught",
                                   flag=True),
    },
    'prepare-mnist': {
        'idx_dir': Option(str, None, "directory holding the IDX files"),
        'split': Option(str, 'train', "which IDX pair to convert", ('train', 'test')),
        'level': Option(int, 4, "target mesh level"),
        'delta': Option(float, 30.0, "patch half-width in degrees"),
        'lon0': Option(float, 0.0, "patch centre longitude in degrees"),
        'limit': Option(int, 0, "convert only the first N digits (0 = all)"),
        'out_dir': Option(str, None, "dataset output directory"),
    },
    'synth': {
        'level': Option(int, 3, "mesh level"),
        'classes': Option(int, 3, "number of classes"),
        'count': Option(int, 64, "number of samples"),
        'out_dir': Option(str, None, "dataset output directory"),
    },
    'train': {
        'task': Option(str, 'mnist', "architecture and training preset", tuple(PRESETS)),
        'train_manifest': Option(str, None, "training manifest"),
        'val_manifest': Option(str, None, "validation manifest"),
        'mask': Option(str, 'Ixylap', "kernel operators (tokens I, x, y, lap)"),
        'classes': Option(int, 0, "class count (0 = task preset)"),
        'out_dir': Option(str, 'runs', "checkpoint and report directory"),
        'resume': Option(str, None, "checkpoint to continue from"),
        **_TRAINING_OPTIONS,
    },
    'eval': {
        'checkpoint': Option(str, None, "model checkpoint"),
        'manifest': Option(str, None, "evaluation manifest"),
        'metric': Option(str, 'accuracy', "comma-separated: accuracy, per-class, miou"),
        'ignore_index': Option(int, None, "label value left out of every metric"),
        'drop_classes': Option(str, '', "comma-separated class ids left out of mIoU"),
        'out': Option(str, None, "also write the report here"),
    },
    'ablate': {
        'task': Option(str, 'mnist', "architecture and training preset", tuple(PRESETS)),
        'train_manifest': Option(str, None, "training manifest"),
        'test_manifest': Option(str, None, "test manifest"),
        'masks': Option(str, 'Iylap,Ixlap,Ilap,Ixy,Ixylap', "comma-separated kernel masks"),
        'classes': Option(int, 0, "class count (0 = task preset)"),
        'out': Option(str, None, "also write the table here"),
        **_TRAINING_OPTIONS,
    },
    'sweep': {
        'task': Option(str, 'mnist', "architecture and training preset", tuple(PRESETS)),
        'train_manifest': Option(str, None, "training manifest"),
        'test_manifest': Option(str, None, "test manifest"),
        'widths': Option(str, '0.25,0.5,1', "comma-separated channel width multipliers"),
        'mask': Option(str, 'Ixylap', "kernel operators (tokens I, x, y, lap)"),
        'classes': Option(int, 0, "class count (0 = task preset)"),
        'out': Option(str, None, "also write the table here"),
        **{name: opt for name, opt in _TRAINING_OPTIONS.items() if name != 'width'},
    },
    'bench': {
        'task': Option(str, 'mnist', "architecture preset", tuple(PRESETS)),
        'checkpoint': Option(str, None, "benchmark this checkpoint instead of a fresh preset"),
        'level': Option(int, None, "input level (default: preset)"),
        'width': Option(float, 1.0, "channel width multiplier"),
        'batch': Option(int, 8, "batch size"),
        'iters': Option(int, 64, "timed batches"),
    },
    'render': {
        'manifest': Option(str, None, "dataset manifest"),
        'checkpoint': Option(str, None, "segmentation checkpoint for prediction panoramas"),
        'index': Option(int, 0, "sample to render"),
        'width': Option(int, 512, "panorama width"),
        'height': Option(int, 256, "panorama height"),
        'out_dir': Option(str, 'render', "output directory"),
    },
}

REQUIRED = {
    'prepare-mnist': ('idx_dir', 'out_dir'),
    'synth': ('out_dir',),
    'train': ('train_manifest',),
    'eval': ('checkpoint', 'manifest'),
    'ablate': ('train_manifest', 'test_manifest'),
    'sweep': ('train_manifest', 'test_manifest'),
    'render': ('manifest',),
}


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = CliParser(prog='main.py', description="Spherical mesh CNN with parameterized differential operators")
    parser.add_argument('--config', help="KEY=VALUE file of option defaults")
    parser.add_argument('--seed', type=int, default=None, help="seed for every random stream (default 0)")
    parser.add_argument('--verbose', action='store_true', help="debug logging")
    sub = parser.add_subparsers(dest='command', parser_class=CliParser)
    for command, options in COMMAND_OPTIONS.items():
        cmd = sub.add_parser(command, help=f"{command} subcommand")
        # SUPPRESS keeps a global --seed from being reset by the subparser default
        cmd.add_argument('--seed', type=int, default=argparse.SUPPRESS, help="seed for every random stream")
        for name, opt in options.items():
            flag = '--' + name.replace('_', '-')
            if opt.flag:
                cmd.add_argument(flag, dest=name, action='store_const', const=True, default=None, help=opt.help)
            else:
                cmd.add_argument(flag, dest=name, type=opt.type, choices=opt.choices, default=None, help=opt.help)
    return parser


def resolve_settings(args):
    """Defaults < config file < PDOCNN_* environment < command-line flags."""
    options = dict(COMMAND_OPTIONS[args.command])
    options['seed'] = Option(int, 0, "seed")
    settings = {name: opt.default for name, opt in options.items()}
    layered = {}
    if args.config:
        layered.update(load_config_file(args.config, options))
    layered.update(environment_overrides(options))
    for name, raw in layered.items():
        opt = options[name]
        try:
            value = opt.type(raw)
        except ValueError:
            raise UsageError(f"Setting {name}={raw!r} is not a valid {opt.type.__name__}")
        if opt.choices and value not in opt.choices:
            raise UsageError(f"Setting {name}={value!r} must be one of {opt.choices}")
        settings[name] = value
    for name in options:
        value = getattr(args, name, None)
        if value is not None:
            settings[name] = value
    for name in REQUIRED.get(args.command, ()):
        if settings[name] in (None, ''):
            raise UsageError(f"{args.command}: --{name.replace('_', '-')} is required")
    return settings


def cmd_mesh(s):
    mesh = mesh_at_level(s['level'])
    stats = mesh.stats()
    print(f"level {stats.level}: V={stats.n_v} E={stats.n_e} F={stats.n_f}")
    ext = 'obj' if s['format'] == 'obj' else 'bin'
    out = s['out'] or f"icosphere_level{s['level']}.{ext}"
    if s['format'] == 'obj':
        write_obj(mesh, out)
    else:
        write_mesh_cache(mesh, out)
    print(f"✅ Wrote {out}")


def cmd_ops(s):
    level = s['level']
    mesh = mesh_at_level(level)
    ops = operator_set_at_level(level)
    out_dir = s['out_dir'] or f"operators_level{level}"
    for path in export_matrix_market(ops, out_dir):
        print(f"✅ Wrote {path}")
    summary = operator_summary(ops, mesh)
    print(f"📊 Operator summary for level {level} (V={mesh.n_v})")
    for name, value in summary['row_sum'].items():
        print(f"   max |row sum| {name:<10} {value:.3e}")
    print(f"   laplacian Rayleigh quotient on z  {summary['laplacian_rayleigh_z']:.6f} (expect -2)")
    print(f"   max |grad_y z - cos(lat)|         {summary['grady_z_max_error']:.3e}")
    print(f"   max |grad_x z|                    {summary['gradx_z_max_abs']:.3e}")


def cmd_gradcheck(s):
    checker = GradientChecker(level=s['level'], width=s['width'], seed=s['seed'],
                              inject_sign_flip=s['inject_sign_flip'])
    results = checker.run()
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericalError(f"Gradient check failed for {', '.join(failed)}")


def _idx_path(idx_dir, name):
    for candidate in (name, name + '.gz'):
        path = os.path.join(idx_dir, candidate)
        if os.path.exists(path):
            return path
    raise DataFormatError(f"Missing IDX file {os.path.join(idx_dir, name)}[.gz]")


def cmd_prepare_mnist(s):
    images_name, labels_name = MNIST_FILES[s['split']]
    images, labels = load_idx_arrays(_idx_path(s['idx_dir'], images_name), _idx_path(s['idx_dir'], labels_name))
    if s['limit'] > 0:
        images, labels = images[:s['limit']], labels[:s['limit']]
    spec = ProjectionSpec(lon0=np.radians(s['lon0']), extent=np.radians(s['delta']))
    print(f"🔧 Projecting {len(images)} digits onto level {s['level']} (patch ±{s['delta']}°)...")
    dataset = project_digits(images, labels, s['level'], spec)
    manifest = write_dataset(dataset, s['out_dir'])
    print(f"✅ Wrote {len(dataset)} samples, manifest {manifest}")


def cmd_synth(s):
    samples = synth_segmentation_set(s['level'], s['classes'], s['count'], s['seed'])
    manifest = write_dataset(SphericalDataset.from_samples(samples), s['out_dir'])
    print(f"✅ Wrote {len(samples)} synthetic samples, manifest {manifest}")


def _train_config(s):
    preset = TRAIN_PRESETS[s['task']]
    overrides = {
        'epochs': s['epochs'], 'lr': s['lr'], 'decay': s['decay'], 'decay_period': s['decay_period'],
        'batch_size': s['batch'], 'class_weight_mode': s['class_weights'], 'ignore_index': s['ignore_index'],
    }
    return replace(preset, seed=s['seed'], **{k: v for k, v in overrides.items() if v is not None})


def _spec_for(s, dataset, mask):
    overrides = {
        'input_level': dataset.level, 'in_channels': dataset.in_channels,
        'width_multiplier': s.get('width', 1.0), 'mask': mask,
    }
    if s['classes']:
        overrides['num_classes'] = s['classes']
    spec = preset_spec(s['task'], **overrides)
    if dataset.per_vertex != (spec.task == 'segmentation'):
        raise DataFormatError(f"Task {s['task']!r} is {spec.task} but the dataset has "
                              f"{'per-vertex' if dataset.per_vertex else 'per-sample'} labels")
    return spec


def cmd_train(s):
    config = _train_config(s)
    train_set = load_manifest(s['train_manifest'])
    val_set = load_manifest(s['val_manifest'], train_set.level) if s['val_manifest'] else None
    os.makedirs(s['out_dir'], exist_ok=True)
    trainer = Trainer(config, checkpoint_dir=s['out_dir'])
    start_epoch, optimizer_state = 0, None
    if s['resume']:
        ckpt = load_checkpoint(s['resume'])
        model = restore_model(ckpt)
        trainer.streams.set_state(ckpt.rng_state)
        start_epoch = ckpt.epoch
        optimizer_state = AdamState(ckpt.optimizer_step, ckpt.optimizer_m, ckpt.optimizer_v)
    else:
        spec = _spec_for(s, train_set, KernelMask.parse(s['mask']))
        model = build_model(spec, RngStreams(config.seed).stream('init'))
    print(f"📊 {s['task']}: {model.num_parameters()} parameters, {len(train_set)} training samples")
    report = trainer.train(model, train_set, val_set, start_epoch=start_epoch, optimizer_state=optimizer_state)
    report_path = os.path.join(s['out_dir'], 'report.tsv')
    report.write(report_path)
    final = os.path.join(s['out_dir'], 'model.ugsc')
    save_checkpoint(final, model, trainer.optimizer_state, config.epochs, trainer.streams.get_state())
    print(f"✅ Wrote {report_path} and {final}")


def _eval_weights(drop_classes, num_classes):
    try:
        dropped = [int(token) for token in drop_classes.split(',') if token.strip()]
    except ValueError:
        raise UsageError(f"--drop-classes expects comma-separated integers, got {drop_classes!r}")
    if not dropped:
        return None
    if any(not 0 <= c < num_classes for c in dropped):
        raise UsageError(f"--drop-classes {dropped} outside [0, {num_classes})")
    weights = np.ones(num_classes)
    weights[dropped] = 0.0
    return ClassWeights(weights)


def cmd_eval(s):
    wanted = [m.strip() for m in s['metric'].split(',') if m.strip()]
    unknown = [m for m in wanted if m not in METRICS]
    if unknown:
        raise UsageError(f"Unknown metric(s) {unknown}; choose from {METRICS}")
    model = restore_model(load_checkpoint(s['checkpoint']))
    dataset = load_manifest(s['manifest'], model.spec.input_level)
    weights = _eval_weights(s['drop_classes'], model.spec.num_classes)
    metrics = evaluate(model, dataset, class_weights=weights, ignore_index=s['ignore_index'])
    lines = format_metrics(metrics).splitlines()
    keep = {'accuracy': ('accuracy',), 'miou': ('miou',), 'per-class': ('class_',)}
    text = '\n'.join(line for line in lines if any(line.startswith(p) for m in wanted for p in keep[m])) + '\n'
    print(text, end='')
    if s['out']:
        with open(s['out'], 'w', encoding='utf-8', newline='\n') as handle:
            handle.write(text)


def cmd_ablate(s):
    masks = [KernelMask.parse(token.strip()) for token in s['masks'].split(',') if token.strip()]
    config = _train_config(s)
    train_set = load_manifest(s['train_manifest'])
    test_set = load_manifest(s['test_manifest'], train_set.level)
    base = _spec_for(s, train_set, masks[0] if masks else KernelMask())
    print(f"🔧 Ablating {len(masks)} kernels on {len(train_set)} samples...")
    table = ablation_run(base, masks, train_set, test_set, config, verbose=True).to_table()
    print(table, end='')
    if s['out']:
        with open(s['out'], 'w', encoding='utf-8', newline='\n') as handle:
            handle.write(table)


def cmd_sweep(s):
    try:
        widths = [float(token) for token in s['widths'].split(',') if token.strip()]
    except ValueError:
        raise UsageError(f"--widths expects comma-separated numbers, got {s['widths']!r}")
    config = _train_config(s)
    train_set = load_manifest(s['train_manifest'])
    test_set = load_manifest(s['test_manifest'], train_set.level)
    base = _spec_for(s, train_set, KernelMask.parse(s['mask']))
    print(f"🔧 Sweeping {len(widths)} widths on {len(train_set)} samples...")
    table = width_sweep(base, widths, train_set, test_set, config, verbose=True).to_table()
    print(table, end='')
    if s['out']:
        with open(s['out'], 'w', encoding='utf-8', newline='\n') as handle:
            handle.write(table)


def cmd_bench(s):
    if s['checkpoint']:
        model = restore_model(load_checkpoint(s['checkpoint']))
    else:
        overrides = {'width_multiplier': s['width']}
        if s['level'] is not None:
            overrides['input_level'] = s['level']
        model = build_model(preset_spec(s['task'], **overrides), RngStreams(s['seed']).stream('init'))
    print(benchmark_inference(model, s['batch'], s['iters'], s['seed']).line())


def _unit_range(values):
    low, high = values.min(), values.max()
    return np.zeros_like(values) if high == low else (values - low) / (high - low)


def cmd_render(s):
    dataset = load_manifest(s['manifest'])
    if not 0 <= s['index'] < len(dataset):
        raise UsageError(f"Sample index {s['index']} outside [0, {len(dataset)})")
    mesh = mesh_at_level(dataset.level)
    os.makedirs(s['out_dir'], exist_ok=True)
    features, labels = dataset.batch([s['index']])
    image = render_equirect(_unit_range(features[0, 0]), mesh, s['width'], s['height'])
    written = [os.path.join(s['out_dir'], 'input.pgm')]
    write_pnm(written[-1], image)
    if dataset.per_vertex:
        label_map = render_equirect(labels[0], mesh, s['width'], s['height'], mode='nearest')
        written.append(os.path.join(s['out_dir'], 'label.ppm'))
        write_pnm(written[-1], label_palette(np.rint(label_map.data[:, :, 0])))
    if s['checkpoint']:
        model = restore_model(load_checkpoint(s['checkpoint']))
        if model.spec.task != 'segmentation' or model.spec.input_level != dataset.level:
            raise DataFormatError(f"{s['checkpoint']}: need a level-{dataset.level} segmentation model, got "
                                  f"a level-{model.spec.input_level} {model.spec.task} model")
        logits = model.forward(input_tensor(model, features)).data
        pred = render_equirect(np.argmax(logits[0], axis=0), mesh, s['width'], s['height'], mode='nearest')
        written.append(os.path.join(s['out_dir'], 'prediction.ppm'))
        write_pnm(written[-1], label_palette(np.rint(pred.data[:, :, 0])))
    for path in written:
        print(f"✅ Wrote {path}")


COMMANDS = {
    'mesh': cmd_mesh,
    'ops': cmd_ops,
    'gradcheck': cmd_gradcheck,
    'prepare-mnist': cmd_prepare_mnist,
    'synth': cmd_synth,
    'train': cmd_train,
    'eval': cmd_eval,
    'ablate': cmd_ablate,
    'sweep': cmd_sweep,
    'bench': cmd_bench,
    'render': cmd_render,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format='%(levelname)s %(name)s: %(message)s')
        settings = resolve_settings(args)
        COMMANDS[args.command](settings)
    except Exception as exc:
        print(f"❌ Error: {exc}")
        return exit_code_for(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
