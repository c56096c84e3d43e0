# Copyright 2024 The LVCD Authors

# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at

#     http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Command line: datagen, train, sample, eval, schedule and ablate.

Exit codes: 0 ok, 2 configuration, 3 input/output, 4 numerical failure.
"""
import argparse
from dataclasses import dataclass, field
from glob import glob
import json
import logging
import os
from os.path import basename, isdir, isfile, join
import sys
import numpy as np
from joblib import Parallel, delayed
from sklearn.base import clone
from microtc.utils import tweet_iterator
from lvcd.data import (ClipFilterConfig, DataConfig, extract_sketch, generate_dataset,
                       load_dataset, read_flows, read_frames, read_sketches, save_dataset)
from lvcd.edm import NoiseSchedule
from lvcd.metrics import (EvalConfig, color_error, evaluate_clip, mean_motion, tc)
from lvcd.model import Denoiser, DenoiserConfig, load_checkpoint
from lvcd.sampler import (ABLATIONS, DEFAULT_OVERLAPS, SamplerConfig, overlap_sweep,
                          sample_long)
from lvcd.training import TrainConfig, train as train_model
from lvcd.utils import (ConfigError, FormatError, NumericalError, read_ppm,
                        write_ppm)
import lvcd

logger = logging.getLogger('lvcd')
SECTIONS = ('data', 'filter', 'model', 'train', 'sample', 'eval')
LARGE_MOTION = 5.0


def _section(cls, values, name):
    if not isinstance(values, dict):
        raise ConfigError(f'[{name}] must be an object, got {type(values).__name__}')
    return cls().set_params(**values)


@dataclass
class RunConfig:
    """Every module configuration of a run, one section per module"""
    data: DataConfig = field(default_factory=DataConfig)
    filter: ClipFilterConfig = field(default_factory=ClipFilterConfig)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, document):
        """Validate a parsed document; unknown sections or keys raise ConfigError"""
        if not isinstance(document, dict):
            raise ConfigError('run configuration must be a JSON object')
        unknown = set(document) - set(SECTIONS)
        if unknown:
            raise ConfigError(f'unknown configuration sections: {sorted(unknown)}')
        kwargs = {}
        for name, section in (('data', DataConfig), ('filter', ClipFilterConfig),
                              ('train', TrainConfig), ('eval', EvalConfig)):
            if name in document:
                kwargs[name] = _section(section, document[name], name)
        if 'model' in document:
            model = dict(document['model'])
            if 'channel_mult' in model:
                model['channel_mult'] = tuple(model['channel_mult'])
            kwargs['model'] = _section(DenoiserConfig, model, 'model')
        if 'sample' in document:
            sample = dict(document['sample'])
            if 'schedule' in sample:
                sample['schedule'] = _section(NoiseSchedule, sample['schedule'],
                                              'sample.schedule')
            kwargs['sample'] = _section(SamplerConfig, sample, 'sample')
        return cls(**kwargs)

    def to_dict(self):
        """JSON-ready document"""
        model = self.model.get_params()
        model['channel_mult'] = list(model['channel_mult'])
        sample = self.sample.get_params()
        sample['schedule'] = self.sample.schedule.get_params()
        return dict(data=self.data.get_params(), filter=self.filter.get_params(),
                    model=model, train=self.train.get_params(), sample=sample,
                    eval=self.eval.get_params())

    @classmethod
    def loads(cls, text):
        """Parse a JSON document"""
        try:
            document = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f'invalid configuration: {exc}') from exc
        return cls.from_dict(document)

    def dumps(self):
        """Single-line JSON"""
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def load(cls, fname):
        """Read a configuration file (JSON, optionally gzip)"""
        if fname is None:
            return cls()
        if not isfile(fname):
            raise FormatError(f'{fname}: configuration file not found')
        try:
            document = next(tweet_iterator(fname))
        except StopIteration as exc:
            raise ConfigError(f'{fname}: empty configuration') from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f'{fname}: invalid configuration ({exc})') from exc
        return cls.from_dict(document)


def _override(config, **kwargs):
    """Clone of `config` with the non-None command line values"""
    values = {k: v for k, v in kwargs.items() if v is not None}
    if not values:
        return config
    return clone(config).set_params(**values)


def _denoiser(ckpt, run):
    if ckpt is None:
        return Denoiser(config=run.model, seed=run.train.seed)
    if not isfile(ckpt):
        raise FormatError(f'{ckpt}: checkpoint not found')
    return load_checkpoint(ckpt)


def _write_frames(dirname, frames, prefix='frame'):
    os.makedirs(dirname, exist_ok=True)
    for k, frame in enumerate(frames):
        write_ppm(join(dirname, f'{prefix}_{k:05d}.ppm'), np.clip(frame, 0, 1))


def datagen(args):
    """Synthetic clips on disk"""
    run = RunConfig.load(args.config)
    config = _override(run.data, clips=args.clips, seed=args.seed,
                       length=args.length, height=args.height, width=args.width,
                       curate=True if args.curate else None)
    clips = generate_dataset(config, run.filter, use_tqdm=args.progress)
    if not clips:
        raise ConfigError('datagen: curation removed every clip')
    save_dataset(args.out, clips)
    logger.info('%d clips written to %s', len(clips), args.out)
    return clips


def train(args):
    """Train on a dataset written by datagen"""
    run = RunConfig.load(args.config)
    if not isdir(args.data):
        raise FormatError(f'{args.data}: dataset directory not found')
    clips = load_dataset(args.data, n_jobs=run.data.n_jobs)
    config = _override(run.train, steps=args.steps, seed=args.seed)
    model = run.model
    if args.no_ref_attn:
        model = clone(model).set_params(reference_attention=False)
    denoiser = Denoiser(config=model, seed=config.seed)
    loss_log = args.loss_log if args.loss_log is not None else f'{args.out}.loss.csv'
    _, losses = train_model(config, clips, denoiser, output=args.out, loss_log=loss_log)
    logger.info('final loss %s', losses[-1] if losses else None)
    return losses


def sample(args):
    """Colorize a directory of sketches from one reference frame"""
    run = RunConfig.load(args.config)
    denoiser = _denoiser(args.ckpt, run)
    if not isdir(args.sketches):
        raise FormatError(f'{args.sketches}: sketch directory not found')
    if not isfile(args.reference):
        raise FormatError(f'{args.reference}: reference frame not found')
    sketches = read_sketches(args.sketches)
    reference = read_ppm(args.reference)
    config = _override(run.sample, ablation=args.ablate, overlap=args.overlap,
                       seed=args.seed)
    frames = sample_long(denoiser, sketches, reference, config)
    _write_frames(args.out, frames)
    logger.info('%d frames written to %s', len(frames), args.out)
    return frames


def _clip_dirs(generated, original):
    """(clip_id, generated dir, original dir) pairs"""
    if glob(join(generated, 'frame_*.ppm')):
        return [(basename(os.path.normpath(generated)), generated, original)]
    output = []
    for dirname in sorted(glob(join(generated, '*'))):
        if not isdir(dirname):
            continue
        clip_id = basename(dirname)
        target = join(original, clip_id)
        if not isdir(target):
            target = join(original, 'clips', clip_id)
        output.append((clip_id, dirname, target))
    if not output:
        raise FormatError(f'{generated}: no generated frames')
    return output


def _evaluate_dir(clip_id, generated_dir, original_dir, flows_dir, config):
    generated = read_frames(generated_dir)
    original = read_frames(original_dir)
    if generated.shape != original.shape:
        raise FormatError(f'{clip_id}: generated {generated.shape} and original '
                          f'{original.shape} differ')
    flows = read_flows(flows_dir)
    if glob(join(original_dir, 'sketch_*.ppm')):
        sketches = read_sketches(original_dir)
    else:
        sketches = np.stack([extract_sketch(frame, threshold=config.threshold)
                             for frame in original])
    res = evaluate_clip(generated, original, flows, sketches, config)
    res['clip_id'] = clip_id
    return res


def evaluate(args):
    """psnr, ssim, tc and edmd per clip as CSV"""
    run = RunConfig.load(args.config)
    pairs = _clip_dirs(args.generated, args.original)
    flows = args.flows
    rows = Parallel(n_jobs=run.data.n_jobs)(
        delayed(_evaluate_dir)(clip_id, gen, orig,
                               orig if flows is None else (flows if len(pairs) == 1
                                                           else join(flows, clip_id)),
                               run.eval)
        for clip_id, gen, orig in pairs)
    with open(args.out, 'w', encoding='utf-8') as fpt:
        fpt.write('clip_id,psnr,ssim,tc,edmd\n')
        for row in rows:
            fpt.write(f'{row["clip_id"]},{row["psnr"]!r},{row["ssim"]!r},'
                      f'{row["tc"]!r},{row["edmd"]!r}\n')
    return rows


def schedule(args):
    """σ ladder as CSV, from t = T down to 1"""
    sched = NoiseSchedule(sigma_min=args.sigma_min, sigma_max=args.sigma_max,
                          rho=args.rho, T=args.T)
    lines = ['t,sigma'] + [f'{t},{sched.sigma_at(t):.17g}' for t in range(sched.T, 0, -1)]
    text = '\n'.join(lines) + '\n'
    if args.out is None:
        sys.stdout.write(text)
    else:
        with open(args.out, 'w', encoding='utf-8') as fpt:
            fpt.write(text)
    return lines


def _test_clips(args, run):
    if args.data is not None:
        if not isdir(args.data):
            raise FormatError(f'{args.data}: dataset directory not found')
        return load_dataset(args.data, n_jobs=run.data.n_jobs)
    config = clone(run.data).set_params(seed=run.data.seed + run.data.clips,
                                        curate=False)
    return generate_dataset(config, use_tqdm=args.progress)


def _ablation_row(denoiser, clip, config, eval_config):
    """Generate frames 1 ... L-1 from frame 0 and score them"""
    frames = sample_long(denoiser, clip.sketches[1:], clip.frames[0], config,
                         reference_sketch=clip.sketches[0])
    original = clip.frames[1:]
    res = evaluate_clip(frames, original, clip.flows[1:], clip.sketches[1:], eval_config)
    res['color_error'] = color_error(frames, clip.labels[1:], clip.palette)
    res['motion'] = mean_motion(clip.flows[1:], size=eval_config.size)
    res['clip_id'] = clip.clip_id
    return res


def _fraction(values):
    return float(np.mean(values)) if len(values) else float('nan')


def ablation_table(denoiser, clips, config: SamplerConfig, eval_config: EvalConfig,
                   n_jobs: int=1, ref_attn_denoiser=None):
    """Per-ablation means and the fraction of clips where the full method
    wins each comparison

    :param ref_attn_denoiser: model trained without reference attention, used
        for the ref-attn row; without it that row switches the reference keys
        off in ``denoiser`` at sampling time
    """
    if ref_attn_denoiser is None:
        logger.warning('ref-attn row: no model trained without reference attention; '
                       'switching the reference keys off at sampling time')
    elif ref_attn_denoiser.config.reference_attention:
        logger.warning('ref-attn row: the given model was trained with '
                       'reference attention')
    results = {}
    for ablation in ABLATIONS:
        run_config = clone(config).set_params(ablation=ablation)
        model = denoiser
        if ablation == 'ref-attn' and ref_attn_denoiser is not None:
            model = ref_attn_denoiser
        results[ablation] = Parallel(n_jobs=n_jobs)(
            delayed(_ablation_row)(model, clip, run_config, eval_config)
            for clip in clips)
    keys = ('psnr', 'ssim', 'tc', 'edmd', 'color_error')
    means = {ablation: {key: float(np.mean([row[key] for row in rows])) for key in keys}
             for ablation, rows in results.items()}
    full = results['none']
    wins = {f'tc_{ablation.replace("-", "_")}':
            _fraction([f['tc'] < a['tc'] for f, a in zip(full, results[ablation])])
            for ablation in ('schemes', 'blend-only', 'prev-ref-only', 'prev-sample')}
    wins['color_ref_attn'] = _fraction([f['color_error'] < a['color_error']
                                        for f, a in zip(full, results['ref-attn'])
                                        if f['motion'] > LARGE_MOTION])
    return means, wins


def ablate(args):
    """Ablation table, or the overlap sweep with ``--overlap``"""
    run = RunConfig.load(args.config)
    denoiser = _denoiser(args.ckpt, run)
    clips = _test_clips(args, run)
    lines = []
    if args.overlap is not None:
        overlaps = tuple(args.overlap) or DEFAULT_OVERLAPS
        rows = {}
        for clip in clips:
            for entry in overlap_sweep(denoiser, clip.sketches[1:], clip.frames[0],
                                       run.sample, overlaps=overlaps,
                                       reference_sketch=clip.sketches[0]):
                value = tc(entry['frames'], clip.frames[1:], clip.flows[1:],
                           config=run.eval)
                rows.setdefault(entry['overlap'], []).append((entry['ratio'], value))
        lines.append('overlap,ratio,tc')
        for o in sorted(rows):
            ratio, value = np.mean(rows[o], axis=0)
            lines.append(f'{o},{ratio!r},{value!r}')
    else:
        ref_attn = None
        if args.ckpt_ref_attn is not None:
            ref_attn = _denoiser(args.ckpt_ref_attn, run)
        means, wins = ablation_table(denoiser, clips, run.sample, run.eval,
                                     n_jobs=run.data.n_jobs, ref_attn_denoiser=ref_attn)
        lines.append('ablation,psnr,ssim,tc,edmd,color_error')
        for ablation, values in means.items():
            lines.append(','.join([ablation] + [repr(values[key]) for key in
                                                ('psnr', 'ssim', 'tc', 'edmd',
                                                 'color_error')]))
        for key, value in wins.items():
            logger.info('full method wins %s on %.2f of the clips', key, value)
    text = '\n'.join(lines) + '\n'
    if args.out is None:
        sys.stdout.write(text)
    else:
        with open(args.out, 'w', encoding='utf-8') as fpt:
            fpt.write(text)
    return lines


def parser():
    """Argument parser with one subcommand per operation"""
    main_parser = argparse.ArgumentParser(description='Lineart video colorization',
                                          prog='lvcd')
    main_parser.add_argument('-v', '--version', action='version',
                             version=f'LVCD {lvcd.__version__}')
    main_parser.add_argument('--verbose', help='Log progress messages',
                             action='store_true')
    main_parser.add_argument('--progress', help='Show progress bars',
                             action='store_true')
    sub = main_parser.add_subparsers(dest='command', required=True)

    cmd = sub.add_parser('datagen', help='Generate synthetic clips')
    cmd.add_argument('--out', required=True, help='Output directory')
    cmd.add_argument('--config', default=None, help='Run configuration (JSON)')
    cmd.add_argument('--clips', type=int, default=None, help='Number of clips')
    cmd.add_argument('--seed', type=int, default=None)
    cmd.add_argument('--length', type=int, default=None, help='Frames per clip')
    cmd.add_argument('--height', type=int, default=None)
    cmd.add_argument('--width', type=int, default=None)
    cmd.add_argument('--curate', action='store_true',
                     help='Split into scenes and filter lengths')
    cmd.set_defaults(func=datagen)

    cmd = sub.add_parser('train', help='Train the denoiser')
    cmd.add_argument('--data', required=True, help='Dataset directory')
    cmd.add_argument('--out', required=True, help='Checkpoint filename')
    cmd.add_argument('--config', default=None)
    cmd.add_argument('--steps', type=int, default=None)
    cmd.add_argument('--seed', type=int, default=None)
    cmd.add_argument('--loss-log', dest='loss_log', default=None,
                     help='Loss CSV (default: <out>.loss.csv)')
    cmd.add_argument('--no-ref-attn', dest='no_ref_attn', action='store_true',
                     help='Train without reference attention')
    cmd.set_defaults(func=train)

    cmd = sub.add_parser('sample', help='Colorize a sketch sequence')
    cmd.add_argument('--ckpt', default=None, help='Checkpoint (random model if omitted)')
    cmd.add_argument('--sketches', required=True, help='Directory of sketch_*.ppm')
    cmd.add_argument('--reference', required=True, help='Reference frame (PPM)')
    cmd.add_argument('--out', required=True, help='Output directory')
    cmd.add_argument('--config', default=None)
    cmd.add_argument('--ablate', default=None, choices=ABLATIONS[1:])
    cmd.add_argument('--overlap', type=int, default=None)
    cmd.add_argument('--seed', type=int, default=None)
    cmd.set_defaults(func=sample)

    cmd = sub.add_parser('eval', help='Score generated clips')
    cmd.add_argument('--generated', required=True)
    cmd.add_argument('--original', required=True)
    cmd.add_argument('--flows', default=None, help='Flow directory (default: original)')
    cmd.add_argument('--out', required=True, help='CSV filename')
    cmd.add_argument('--config', default=None)
    cmd.set_defaults(func=evaluate)

    cmd = sub.add_parser('schedule', help='Print the noise schedule')
    cmd.add_argument('--T', type=int, default=25)
    cmd.add_argument('--sigma-min', dest='sigma_min', type=float, default=0.002)
    cmd.add_argument('--sigma-max', dest='sigma_max', type=float, default=700.0)
    cmd.add_argument('--rho', type=float, default=7.0)
    cmd.add_argument('--out', default=None)
    cmd.set_defaults(func=schedule)

    cmd = sub.add_parser('ablate', help='Ablation table or overlap sweep')
    cmd.add_argument('--config', default=None)
    cmd.add_argument('--ckpt', default=None)
    cmd.add_argument('--data', default=None,
                     help='Test dataset (generated from the config when omitted)')
    cmd.add_argument('--ckpt-ref-attn', dest='ckpt_ref_attn', default=None,
                     help='Checkpoint trained without reference attention')
    cmd.add_argument('--overlap', type=int, nargs='*', default=None,
                     help='Overlap sweep (default overlaps when given without values)')
    cmd.add_argument('--out', default=None)
    cmd.set_defaults(func=ablate)
    return main_parser


def main(argv=None):
    """Run a subcommand and return the exit code"""
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format='%(levelname)s %(name)s: %(message)s')
    try:
        args.func(args)
    except ConfigError as exc:
        logger.error('configuration error: %s', exc)
        return 2
    except NumericalError as exc:
        logger.error('numerical failure: %s', exc)
        return 4
    except (FormatError, OSError) as exc:
        logger.error('%s', exc)
        return 3
    except ValueError as exc:
        logger.error('invalid input: %s', exc)
        return 2
    return 0


if __name__ == '__main__':
    sys.exit(main())
