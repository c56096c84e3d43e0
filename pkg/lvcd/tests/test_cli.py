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
from glob import glob
import os
from os.path import isdir, isfile, join
import shutil
import numpy as np
from lvcd.cli import RunConfig, ablation_table, main, parser, schedule
from lvcd.data import DataConfig, gen_clip
from lvcd.edm import NoiseSchedule
from lvcd.model import Denoiser, load_checkpoint
from lvcd.metrics import EvalConfig
from lvcd.sampler import SamplerConfig
from lvcd.tests.test_model import tiny
from lvcd.training import TrainConfig
from lvcd.utils import ConfigError, FormatError


def run_config():
    """Small run used by the command line tests"""
    return RunConfig(data=DataConfig(clips=2, length=5, height=16, width=16),
                     model=tiny(),
                     train=TrainConfig(steps=1),
                     sample=SamplerConfig(overlap=1, shift=1,
                                          schedule=NoiseSchedule(T=2)),
                     eval=EvalConfig(size=32))


def test_run_config_roundtrip():
    """Test dumps and loads"""
    run = run_config()
    other = RunConfig.loads(run.dumps())
    assert other.to_dict() == run.to_dict()
    assert other.model == run.model
    assert other.sample.schedule.T == 2
    with open('run-test.json', 'w', encoding='utf-8') as fpt:
        fpt.write(run.dumps())
    assert RunConfig.load('run-test.json').data.clips == 2
    os.unlink('run-test.json')
    assert RunConfig.load(None).train.steps == 500


def test_run_config_errors():
    """Test unknown sections, unknown keys and invalid values"""
    for text in ['{"trian": {}}', '{"train": {"stepz": 1}}', '{"model": {"groups": 3}}',
                 '{"eval": []}', '[1, 2]', '{"train": ']:
        try:
            RunConfig.loads(text)
        except ConfigError:
            continue
        assert False, text
    try:
        RunConfig.load('missing-run.json')
    except FormatError:
        return
    assert False


def test_schedule():
    """Test the schedule subcommand"""
    class A:
        T = 25
        sigma_min = 0.002
        sigma_max = 700.0
        rho = 7.0
        out = 'schedule-test.csv'

    lines = schedule(A())
    assert lines[0] == 't,sigma'
    assert lines[1] == '25,700'
    assert lines[-1] == '1,0.002'
    assert len(lines) == 26
    with open('schedule-test.csv', encoding='utf-8') as fpt:
        assert fpt.read().splitlines() == lines
    os.unlink('schedule-test.csv')
    assert main(['schedule', '--T', '3', '--out', 'schedule-test.csv']) == 0
    with open('schedule-test.csv', encoding='utf-8') as fpt:
        assert len(fpt.read().splitlines()) == 4
    os.unlink('schedule-test.csv')


def test_pipeline():
    """Test datagen, train, sample, eval and ablate end to end"""
    with open('cli-run.json', 'w', encoding='utf-8') as fpt:
        fpt.write(run_config().dumps())
    assert main(['datagen', '--config', 'cli-run.json', '--out', 'cli-data']) == 0
    assert isfile(join('cli-data', 'manifest.json'))
    clip_dir = join('cli-data', 'clips', '00000')
    assert len(glob(join(clip_dir, 'frame_*.ppm'))) == 5
    assert main(['train', '--config', 'cli-run.json', '--data', 'cli-data',
                 '--out', 'cli.ckpt']) == 0
    with open('cli.ckpt.loss.csv', encoding='utf-8') as fpt:
        assert fpt.read().splitlines()[0] == 'step,loss,sigma'
    assert main(['sample', '--config', 'cli-run.json', '--ckpt', 'cli.ckpt',
                 '--sketches', clip_dir, '--reference', join(clip_dir, 'frame_00000.ppm'),
                 '--out', 'cli-out']) == 0
    assert len(glob(join('cli-out', 'frame_*.ppm'))) == 5
    assert main(['eval', '--config', 'cli-run.json', '--generated', 'cli-out',
                 '--original', clip_dir, '--out', 'cli-eval.csv']) == 0
    with open('cli-eval.csv', encoding='utf-8') as fpt:
        lines = fpt.read().splitlines()
    assert lines[0] == 'clip_id,psnr,ssim,tc,edmd'
    assert len(lines) == 2 and lines[1].startswith('cli-out,')
    assert main(['train', '--config', 'cli-run.json', '--data', 'cli-data',
                 '--out', 'cli-noref.ckpt', '--no-ref-attn']) == 0
    assert not load_checkpoint('cli-noref.ckpt').config.reference_attention
    assert main(['ablate', '--config', 'cli-run.json', '--ckpt', 'cli.ckpt',
                 '--ckpt-ref-attn', 'cli-noref.ckpt', '--data', 'cli-data',
                 '--out', 'cli-ablate.csv']) == 0
    with open('cli-ablate.csv', encoding='utf-8') as fpt:
        lines = fpt.read().splitlines()
    assert lines[0] == 'ablation,psnr,ssim,tc,edmd,color_error'
    assert [line.split(',')[0] for line in lines[1:]] == ['none', 'ref-attn', 'schemes',
                                                          'blend-only', 'prev-ref-only',
                                                          'prev-sample']
    assert main(['ablate', '--config', 'cli-run.json', '--data', 'cli-data',
                 '--overlap', '1', '2', '--out', 'cli-ablate.csv']) == 0
    with open('cli-ablate.csv', encoding='utf-8') as fpt:
        lines = fpt.read().splitlines()
    assert lines[0] == 'overlap,ratio,tc'
    assert [line.split(',')[0] for line in lines[1:]] == ['1', '2']
    assert main(['ablate', '--config', 'cli-run.json', '--data', 'cli-data',
                 '--overlap', '--out', 'cli-ablate.csv']) == 0
    with open('cli-ablate.csv', encoding='utf-8') as fpt:
        lines = fpt.read().splitlines()
    assert lines[0] == 'overlap,ratio,tc'
    assert [line.split(',')[0] for line in lines[1:]] == ['2']
    for dirname in ['cli-data', 'cli-out']:
        shutil.rmtree(dirname)
    for fname in ['cli-run.json', 'cli.ckpt', 'cli.ckpt.json', 'cli.ckpt.loss.csv',
                  'cli-noref.ckpt', 'cli-noref.ckpt.json', 'cli-noref.ckpt.loss.csv',
                  'cli-eval.csv', 'cli-ablate.csv']:
        os.unlink(fname)
    assert not isdir('cli-out')


def test_exit_codes():
    """Test the exit code of each failure"""
    assert main(['train', '--data', 'missing-data', '--out', 'x.ckpt']) == 3
    assert main(['sample', '--config', 'missing-run.json', '--sketches', '.',
                 '--reference', 'x.ppm', '--out', 'x']) == 3
    with open('bad-run.json', 'w', encoding='utf-8') as fpt:
        fpt.write('{"train": {"steps": -1}}\n')
    assert main(['train', '--config', 'bad-run.json', '--data', '.', '--out', 'x']) == 2
    os.unlink('bad-run.json')
    assert main(['schedule', '--T', '0']) == 2


def test_overlap_flag():
    """Test --overlap with and without values"""
    args = parser().parse_args(['ablate', '--overlap'])
    assert args.overlap == []
    assert parser().parse_args(['ablate']).overlap is None
    assert parser().parse_args(['ablate', '--overlap', '2', '4']).overlap == [2, 4]


def test_ablation_table_ref_attn_model():
    """Test the ref-attn row uses the model trained without reference attention"""
    clips = [gen_clip(k, length=4, H=16, W=16) for k in range(2)]
    config = SamplerConfig(overlap=1, shift=1, schedule=NoiseSchedule(T=2))
    eval_config = EvalConfig(size=None)
    den = Denoiser(config=tiny(), seed=0)
    other = Denoiser(config=tiny(reference_attention=False), seed=1)
    means, wins = ablation_table(den, clips, config, eval_config, ref_attn_denoiser=other)
    assert list(means) == ['none', 'ref-attn', 'schemes', 'blend-only', 'prev-ref-only',
                           'prev-sample']
    assert set(wins) == {'tc_schemes', 'tc_blend_only', 'tc_prev_ref_only',
                         'tc_prev_sample', 'color_ref_attn'}
    expected, _ = ablation_table(other, clips, config, eval_config)
    for key in ['psnr', 'ssim', 'color_error']:
        assert np.isclose(means['ref-attn'][key], expected['ref-attn'][key], equal_nan=True)
    shared, _ = ablation_table(den, clips, config, eval_config)
    assert any(not np.isclose(means['ref-attn'][key], shared['ref-attn'][key])
               for key in ['psnr', 'color_error'])
