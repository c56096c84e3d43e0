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
"""Training loop: batch assembly with the reference entry, the weighted
denoising loss and Adam over the selected parameter groups.

>>> from lvcd.data import gen_clip
>>> from lvcd.model import Denoiser, DenoiserConfig
>>> from lvcd.training import TrainConfig, train
>>> config = DenoiserConfig(base_channels=8, groups=4, frames=3, head_dim=8)
>>> clips = [gen_clip(0, length=6, H=32, W=32)]
>>> den, losses = train(TrainConfig(steps=2), clips, Denoiser(config=config))
>>> len(losses)
2
"""
from dataclasses import dataclass, field
import logging
import numpy as np
from joblib import Parallel, delayed
from sklearn.model_selection import train_test_split
from lvcd.data import build_training_sets
from lvcd.edm import TrainingNoiseConfig, dsm_loss, sample_training_sigma
from lvcd.model import (AttentionModeSchedule, Conditioning, Denoiser,
                        save_checkpoint, trainable_names)
from lvcd.tensor import mul
from lvcd.utils import ConfigError, NumericalError, Params, progress_bar, write_json
from lvcd.vae import encode

logger = logging.getLogger(__name__)
SIGMA_MODES = ('shared', 'per-entry')


@dataclass
class TrainConfig(Params):
    """Optimisation hyperparameters"""
    steps: int = 500
    batch_size: int = 1
    learning_rate: float = 5e-5
    trainable: str = 'finetune'
    pretrain_steps: int = 0
    checkpoint_every: int = 0
    seed: int = 0
    sigma_mode: str = 'shared'
    log_mean: float = 1.0
    log_std: float = 1.6
    use_controlnet: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_jobs: int = 1
    progress_bar: bool = False

    def __post_init__(self):
        if self.steps < 0 or self.pretrain_steps < 0 or self.checkpoint_every < 0:
            raise ConfigError('TrainConfig: step counts must be non-negative')
        if self.batch_size < 1:
            raise ConfigError(f'TrainConfig: batch_size must be positive, got {self.batch_size}')
        if self.learning_rate <= 0 or self.eps <= 0:
            raise ConfigError('TrainConfig: learning_rate and eps must be positive')
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError('TrainConfig: betas must lie in [0, 1)')
        if self.sigma_mode not in SIGMA_MODES:
            raise ConfigError(f'TrainConfig: sigma_mode must be one of {SIGMA_MODES}, '
                              f'got {self.sigma_mode}')

    @property
    def noise(self):
        """Distribution of the training noise levels"""
        return TrainingNoiseConfig(log_mean=self.log_mean, log_std=self.log_std)


@dataclass
class TrainingData:
    """Clips, their latents and the (clip, candidates, targets) sets"""
    clips: list
    N: int
    n_jobs: int = 1

    def __post_init__(self):
        if len(self.clips) == 0:
            raise ValueError('empty dataset')

    @property
    def latents(self):
        """Per-clip latents [L, 48, H/4, W/4]"""
        try:
            return self._latents
        except AttributeError:
            self._latents = Parallel(n_jobs=self.n_jobs)(delayed(encode)(clip.frames)
                                                          for clip in self.clips)
        return self._latents

    @property
    def sets(self):
        """Training sets of every clip long enough for N targets"""
        try:
            return self._sets
        except AttributeError:
            self._sets = [(index, candidates, targets)
                          for index, clip in enumerate(self.clips)
                          for candidates, targets in build_training_sets(len(clip), self.N)]
        if len(self._sets) == 0:
            raise ValueError(f'no clip is longer than {self.N} frames')
        return self._sets


@dataclass
class Batch:
    """N + 1 entries; entry 0 is the reference"""
    clean: np.ndarray
    cond: np.ndarray
    sketches: np.ndarray
    noise: np.ndarray
    sigma: object
    clip_index: int = 0
    reference_index: int = 0
    target_indices: list = field(default_factory=list)

    @property
    def noised(self):
        """clean + σ·noise"""
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.ndim:
            sigma = sigma.reshape((-1, ) + (1, ) * (self.clean.ndim - 1))
        return self.clean + sigma * self.noise


def assemble_batch(dataset, N: int, rng, noise: TrainingNoiseConfig=None,
                   sigma_mode: str='shared'):
    """Pick a training set and a reference among its candidates, and build
    the reference entry followed by the N window frames"""
    if not isinstance(dataset, TrainingData):
        if len(dataset) == 0:
            raise ValueError('empty dataset')
        dataset = TrainingData(clips=list(dataset), N=N)
    sets = dataset.sets
    clip_index, candidates, targets = sets[int(rng.integers(len(sets)))]
    reference = int(candidates[int(rng.integers(len(candidates)))])
    clip = dataset.clips[clip_index]
    latents = dataset.latents[clip_index]
    entries = [reference] + list(targets)
    clean = latents[entries]
    cond = np.repeat(latents[reference][np.newaxis], len(entries), axis=0)
    sketches = np.asarray(clip.sketches)[entries]
    size = None if sigma_mode == 'shared' else len(entries)
    sigma = sample_training_sigma(rng, noise, size=size)
    return Batch(clean=clean, cond=cond, sketches=sketches,
                 noise=rng.standard_normal(clean.shape), sigma=sigma,
                 clip_index=clip_index, reference_index=reference,
                 target_indices=list(targets))


class Adam:
    """Adam over the named parameters of a store; β and ε as configured"""

    def __init__(self, params, names, learning_rate=5e-5, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.params = params
        self.names = list(names)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros(params[name].shape) for name in self.names}
        self.v = {name: np.zeros(params[name].shape) for name in self.names}

    def step(self):
        """One update from the accumulated gradients"""
        self.t += 1
        correction1 = 1 - self.beta1 ** self.t
        correction2 = 1 - self.beta2 ** self.t
        for name in self.names:
            tensor = self.params[name]
            if tensor.grad is None:
                continue
            grad = tensor.grad.astype(np.float64)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad ** 2
            update = (self.m[name] / correction1) / (np.sqrt(self.v[name] / correction2)
                                                     + self.eps)
            tensor.data -= (self.learning_rate * update).astype(tensor.dtype)


def batch_loss(denoiser: Denoiser, batch: Batch, use_controlnet: bool=True):
    """Weighted denoising loss of one batch as a Tensor"""
    N = batch.clean.shape[0] - 1
    sketches = batch.sketches if use_controlnet else np.zeros_like(batch.sketches)
    cond = Conditioning(latents=batch.cond, sketches=sketches,
                        schedule=AttentionModeSchedule.standard(N),
                        use_controlnet=use_controlnet)

    def network(x, sigma, c):
        return denoiser.denoise(x, sigma, c, grad=True)

    return dsm_loss(network, batch.clean, cond, batch.sigma, batch.noise,
                    sigma_data=denoiser.sigma_data)


def _diagnostic(step, loss, batches, denoiser):
    norms = {name: float(np.linalg.norm(t.data)) for name, t in denoiser.params.items()}
    return dict(step=step, loss=str(loss),
                sigma=[np.asarray(b.sigma).tolist() for b in batches],
                clip=[b.clip_index for b in batches],
                reference=[b.reference_index for b in batches],
                targets=[b.target_indices for b in batches],
                non_finite=[name for name, t in denoiser.params.items()
                            if not np.isfinite(t.data).all()],
                norms=norms)


def _stage(denoiser, data, config, spec, steps, rng, offset, output, log):
    params = denoiser.params
    names = trainable_names(params, spec)
    if len(names) == 0:
        raise ConfigError(f'trainable: {spec} selects no parameter')
    params.freeze(names)
    optimizer = Adam(params, names, learning_rate=config.learning_rate,
                     beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    losses = []
    N = data.N
    for step in progress_bar(range(offset, offset + steps), total=steps,
                             use_tqdm=config.progress_bar, desc=f'train[{spec}]'):
        params.zero_grad()
        batches = [assemble_batch(data, N, rng, noise=config.noise,
                                  sigma_mode=config.sigma_mode)
                   for _ in range(config.batch_size)]
        total = None
        for batch in batches:
            loss = batch_loss(denoiser, batch, use_controlnet=config.use_controlnet)
            total = loss if total is None else total + loss
        total = mul(total, 1.0 / len(batches))
        value = float(total.item())
        sigma = float(np.mean([np.mean(b.sigma) for b in batches]))
        if not np.isfinite(value):
            report = _diagnostic(step, value, batches, denoiser)
            logger.error('non-finite loss at step %d: %s', step, report)
            if output is not None:
                write_json(f'{output}.diag.json', report)
            raise NumericalError(f'non-finite loss {value} at step {step}')
        total.backward()
        optimizer.step()
        losses.append(value)
        if log is not None:
            log.write(f'{step + 1},{value!r},{sigma!r}\n')
        if output is not None and config.checkpoint_every and \
           (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(output, params, denoiser.config)
            logger.info('checkpoint %s at step %d', output, step + 1)
    return losses


def train(config: TrainConfig, dataset, denoiser: Denoiser=None, output: str=None,
          loss_log: str=None):
    """Optimise `denoiser` on `dataset` (clips or :py:class:`TrainingData`);
    returns the denoiser and the per-step losses.

    ``pretrain_steps`` update every parameter before the ``trainable``
    groups are finetuned for ``steps``. The checkpoint ``output`` is written
    every ``checkpoint_every`` steps and at the end; ``loss_log`` receives
    the CSV ``step,loss,sigma``.
    """
    denoiser = Denoiser(seed=config.seed) if denoiser is None else denoiser
    data = dataset if isinstance(dataset, TrainingData) else \
        TrainingData(clips=list(dataset), N=denoiser.config.frames, n_jobs=config.n_jobs)
    if data.N != denoiser.config.frames:
        raise ConfigError(f'dataset windows of {data.N} frames, model expects '
                          f'{denoiser.config.frames}')
    rng = np.random.default_rng(config.seed)
    log = None
    if loss_log is not None:
        log = open(loss_log, 'w', encoding='utf-8')
        log.write('step,loss,sigma\n')
    try:
        losses = []
        if config.pretrain_steps:
            losses += _stage(denoiser, data, config, 'all', config.pretrain_steps,
                             rng, 0, output, log)
        losses += _stage(denoiser, data, config, config.trainable, config.steps,
                         rng, config.pretrain_steps, output, log)
    finally:
        if log is not None:
            log.close()
    denoiser.params.freeze(denoiser.params.names())
    if output is not None:
        save_checkpoint(output, denoiser.params, denoiser.config)
    return denoiser, losses


def split_dataset(clips, test_size=0.1, seed: int=0):
    """Train and held-out clips"""
    if len(clips) < 2:
        raise ValueError('at least two clips are needed for a held-out split')
    return train_test_split(list(clips), test_size=test_size, random_state=seed)
