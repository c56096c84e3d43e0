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
"""Euler sampling of one segment and sequential sampling of long videos
with overlapped blending and prev-reference attention

>>> from lvcd.sampler import plan_segments
>>> plan_segments(64, 14, 4).segments[1]
(11, 24)
"""
from dataclasses import dataclass, field
import logging
import time
import numpy as np
from sklearn.base import clone
from lvcd.edm import NoiseSchedule
from lvcd.model import AttentionModeSchedule, Conditioning, Denoiser
from lvcd.utils import ConfigError, Params, progress_bar
from lvcd.vae import decode, encode

logger = logging.getLogger(__name__)

ABLATIONS = ('none', 'ref-attn', 'schemes', 'blend-only', 'prev-ref-only', 'prev-sample')
DEFAULT_OVERLAPS = (2, 4, 6, 8, 10)


@dataclass
class SegmentPlan:
    """Inclusive 1-based frame ranges; ``overlaps[n]`` is the number of frames
    segment ``n`` shares with its predecessor (0 for the first one)"""
    L: int
    N: int
    o: int
    segments: list
    overlaps: list

    def __len__(self):
        return len(self.segments)


def plan_segments(L: int, N: int, o: int) -> SegmentPlan:
    """Segment n covers (n-1)(N-o)+1 ... (n-1)(N-o)+N; a remainder is covered
    by a final segment ending at L"""
    if not 0 <= o < N:
        raise ValueError(f'overlap must satisfy 0 <= o < N, got o={o}, N={N}')
    if L < N:
        raise ValueError(f'{L} frames is shorter than one segment of {N}; '
                         'pad the sketch sequence to at least N frames')
    segments = []
    overlaps = []
    start = 1
    while start + N - 1 <= L:
        segments.append((start, start + N - 1))
        overlaps.append(o if segments[1:] else 0)
        start += N - o
    last_end = segments[-1][1]
    if last_end < L:
        start = L - N + 1
        segments.append((start, L))
        overlaps.append(last_end - start + 1)
    return SegmentPlan(L=L, N=N, o=o, segments=segments, overlaps=overlaps)


def euler_step(x_t, denoised, sigma_t: float, sigma_prev: float):
    """x_{t-1} = (σ_{t-1}/σ_t)·x_t + ((σ_t - σ_{t-1})/σ_t)·denoised"""
    if sigma_t == 0:
        raise ValueError('euler_step: sigma_t must be positive')
    if not 0 <= sigma_prev <= sigma_t:
        raise ValueError(f'euler_step: requires 0 <= sigma_prev <= sigma_t, '
                         f'got {sigma_prev}, {sigma_t}')
    if sigma_prev == 0:
        return np.array(denoised, copy=True)
    return x_t + float((sigma_t - sigma_prev) / sigma_t) * (denoised - x_t)


@dataclass
class BlendCache:
    """Denoiser outputs of the last ``overlap`` frames of a segment, per t"""
    overlap: int
    outputs: dict = field(default_factory=dict)

    def __contains__(self, t):
        return t in self.outputs

    def __getitem__(self, t):
        return self.outputs[t]

    def store(self, t: int, value):
        """Outputs at timestep t"""
        self.outputs[t] = np.array(value, copy=True)

    def complete(self, T: int):
        """Populated for every t in [1, T]"""
        return all(t in self.outputs for t in range(1, T + 1))


@dataclass
class SamplerConfig(Params):
    """Sampling hyperparameters

    ``ablation`` is none | ref-attn | schemes | blend-only | prev-ref-only |
    prev-sample and ``reference_noise`` is trajectory | fixed.
    """
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    overlap: int = 4
    alpha: float = 10.0
    shift: int = 3
    seed: int = 0
    ablation: str = 'none'
    reference_noise: str = 'trajectory'
    use_controlnet: bool = True
    progress_bar: bool = False

    def __post_init__(self):
        if self.overlap < 0 or self.shift < 0:
            raise ConfigError('SamplerConfig: overlap and shift must be non-negative')
        if self.alpha <= 0:
            raise ConfigError(f'SamplerConfig: alpha must be positive, got {self.alpha}')
        if self.ablation not in ABLATIONS:
            raise ConfigError(f'SamplerConfig: ablation must be one of {ABLATIONS}')
        if self.reference_noise not in ('trajectory', 'fixed'):
            raise ConfigError('SamplerConfig: reference_noise must be trajectory | fixed')

    @property
    def blending(self):
        """Overlapped blending with amplified overlap attention is active"""
        return self.ablation in ('none', 'ref-attn', 'blend-only')

    @property
    def prev_reference(self):
        """Prev-reference attention is active"""
        return self.ablation in ('none', 'ref-attn', 'prev-ref-only')

    @property
    def schemes(self):
        """At least one of the sequential sampling schemes is active"""
        return self.blending or self.prev_reference


@dataclass
class ReferenceBundle:
    """Reference-path entries: element 0 is the global reference, the rest
    are previous results of the overlapped frames"""
    latents: np.ndarray
    sketches: np.ndarray

    def __post_init__(self):
        if len(self.latents) != len(self.sketches):
            raise ValueError(f'{len(self.latents)} bundle latents but '
                             f'{len(self.sketches)} sketches')

    @property
    def R(self):
        """Number of elements"""
        return len(self.latents)


def sample_segment(denoiser: Denoiser, sketches, reference, bundle: ReferenceBundle,
                   cache: BlendCache=None, config: SamplerConfig=None, rng=None,
                   schedule: AttentionModeSchedule=None, overlap_next: int=0,
                   denoise_fn=None, trace: dict=None):
    """Denoise ``N = len(sketches)`` frames from pure noise

    :param reference: encoded global reference, the condition latent of every frame
    :param cache: outputs of the previous segment; replaces the outputs of the
        first ``cache.overlap`` frames at every step
    :param overlap_next: number of trailing frames recorded in the returned cache
    :param denoise_fn: ``f(x, sigma, cond)`` replacing ``denoiser.denoise``
    :param trace: filled with the post-blend frame outputs of every t
    :returns: final latents [N, C, h, w] and the new :py:class:`BlendCache`
    """
    config = SamplerConfig() if config is None else config
    rng = np.random.default_rng(config.seed) if rng is None else rng
    sketches = np.asarray(sketches)
    reference = np.asarray(reference, dtype=np.float64)
    N = sketches.shape[0]
    R = bundle.R
    if schedule is None:
        schedule = AttentionModeSchedule.standard(N)
    if cache is not None and schedule.is_standard:
        raise ValueError('overlapped blending requires the overlap attention modes; '
                         'got a blend cache with a Standard schedule')
    schedule.validate(R, N)
    if denoise_fn is None:
        denoise_fn = denoiser.denoise
    ladder = config.schedule.ladder()
    T = config.schedule.T
    shape = (N, ) + reference.shape
    x = rng.standard_normal(shape) * ladder[0]
    ref_latents = np.asarray(bundle.latents, dtype=np.float64)
    ref_noise = rng.standard_normal(ref_latents.shape)
    ref_state = ref_latents + ladder[0] * ref_noise
    cond = Conditioning(latents=np.concatenate([ref_latents,
                                                np.repeat(reference[np.newaxis], N, axis=0)]),
                        sketches=np.concatenate([bundle.sketches, sketches]),
                        schedule=schedule, use_controlnet=config.use_controlnet)
    new_cache = BlendCache(overlap=overlap_next)
    for step, t in enumerate(range(T, 0, -1)):
        sigma_t, sigma_prev = ladder[step], ladder[step + 1]
        state = np.concatenate([ref_state, x])
        output = np.asarray(denoise_fn(state, sigma_t, cond), dtype=np.float64)
        frames = output[R:].copy()
        if cache is not None and cache.overlap:
            frames[:cache.overlap] = cache[t]
        if overlap_next:
            new_cache.store(t, frames[N - overlap_next:])
        if trace is not None:
            trace[t] = frames.copy()
        x = euler_step(x, frames, sigma_t, sigma_prev)
        if config.reference_noise == 'fixed':
            ref_state = ref_latents + sigma_prev * ref_noise
        else:
            ref_state = euler_step(ref_state, output[:R], sigma_t, sigma_prev)
    return x, new_cache


def _ablated(denoiser: Denoiser, config: SamplerConfig):
    if config.ablation != 'ref-attn' or denoiser is None:
        return denoiser
    model_config = clone(denoiser.config).set_params(reference_attention=False)
    output = Denoiser(config=model_config, seed=denoiser.seed,
                      sigma_data=denoiser.sigma_data)
    output.params = denoiser.params
    return output


def sample_long(denoiser: Denoiser, sketches, reference_frame, config: SamplerConfig=None,
                reference_sketch=None, return_latents: bool=False, denoise_fn=None):
    """Colorize ``L = len(sketches)`` frames segment by segment

    :param sketches: [L, 1, H, W] line drawings
    :param reference_frame: colored [3, H, W] frame
    :param reference_sketch: sketch of the reference (extracted when omitted)
    :returns: decoded frames [L, 3, H, W] (and the latents with ``return_latents``)
    """
    from lvcd.data import extract_sketch

    config = SamplerConfig() if config is None else config
    sketches = np.asarray(sketches)
    L = sketches.shape[0]
    N = denoiser.config.frames if denoiser is not None else L
    # a single segment has nothing to overlap with
    plan = plan_segments(L, N, config.overlap if L > N else 0)
    shift = config.shift
    if len(plan) > 1 and config.prev_reference and shift > config.overlap:
        raise ConfigError(f'shift {shift} exceeds overlap {config.overlap}; '
                          'prev-reference keys would precede the segment')
    model = _ablated(denoiser, config)
    x0 = encode(reference_frame)
    if reference_sketch is None:
        reference_sketch = extract_sketch(reference_frame)
    reference_sketch = np.asarray(reference_sketch, dtype=np.float32).reshape(sketches.shape[1:])
    current_ref, current_sketch = x0, reference_sketch
    rng = np.random.default_rng(config.seed)
    emitted = []
    cache = None
    previous = None
    segments = progress_bar(list(enumerate(plan.segments, start=1)), total=len(plan),
                            desc='segments', use_tqdm=config.progress_bar)
    for n, (start, end) in segments:
        seg_sketches = sketches[start - 1:end]
        o_prev = plan.overlaps[n - 1]
        o_next = plan.overlaps[n] if n < len(plan) else 0
        if n == 1 or not config.schemes:
            schedule = AttentionModeSchedule.standard(N)
            bundle = ReferenceBundle(latents=current_ref[np.newaxis],
                                     sketches=current_sketch[np.newaxis])
            blend = None
        else:
            schedule = AttentionModeSchedule.for_segment(n, N, o_prev, shift=shift,
                                                         alpha=config.alpha,
                                                         blending=config.blending,
                                                         prev_reference=config.prev_reference)
            bundle = ReferenceBundle(
                latents=np.concatenate([x0[np.newaxis], previous[N - o_prev:]]),
                sketches=np.concatenate([reference_sketch[np.newaxis],
                                         seg_sketches[:o_prev]]))
            blend = cache if o_prev and config.blending else None
        latents, cache = sample_segment(model, seg_sketches, current_ref, bundle,
                                        cache=blend, config=config, rng=rng,
                                        schedule=schedule,
                                        overlap_next=o_next if config.blending else 0,
                                        denoise_fn=denoise_fn)
        emitted.append(latents[o_prev:])
        previous = latents
        if config.ablation == 'prev-sample':
            last = np.clip(decode(latents[-1]), 0, 1)
            current_ref, current_sketch = encode(last), seg_sketches[-1]
    latents = np.concatenate(emitted)
    frames = decode(latents)
    if return_latents:
        return frames, latents
    return frames


def overlap_sweep(denoiser: Denoiser, sketches, reference_frame, config: SamplerConfig=None,
                  overlaps=DEFAULT_OVERLAPS, reference_sketch=None):
    """Wall time of :py:func:`sample_long` per overlap, relative to no overlap

    Inside the sweep the shift is min(shift, o). Overlaps that cannot be
    planned (o >= N) are skipped with a warning.
    """
    config = SamplerConfig() if config is None else config
    N = denoiser.config.frames
    results = []
    baseline = None
    for o in (0, ) + tuple(overlaps):
        if o >= N:
            logger.warning('overlap %d skipped: it must be smaller than N=%d', o, N)
            continue
        run_config = clone(config).set_params(overlap=o, shift=min(config.shift, o))
        tic = time.perf_counter()
        frames = sample_long(denoiser, sketches, reference_frame, run_config,
                             reference_sketch=reference_sketch)
        seconds = time.perf_counter() - tic
        if o == 0:
            baseline = seconds
            continue
        results.append(dict(overlap=o, seconds=seconds, ratio=seconds / baseline,
                            segments=len(plan_segments(len(sketches), N, o)),
                            frames=frames))
    return results
