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
"""Synthetic animation clips with exact backward flow, sketch extraction,
scene splitting and training-set construction

>>> from lvcd.data import gen_clip
>>> clip = gen_clip(seed=1, length=4, H=32, W=32, n_shapes=2)
>>> clip.frames.shape, clip.flows.shape
((4, 3, 32, 32), (3, 2, 32, 32))
"""
from dataclasses import dataclass, field
from glob import glob
import logging
import os
from os.path import isdir, join
from typing import Optional
from joblib import Parallel, delayed
import numpy as np
from scipy import ndimage
from lvcd.tensor import load_tensor, save_tensor
from lvcd.utils import (ConfigError, FormatError, Params, progress_bar, read_flo5,
                        read_json, read_ppm, read_sketch, write_flo5, write_json,
                        write_ppm, write_sketch)

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
SKETCH_THRESHOLD = 0.15


@dataclass
class Shape:
    """Flat-colored shape on a piecewise-linear trajectory

    ``knots`` are (frame, cy, cx) triplets and ``scales`` (frame, s) pairs,
    both with increasing frames; ``size`` holds the half height and half
    width at scale 1.
    """
    kind: str
    color: tuple
    size: tuple
    knots: list
    scales: list = field(default_factory=lambda: [(0, 1.0)])

    def __post_init__(self):
        if self.kind not in ('ellipse', 'rect', 'triangle'):
            raise ValueError(f'unknown shape kind {self.kind}')

    def center(self, t):
        """(cy, cx) at frame t"""
        frames = [k[0] for k in self.knots]
        return (float(np.interp(t, frames, [k[1] for k in self.knots])),
                float(np.interp(t, frames, [k[2] for k in self.knots])))

    def scale(self, t):
        """Scale factor at frame t"""
        return float(np.interp(t, [s[0] for s in self.scales],
                               [s[1] for s in self.scales]))

    def inside(self, t, yy, xx):
        """Mask of the pixel centers covered at frame t"""
        cy, cx = self.center(t)
        s = self.scale(t)
        v = (yy - cy) / (s * self.size[0])
        u = (xx - cx) / (s * self.size[1])
        if self.kind == 'ellipse':
            return u ** 2 + v ** 2 <= 1
        if self.kind == 'rect':
            return (np.abs(u) <= 1) & (np.abs(v) <= 1)
        return (v <= 1) & (np.abs(u) <= (v + 1) / 2)


@dataclass
class SyntheticClip:
    """Frames [L, 3, H, W], backward flows F_{t+1->t} [L-1, 2, H, W] as
    (dx, dy), sketches [L, 1, H, W], palette [K+1, 3] (entry 0 is the
    background) and per-pixel palette indices ``labels`` [L, H, W]"""
    frames: np.ndarray
    flows: np.ndarray
    sketches: np.ndarray
    palette: np.ndarray
    labels: np.ndarray
    clip_id: str = ''

    def __len__(self):
        return self.frames.shape[0]


def render_clip(shapes, length: int, H: int, W: int, background=(0.5, 0.5, 0.5)):
    """Frames, exact backward flows and labels of ``shapes`` drawn in order
    over a flat background"""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    labels = np.zeros((length, H, W), dtype=np.int32)
    for t in range(length):
        for k, shape in enumerate(shapes, start=1):
            labels[t][shape.inside(t, yy, xx)] = k
    palette = np.array([background] + [s.color for s in shapes],
                       dtype=np.float32).reshape(-1, 3)
    frames = palette[labels].transpose(0, 3, 1, 2).copy()
    flows = np.zeros((max(length - 1, 0), 2, H, W), dtype=np.float32)
    for t in range(length - 1):
        for k, shape in enumerate(shapes, start=1):
            mask = labels[t + 1] == k
            if not mask.any():
                continue
            (cy0, cx0), (cy1, cx1) = shape.center(t), shape.center(t + 1)
            ratio = shape.scale(t) / shape.scale(t + 1) - 1
            flows[t, 0][mask] = (cx0 - cx1) + ratio * (xx[mask] - cx1)
            flows[t, 1][mask] = (cy0 - cy1) + ratio * (yy[mask] - cy1)
    return frames, flows, labels, palette


def _luminance(color):
    return float(np.dot(LUMA, color))


def _random_color(rng, background, min_contrast=0.2, attempts=100):
    """8-bit color with a luminance contrast against the background"""
    color = rng.integers(0, 256, size=3) / 255.0
    for _ in range(attempts):
        if abs(_luminance(color) - _luminance(background)) >= min_contrast:
            break
        color = rng.integers(0, 256, size=3) / 255.0
    return tuple(float(c) for c in color)


def _random_shapes(rng, length, H, W, n_shapes, motion_scale, palette, background):
    shapes = []
    last = length - 1
    for k in range(n_shapes):
        kind = ('ellipse', 'rect', 'triangle')[rng.integers(0, 3)]
        size = (float(rng.uniform(H / 10, H / 4)), float(rng.uniform(W / 10, W / 4)))
        if palette is None:
            color = _random_color(rng, background)
        else:
            color = tuple(palette[1 + k % (len(palette) - 1)])
        if rng.random() < 0.3:
            # enters from (or leaves through) a border
            side = rng.integers(0, 4)
            outside = [(-size[0], rng.uniform(0, W)), (H + size[0], rng.uniform(0, W)),
                       (rng.uniform(0, H), -size[1]), (rng.uniform(0, H), W + size[1])][side]
            start = np.array(outside, dtype=np.float64)
        else:
            start = np.array([rng.uniform(0, H), rng.uniform(0, W)])
        mid = int(rng.integers(1, last)) if last > 1 else last
        points = [start]
        knots = [0] + ([mid] if mid not in (0, last) else []) + [last]
        for a, b in zip(knots[:-1], knots[1:]):
            angle = rng.uniform(0, 2 * np.pi)
            speed = motion_scale * rng.uniform(0.5, 1.5)
            step = speed * (b - a) * np.array([np.sin(angle), np.cos(angle)])
            points.append(points[-1] + step)
        scales = [(0, 1.0)]
        if rng.random() < 0.3:
            scales = [(0, 1.0), (last, float(rng.uniform(0.7, 1.3)))]
        shapes.append(Shape(kind=kind, color=color, size=size,
                            knots=[(f, float(p[0]), float(p[1]))
                                   for f, p in zip(knots, points)],
                            scales=scales))
    if n_shapes >= 2 and rng.random() < 0.5:
        # position swap between the first two shapes
        a, b = shapes[0].knots[0], shapes[1].knots[0]
        shapes[0].knots = [a, (last, b[1], b[2])]
        shapes[1].knots = [b, (last, a[1], a[2])]
    return shapes


def _background(palette):
    """Background color: palette entry 0 or a fixed mid gray"""
    if palette is not None:
        return tuple(palette[0])
    return (128 / 255.0, 128 / 255.0, 128 / 255.0)


def gen_clip(seed: int, length: int, H: int, W: int, n_shapes: int=3,
             motion_scale: float=2.0, palette=None, threshold: float=SKETCH_THRESHOLD):
    """Deterministic synthetic clip

    :param motion_scale: typical displacement in pixels per frame
    :param palette: optional [K+1, 3] colors; entry 0 is the background
    """
    if length < 2:
        raise ValueError(f'a clip needs at least 2 frames, got {length}')
    if H <= 0 or W <= 0 or H % 4 or W % 4:
        raise ValueError(f'frame size {H}x{W} must be positive and divisible by 4')
    if n_shapes < 0:
        raise ValueError('n_shapes must be non-negative')
    if palette is not None:
        palette = np.asarray(palette, dtype=np.float64).reshape(-1, 3)
        if n_shapes and len(palette) < 2:
            raise ValueError('palette needs a background and at least one shape color')
    rng = np.random.default_rng(seed)
    background = _background(palette)
    shapes = _random_shapes(rng, length, H, W, n_shapes, motion_scale, palette, background)
    frames, flows, labels, colors = render_clip(shapes, length, H, W, background)
    sketches = np.stack([extract_sketch(frame, threshold=threshold) for frame in frames])
    return SyntheticClip(frames=frames, flows=flows, sketches=sketches,
                         palette=colors, labels=labels)


def extract_sketch(frame, threshold: float=SKETCH_THRESHOLD, thickness: int=1):
    """Line drawing [1, H, W]: 1.0 on lines, 0.0 elsewhere

    Sobel gradient of the luminance (normalized so that a step of height d
    gives magnitude d), thinned to one pixel by non-maximum suppression along
    the quantized gradient direction and thresholded. ``thickness`` > 1
    dilates the lines.
    """
    frame = np.asarray(frame, dtype=np.float64)
    lum = np.tensordot(LUMA, frame, axes=([0], [0]))
    gx = ndimage.sobel(lum, axis=1, mode='nearest') / 4
    gy = ndimage.sobel(lum, axis=0, mode='nearest') / 4
    mag = np.hypot(gx, gy)
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    sector = np.round(angle / (np.pi / 4)).astype(int) % 4
    steps = np.array([(0, 1), (1, 1), (1, 0), (1, -1)])
    H, W = lum.shape
    padded = np.pad(mag, 1)
    rows, cols = np.mgrid[0:H, 0:W]
    dy, dx = steps[sector, 0], steps[sector, 1]
    before = padded[rows - dy + 1, cols - dx + 1]
    after = padded[rows + dy + 1, cols + dx + 1]
    lines = (mag >= before) & (mag > after) & (mag > threshold)
    if thickness > 1:
        lines = ndimage.binary_dilation(lines, iterations=thickness - 1)
    return lines.astype(np.float32)[np.newaxis]


def histogram_1000(frame, normalized: bool=True):
    """Color histogram over 10 levels per channel; bin = 100r + 10g + b"""
    frame = np.asarray(frame, dtype=np.float64)
    levels = np.minimum(np.floor(frame * 10), 9).astype(int)
    levels = np.clip(levels, 0, 9)
    bins = 100 * levels[0] + 10 * levels[1] + levels[2]
    hist = np.bincount(bins.ravel(), minlength=1000).astype(np.float64)
    if normalized:
        hist /= hist.sum()
    return hist


def histogram_rmse(a, b):
    """Bin-wise root mean squared difference"""
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


@dataclass
class ClipFilterConfig(Params):
    """Scene splitting and length filter

    ``threshold`` None selects 0.02 for normalized histograms and 30.0 for
    raw counts.
    """
    bins: int = 1000
    threshold: Optional[float] = None
    normalization: str = 'normalized'
    min_length: int = 15
    max_length: int = 200

    def __post_init__(self):
        if self.bins != 1000:
            raise ConfigError('ClipFilterConfig: bins must be 1000 (10 levels per channel)')
        if self.normalization not in ('normalized', 'raw'):
            raise ConfigError('ClipFilterConfig: normalization must be normalized | raw')
        if not 0 < self.min_length <= self.max_length:
            raise ConfigError('ClipFilterConfig: requires 0 < min_length <= max_length')

    @property
    def tau(self):
        """Cut threshold"""
        if self.threshold is not None:
            return self.threshold
        return 0.02 if self.normalization == 'normalized' else 30.0


def scene_bounds(frames, config: ClipFilterConfig=None, n_jobs: int=1):
    """Half-open (start, stop) ranges between detected cuts, before filtering"""
    config = ClipFilterConfig() if config is None else config
    normalized = config.normalization == 'normalized'
    hists = Parallel(n_jobs=n_jobs)(delayed(histogram_1000)(f, normalized)
                                    for f in frames)
    bounds = []
    start = 0
    for t in range(len(hists) - 1):
        if histogram_rmse(hists[t], hists[t + 1]) > config.tau:
            bounds.append((start, t + 1))
            start = t + 1
    bounds.append((start, len(hists)))
    return bounds


def split_scenes(frames, config: ClipFilterConfig=None, return_bounds: bool=False,
                 n_jobs: int=1):
    """Cut where consecutive histograms differ by more than the threshold,
    then keep clips with min_length <= length <= max_length"""
    config = ClipFilterConfig() if config is None else config
    if len(frames) < 2:
        raise ValueError('split_scenes needs at least 2 frames')
    bounds = [(a, b) for a, b in scene_bounds(frames, config, n_jobs=n_jobs)
              if config.min_length <= b - a <= config.max_length]
    if return_bounds:
        return bounds
    return [frames[a:b] for a, b in bounds]


def build_training_sets(clip, N: int):
    """(candidate reference indices, target indices) for k = 1 ... L-N, 0-based:
    candidates 0 ... k-1 and targets k ... k+N-1"""
    L = clip if isinstance(clip, (int, np.integer)) else len(clip)
    return [(list(range(0, k)), list(range(k, k + N))) for k in range(1, L - N + 1)]


def curate(clips, config: ClipFilterConfig=None, n_jobs: int=1):
    """Concatenate clips into one stream, split it into scenes and filter
    lengths; scenes spanning an undetected junction are dropped"""
    config = ClipFilterConfig() if config is None else config
    frames = np.concatenate([c.frames for c in clips])
    junctions = set(np.cumsum([len(c) for c in clips])[:-1].tolist())
    offsets = np.cumsum([0] + [len(c) for c in clips])
    output = []
    for a, b in split_scenes(frames, config, return_bounds=True, n_jobs=n_jobs):
        if any(a < j < b for j in junctions):
            logger.warning('scene [%d, %d) spans a clip junction; dropped', a, b)
            continue
        index = int(np.searchsorted(offsets, a, side='right')) - 1
        clip = clips[index]
        lo, hi = a - offsets[index], b - offsets[index]
        output.append(SyntheticClip(frames=clip.frames[lo:hi], flows=clip.flows[lo:hi - 1],
                                    sketches=clip.sketches[lo:hi], palette=clip.palette,
                                    labels=clip.labels[lo:hi],
                                    clip_id=f'{clip.clip_id or index}_{lo}'))
    return output


@dataclass
class DataConfig(Params):
    """Synthetic dataset generation"""
    clips: int = 8
    length: int = 24
    height: int = 64
    width: int = 64
    n_shapes: int = 3
    motion_scale: float = 2.0
    seed: int = 0
    curate: bool = False
    n_jobs: int = 1

    def __post_init__(self):
        if self.clips < 1 or self.length < 2:
            raise ConfigError('DataConfig: clips >= 1 and length >= 2 are required')
        if self.height % 4 or self.width % 4 or self.height <= 0 or self.width <= 0:
            raise ConfigError('DataConfig: height and width must be positive multiples of 4')


def generate_dataset(config: DataConfig, filter_config: ClipFilterConfig=None,
                     use_tqdm: bool=False):
    """``config.clips`` clips with seeds seed, seed+1, ..."""
    seeds = progress_bar(range(config.seed, config.seed + config.clips),
                         total=config.clips, desc='clips', use_tqdm=use_tqdm)
    clips = Parallel(n_jobs=config.n_jobs)(
        delayed(gen_clip)(seed, config.length, config.height, config.width,
                          n_shapes=config.n_shapes, motion_scale=config.motion_scale)
        for seed in seeds)
    for k, clip in enumerate(clips):
        clip.clip_id = f'{k:05d}'
    if config.curate:
        clips = curate(clips, filter_config, n_jobs=config.n_jobs)
    return clips


def save_clip(dirname, clip: SyntheticClip):
    """frame_%05d.ppm, sketch_%05d.ppm, flow_%05d.flo5 (flow k maps frame
    k+1 to frame k), palette.txt and labels.ten"""
    os.makedirs(dirname, exist_ok=True)
    for k, frame in enumerate(clip.frames):
        write_ppm(join(dirname, f'frame_{k:05d}.ppm'), frame)
        write_sketch(join(dirname, f'sketch_{k:05d}.ppm'), clip.sketches[k])
    for k, flow in enumerate(clip.flows):
        write_flo5(join(dirname, f'flow_{k:05d}.flo5'), flow)
    with open(join(dirname, 'palette.txt'), 'w', encoding='utf-8') as fpt:
        for color in clip.palette:
            r, g, b = [int(round(float(c) * 255)) for c in color]
            fpt.write(f'{r} {g} {b}\n')
    save_tensor(join(dirname, 'labels.ten'), clip.labels.astype(np.float32))


def read_frames(dirname, prefix='frame'):
    """Sorted ``prefix_%05d.ppm`` images as [L, 3, H, W]"""
    names = sorted(glob(join(dirname, f'{prefix}_*.ppm')))
    if not names:
        raise FormatError(f'{dirname}: no {prefix}_*.ppm files')
    return np.stack([read_ppm(name) for name in names])


def read_sketches(dirname):
    """Sorted sketch_%05d.ppm files as [L, 1, H, W]"""
    names = sorted(glob(join(dirname, 'sketch_*.ppm')))
    if not names:
        raise FormatError(f'{dirname}: no sketch_*.ppm files')
    return np.stack([read_sketch(name) for name in names])


def read_flows(dirname):
    """Sorted flow_%05d.flo5 files as [L-1, 2, H, W]"""
    names = sorted(glob(join(dirname, 'flow_*.flo5')))
    if not names:
        raise FormatError(f'{dirname}: no flow_*.flo5 files')
    return np.stack([read_flo5(name) for name in names])


def load_clip(dirname, clip_id: str=''):
    """Inverse of :py:func:`save_clip`"""
    if not isdir(dirname):
        raise FormatError(f'{dirname}: clip directory not found')
    frames = read_frames(dirname)
    sketches = read_sketches(dirname)
    flows = read_flows(dirname) if len(frames) > 1 else np.zeros((0, 2) + frames.shape[2:],
                                                                 dtype=np.float32)
    with open(join(dirname, 'palette.txt'), encoding='utf-8') as fpt:
        palette = np.array([[int(v) for v in line.split()] for line in fpt if line.strip()],
                           dtype=np.float32) / 255
    labels = load_tensor(join(dirname, 'labels.ten')).astype(np.int32)
    return SyntheticClip(frames=frames, flows=flows, sketches=sketches,
                         palette=palette.astype(np.float32), labels=labels,
                         clip_id=clip_id)


def save_dataset(root, clips):
    """``root/clips/<id>/...`` plus ``root/manifest.json``"""
    ids = []
    for k, clip in enumerate(clips):
        clip_id = clip.clip_id or f'{k:05d}'
        save_clip(join(root, 'clips', clip_id), clip)
        ids.append(clip_id)
    height, width = clips[0].frames.shape[2:] if clips else (0, 0)
    write_json(join(root, 'manifest.json'), dict(clips=ids, height=int(height),
                                                 width=int(width)))


def load_dataset(root, n_jobs: int=1):
    """Clips listed in ``root/manifest.json``"""
    manifest = read_json(join(root, 'manifest.json'))
    return Parallel(n_jobs=n_jobs)(delayed(load_clip)(join(root, 'clips', clip_id), clip_id)
                                   for clip_id in manifest['clips'])
