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
"""Video denoiser: U-Net with temporal layers, sketch-guided ControlNet
branch and reference attention.

The batch axis of every forward pass holds ``R`` reference entries followed
by ``N`` video frames. Reference entries skip the temporal layers; the
spatial attention of the video frames follows an
:py:class:`AttentionModeSchedule`.

>>> import numpy as np
>>> from lvcd.model import Denoiser, DenoiserConfig, AttentionModeSchedule
>>> config = DenoiserConfig(base_channels=8, groups=4, frames=3, head_dim=8)
>>> den = Denoiser(config=config)
>>> sorted(den.params.names())[0]
'controlnet.conv_in.bias'
"""
from dataclasses import dataclass, field
from fnmatch import fnmatch
import struct
from typing import Union
import numpy as np
from lvcd.edm import denoise, precond
from lvcd.tensor import (Tensor, ParamStore, add_bias, concat, conv2d, group_norm,
                         linear, mul, no_grad, read_tensor, reshape, sdp_attention, silu,
                         slice_axis, take, temporal_conv3d, transpose, upsample2x,
                         write_tensor, ShapeError)
from lvcd.utils import ConfigError, FormatError, Params, read_json, write_json

CHECKPOINT_MAGIC = b'LVCDCKPT'
CHECKPOINT_VERSION = 1
SKETCH_HIDDEN = 16
FINETUNE_GROUPS = ('controlnet.*', 'unet.*.spatial_attn.*', 'unet.*.temporal_attn.*')


class ScheduleError(ConfigError):
    """Attention mode schedule inconsistent with the batch layout"""


@dataclass
class DenoiserConfig(Params):
    """Toy U-Net dimensions and the attention variants"""
    base_channels: int = 32
    channel_mult: tuple = (1, 2)
    frames: int = 14
    head_dim: int = 32
    latent_channels: int = 48
    sketch_channels: int = 1
    groups: int = 8
    temporal_kernel: int = 3
    reference_attention: bool = True
    amplify: str = 'bias'

    def __post_init__(self):
        dims = [self.base_channels, self.head_dim, self.latent_channels,
                self.sketch_channels, self.groups, self.temporal_kernel]
        if min(dims) <= 0 or min(self.channel_mult) <= 0 or not len(self.channel_mult):
            raise ConfigError('DenoiserConfig: dimensions must be positive')
        if self.frames < 2:
            raise ConfigError(f'DenoiserConfig: frames must be at least 2, got {self.frames}')
        if self.base_channels % self.groups:
            raise ConfigError(f'DenoiserConfig: {self.groups} groups do not divide '
                              f'{self.base_channels} channels')
        if self.temporal_kernel % 2 == 0:
            raise ConfigError('DenoiserConfig: temporal_kernel must be odd')
        if self.amplify not in ('bias', 'scale'):
            raise ConfigError(f'DenoiserConfig: amplify must be bias | scale, got {self.amplify}')

    @property
    def channels(self):
        """Channels per U-Net level"""
        return [self.base_channels * m for m in self.channel_mult]

    @property
    def time_channels(self):
        """Width of the noise-level embedding"""
        return 4 * self.base_channels


@dataclass(frozen=True)
class Standard:
    """Keys: own tokens and the global reference"""


@dataclass(frozen=True)
class OverlapAmplified:
    """Keys: own tokens and the previous result of the same frame, the
    latter amplified by ``alpha``"""
    alpha: float = 10.0


@dataclass(frozen=True)
class PrevReference:
    """Keys: tokens of the frame ``shift`` positions earlier and the global
    reference"""
    shift: int = 3


Directive = Union[Standard, OverlapAmplified, PrevReference]


def attention_mode_for(i: int, n: int, o: int, shift: int=3,
                       alpha: float=10.0) -> Directive:
    """Directive of frame ``i`` (1-based) in segment ``n`` with overlap ``o``"""
    if i < 1:
        raise ValueError(f'frame index must be positive, got {i}')
    if n == 1:
        return Standard()
    if i <= o:
        return OverlapAmplified(alpha=alpha)
    return PrevReference(shift=shift)


@dataclass
class AttentionModeSchedule:
    """Per-frame directives of one segment"""
    directives: tuple
    overlap: int = 0

    @classmethod
    def standard(cls, N: int):
        """Every frame attends to itself and the global reference"""
        return cls(directives=tuple(Standard() for _ in range(N)))

    @classmethod
    def for_segment(cls, n: int, N: int, o: int, shift: int=3, alpha: float=10.0,
                    blending: bool=True, prev_reference: bool=True):
        """Directives of segment ``n`` (1-based)

        With ``blending=False`` the overlapped frames get Standard directives;
        with ``prev_reference=False`` so do the remaining frames.
        """
        directives = []
        for i in range(1, N + 1):
            directive = attention_mode_for(i, n, o, shift=shift, alpha=alpha)
            if isinstance(directive, OverlapAmplified) and not blending:
                directive = Standard()
            elif isinstance(directive, PrevReference) and not prev_reference:
                directive = Standard()
            directives.append(directive)
        directives = tuple(directives)
        return cls(directives=directives, overlap=o if n > 1 else 0)

    def __len__(self):
        return len(self.directives)

    @property
    def is_standard(self):
        """Only Standard directives"""
        return all(isinstance(d, Standard) for d in self.directives)

    def validate(self, R: int, N: int):
        """Raise :py:class:`ScheduleError` if the directives cannot run on a
        batch of ``R`` reference entries and ``N`` frames"""
        if len(self.directives) != N:
            raise ScheduleError(f'{len(self.directives)} directives for {N} frames')
        if R < 1:
            raise ScheduleError('at least one reference entry is required')
        for i, directive in enumerate(self.directives, start=1):
            if isinstance(directive, OverlapAmplified):
                if i > self.overlap:
                    raise ScheduleError(f'frame {i}: amplified overlap attention '
                                        f'outside the {self.overlap} overlapped frames')
                if i >= R:
                    raise ScheduleError(f'frame {i}: no previous result among '
                                        f'{R - 1} bundle elements')
                if directive.alpha <= 0:
                    raise ScheduleError(f'frame {i}: alpha must be positive')
            elif isinstance(directive, PrevReference):
                if i <= self.overlap:
                    raise ScheduleError(f'frame {i}: prev-reference attention on '
                                        'an overlapped frame')
                if directive.shift > self.overlap or i - directive.shift < 1:
                    raise ScheduleError(f'frame {i}: shift {directive.shift} exceeds '
                                        f'the overlap {self.overlap}')
            elif not isinstance(directive, Standard):
                raise ScheduleError(f'frame {i}: unknown directive {directive!r}')

    def sources(self, R: int):
        """Per frame: (query-side key entry, second key entry, alpha or None);
        entries index the batch axis"""
        output = []
        for i, directive in enumerate(self.directives, start=1):
            if isinstance(directive, OverlapAmplified):
                output.append((R + i - 1, i, directive.alpha))
            elif isinstance(directive, PrevReference):
                output.append((R + i - directive.shift - 1, 0, None))
            else:
                output.append((R + i - 1, 0, None))
        return output

    def key_entries(self, R: int, reference_attention: bool=True):
        """Batch entries whose tokens form the keys of every frame"""
        if reference_attention:
            return [(a, b) for a, b, _ in self.sources(R)]
        return [(a, ) for a, _, _ in self.sources(R)]


def _kaiming(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class _Layout:
    """Ordered parameter declarations"""

    def __init__(self):
        self.entries = []

    def conv(self, name, out_ch, in_ch, k, init='kaiming'):
        self.entries.append((f'{name}.weight', (out_ch, in_ch, k, k), init))
        self.entries.append((f'{name}.bias', (out_ch, ), 'zero'))

    def linear(self, name, out_f, in_f):
        self.entries.append((f'{name}.weight', (out_f, in_f), 'kaiming'))
        self.entries.append((f'{name}.bias', (out_f, ), 'zero'))

    def norm(self, name, ch):
        self.entries.append((f'{name}.weight', (ch, ), 'one'))
        self.entries.append((f'{name}.bias', (ch, ), 'zero'))

    def res(self, name, in_ch, out_ch, temb):
        self.norm(f'{name}.norm1', in_ch)
        self.conv(f'{name}.conv1', out_ch, in_ch, 3)
        self.linear(f'{name}.emb', out_ch, temb)
        self.norm(f'{name}.norm2', out_ch)
        self.conv(f'{name}.conv2', out_ch, out_ch, 3)
        if in_ch != out_ch:
            self.conv(f'{name}.skip', out_ch, in_ch, 1)

    def attention(self, name, ch):
        self.norm(f'{name}.norm', ch)
        for proj in ('q', 'k', 'v', 'out'):
            self.linear(f'{name}.{proj}', ch, ch)


def _encoder_layout(layout, prefix, config):
    channels = config.channels
    temb = config.time_channels
    layout.linear(f'{prefix}.time.fc1', temb, config.base_channels)
    layout.linear(f'{prefix}.time.fc2', temb, temb)
    layout.conv(f'{prefix}.conv_in', channels[0], 2 * config.latent_channels, 3)
    in_ch = channels[0]
    for level, ch in enumerate(channels):
        name = f'{prefix}.down.{level}'
        layout.res(f'{name}.res', in_ch, ch, temb)
        kt = config.temporal_kernel
        layout.entries.append((f'{name}.temporal_conv.weight', (ch, ch, kt, 1, 1), 'kaiming'))
        layout.entries.append((f'{name}.temporal_conv.bias', (ch, ), 'zero'))
        layout.attention(f'{name}.spatial_attn', ch)
        layout.attention(f'{name}.temporal_attn', ch)
        if level < len(channels) - 1:
            layout.conv(f'{name}.downsample', ch, ch, 3)
        in_ch = ch


def parameter_layout(config: DenoiserConfig):
    """(name, shape, init) of the base U-Net and the ControlNet-only layers;
    ``init`` is kaiming | zero | one. Cloned ControlNet layers are not listed."""
    layout = _Layout()
    channels = config.channels
    temb = config.time_channels
    _encoder_layout(layout, 'unet', config)
    top = channels[-1]
    layout.res('unet.mid.res', top, top, temb)
    h_ch = top
    for level in reversed(range(len(channels))):
        layout.res(f'unet.up.{level}.res', h_ch + channels[level], channels[level], temb)
        h_ch = channels[level]
    layout.norm('unet.out.norm', channels[0])
    layout.conv('unet.out.conv', config.latent_channels, channels[0], 3)
    layout.conv('controlnet.sketch.conv1', SKETCH_HIDDEN, config.sketch_channels, 3)
    layout.conv('controlnet.sketch.conv2', channels[0], SKETCH_HIDDEN, 3, init='zero')
    for level, ch in enumerate(channels):
        layout.conv(f'controlnet.zero.{level}', ch, ch, 1, init='zero')
    return layout.entries


def build(config: DenoiserConfig, rng) -> ParamStore:
    """Initialize parameters: Kaiming-uniform convolutions and projections,
    unit norms, zero-initialized sketch output and ControlNet projections; the
    ControlNet encoder is a copy of the U-Net encoder"""
    arrays = {}
    for name, shape, init in parameter_layout(config):
        if init == 'kaiming':
            arrays[name] = _kaiming(rng, shape)
        elif init == 'one':
            arrays[name] = np.ones(shape, dtype=np.float32)
        else:
            arrays[name] = np.zeros(shape, dtype=np.float32)
    for name in list(arrays):
        rest = name[len('unet.'):]
        if name.startswith('unet.') and rest.split('.')[0] in ('time', 'conv_in', 'down'):
            arrays[f'controlnet.{rest}'] = arrays[name].copy()
    return ParamStore(arrays)


def zero_initialized(config: DenoiserConfig):
    """Names of the layers that start at exactly zero (weights and biases)"""
    names = [name for name, _, init in parameter_layout(config)
             if init == 'zero' and ('.zero.' in name or '.sketch.conv2' in name)]
    return sorted(names)


def _conv(params, name, x, stride=1, padding=1):
    return conv2d(x, params[f'{name}.weight'], params[f'{name}.bias'],
                  stride=stride, padding=padding)


def _norm(params, name, x, groups):
    return group_norm(x, groups, params[f'{name}.weight'], params[f'{name}.bias'])


def _linear(params, name, x):
    return linear(x, params[f'{name}.weight'], params[f'{name}.bias'])


def _res_block(params, name, x, temb, groups):
    h = _conv(params, f'{name}.conv1', silu(_norm(params, f'{name}.norm1', x, groups)))
    h = add_bias(h, _linear(params, f'{name}.emb', silu(temb)))
    h = _conv(params, f'{name}.conv2', silu(_norm(params, f'{name}.norm2', h, groups)))
    if f'{name}.skip.weight' in params:
        x = _conv(params, f'{name}.skip', x, padding=0)
    return x + h


def num_heads(channels: int, head_dim: int) -> int:
    """Largest head count not above channels // head_dim dividing channels"""
    heads = max(1, channels // head_dim)
    while channels % heads:
        heads -= 1
    return heads


def _split_heads(x, heads):
    B, T, C = x.shape
    return transpose(reshape(x, (B, T, heads, C // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    B, H, T, d = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (B, T, H * d))


def frame_attention(Q, K, V, schedule: AttentionModeSchedule,
                    reference_attention: bool=True, amplify: str='bias'):
    """Spatial attention over a batch of ``R`` reference entries and the
    video frames of ``schedule``

    Q, K, V are [E, heads, tokens, d]. Reference entries attend to their own
    tokens; frame keys follow :py:meth:`AttentionModeSchedule.sources`.
    """
    E = Q.shape[0]
    N = len(schedule)
    R = E - N
    schedule.validate(R, N)
    tokens = K.shape[2]
    ref = sdp_attention(slice_axis(Q, 0, 0, R), slice_axis(K, 0, 0, R),
                        slice_axis(V, 0, 0, R))
    sources = schedule.sources(R)
    own = [a for a, _, _ in sources]
    Qv = slice_axis(Q, 0, R, E)
    Ka, Va = take(K, own, axis=0), take(V, own, axis=0)
    if not reference_attention:
        return concat([ref, sdp_attention(Qv, Ka, Va)], axis=0)
    second = [b for _, b, _ in sources]
    log_alpha = np.array([np.log(alpha) if alpha is not None else 0.0
                          for _, _, alpha in sources])
    Kb, Vb = take(K, second, axis=0), take(V, second, axis=0)
    bias = None
    if amplify == 'scale':
        factor = np.where(log_alpha != 0, log_alpha, 1.0)
        Kb = mul(Kb, np.broadcast_to(factor.reshape(-1, 1, 1, 1), Kb.shape))
    else:
        bias = np.zeros((N, 1, 2 * tokens))
        bias[:, 0, tokens:] = log_alpha[:, np.newaxis]
    video = sdp_attention(Qv, concat([Ka, Kb], axis=2), concat([Va, Vb], axis=2),
                          logit_bias=bias)
    return concat([ref, video], axis=0)


def _spatial_attention(params, name, x, schedule, config):
    E, C, h, w = x.shape
    heads = num_heads(C, config.head_dim)
    tokens = reshape(_norm(params, f'{name}.norm', x, config.groups), (E, C, h * w))
    tokens = transpose(tokens, (0, 2, 1))
    Q, K, V = [_split_heads(_linear(params, f'{name}.{proj}', tokens), heads)
               for proj in ('q', 'k', 'v')]
    out = frame_attention(Q, K, V, schedule,
                          reference_attention=config.reference_attention,
                          amplify=config.amplify)
    out = _linear(params, f'{name}.out', _merge_heads(out))
    return x + reshape(transpose(out, (0, 2, 1)), (E, C, h, w))


def _temporal_attention(params, name, x, config):
    N, C, h, w = x.shape
    heads = num_heads(C, config.head_dim)
    tokens = transpose(_norm(params, f'{name}.norm', x, config.groups), (2, 3, 0, 1))
    tokens = reshape(tokens, (h * w, N, C))
    Q, K, V = [_split_heads(_linear(params, f'{name}.{proj}', tokens), heads)
               for proj in ('q', 'k', 'v')]
    out = _linear(params, f'{name}.out', _merge_heads(sdp_attention(Q, K, V)))
    return x + transpose(reshape(out, (h, w, N, C)), (2, 3, 0, 1))


def _temporal_conv(params, name, x):
    N, C, h, w = x.shape
    seq = reshape(transpose(x, (1, 0, 2, 3)), (1, C, N, h, w))
    out = temporal_conv3d(seq, params[f'{name}.weight'], params[f'{name}.bias'])
    return x + transpose(reshape(out, (C, N, h, w)), (1, 0, 2, 3))


def _video_only(x, R, fn):
    """Apply ``fn`` to the video entries; reference entries pass through"""
    E = x.shape[0]
    return concat([slice_axis(x, 0, 0, R), fn(slice_axis(x, 0, R, E))], axis=0)


def _time_embedding(params, prefix, c_noise, E, config, dtype):
    half = config.base_channels // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    c_noise = np.broadcast_to(np.asarray(c_noise, dtype=np.float64), (E, ))
    args = c_noise[:, np.newaxis] * freqs[np.newaxis]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if emb.shape[1] < config.base_channels:
        emb = np.pad(emb, ((0, 0), (0, config.base_channels - emb.shape[1])))
    emb = Tensor(emb, dtype=dtype)
    return _linear(params, f'{prefix}.time.fc2',
                   silu(_linear(params, f'{prefix}.time.fc1', emb)))


def _encoder(params, prefix, h, temb, schedule, R, config):
    skips = []
    levels = len(config.channels)
    for level in range(levels):
        name = f'{prefix}.down.{level}'
        h = _res_block(params, f'{name}.res', h, temb, config.groups)
        h = _video_only(h, R, lambda v: _temporal_conv(params, f'{name}.temporal_conv', v))
        h = _spatial_attention(params, f'{name}.spatial_attn', h, schedule, config)
        h = _video_only(h, R, lambda v: _temporal_attention(params, f'{name}.temporal_attn',
                                                            v, config))
        skips.append(h)
        if level < levels - 1:
            h = _conv(params, f'{name}.downsample', h, stride=2)
    return h, skips


def _controlnet(params, x, sketches, c_noise, schedule, R, config):
    temb = _time_embedding(params, 'controlnet', c_noise, x.shape[0], config, x.dtype)
    s = silu(_conv(params, 'controlnet.sketch.conv1', sketches, stride=2))
    s = _conv(params, 'controlnet.sketch.conv2', s, stride=2)
    h = _conv(params, 'controlnet.conv_in', x) + s
    _, features = _encoder(params, 'controlnet', h, temb, schedule, R, config)
    return [_conv(params, f'controlnet.zero.{level}', f, padding=0)
            for level, f in enumerate(features)]


def _check_inputs(inputs, sketches, schedule, config):
    E, C_in, h, w = inputs.shape
    if C_in != 2 * config.latent_channels:
        raise ShapeError(f'forward: expected {2 * config.latent_channels} input channels '
                         f'([cond, noised]), got {C_in}')
    scale = 2 ** (len(config.channels) - 1)
    if h % scale or w % scale:
        raise ShapeError(f'forward: latent size {h}x{w} not divisible by {scale}')
    expected = (E, config.sketch_channels, 4 * h, 4 * w)
    if tuple(sketches.shape) != expected:
        raise ShapeError(f'forward: sketches {tuple(sketches.shape)}, expected {expected}')
    N = len(schedule)
    schedule.validate(E - N, N)
    return E - N


def unet_forward(params, inputs, sketches, c_noise, schedule: AttentionModeSchedule,
                 use_controlnet: bool=True, config: DenoiserConfig=None):
    """U(inputs; c_noise) for [E, 2C, h, w] inputs; ``c_noise`` is a scalar or
    one value per entry"""
    config = DenoiserConfig() if config is None else config
    dtype = params['unet.conv_in.weight'].dtype
    x = inputs if isinstance(inputs, Tensor) else Tensor(inputs, dtype=dtype)
    s = sketches if isinstance(sketches, Tensor) else Tensor(sketches, dtype=dtype)
    R = _check_inputs(x, s, schedule, config)
    temb = _time_embedding(params, 'unet', c_noise, x.shape[0], config, dtype)
    h = _conv(params, 'unet.conv_in', x)
    h, skips = _encoder(params, 'unet', h, temb, schedule, R, config)
    if use_controlnet:
        control = _controlnet(params, x, s, c_noise, schedule, R, config)
        skips = [skip + ctrl for skip, ctrl in zip(skips, control)]
    h = _res_block(params, 'unet.mid.res', h, temb, config.groups)
    for level in reversed(range(len(config.channels))):
        h = _res_block(params, f'unet.up.{level}.res', concat([h, skips[level]], axis=1),
                       temb, config.groups)
        if level > 0:
            h = upsample2x(h)
    h = silu(_norm(params, 'unet.out.norm', h, config.groups))
    return _conv(params, 'unet.out.conv', h)


def forward(params, inputs, sketches, sigma, schedule: AttentionModeSchedule,
            use_controlnet: bool=True, config: DenoiserConfig=None):
    """Network output for noise level ``sigma`` (embedding of ln(σ)/4)"""
    return unet_forward(params, inputs, sketches, precond(sigma).c_noise, schedule,
                        use_controlnet=use_controlnet, config=config)


@dataclass
class Conditioning:
    """Per-entry conditioning: latents concatenated to the noised input,
    sketches and the attention schedule of the video frames"""
    latents: np.ndarray
    sketches: np.ndarray
    schedule: AttentionModeSchedule
    use_controlnet: bool = True


@dataclass
class Denoiser:
    """Parameters and configuration of the video denoiser

    Calling the instance evaluates the network U; :py:meth:`denoise` applies
    the preconditioning.
    """
    config: DenoiserConfig = field(default_factory=DenoiserConfig)
    seed: int = 0
    sigma_data: float = 0.5

    @property
    def params(self):
        """Parameter store, built on first access"""
        try:
            return self._params
        except AttributeError:
            self._params = build(self.config, np.random.default_rng(self.seed))
        return self._params

    @params.setter
    def params(self, value):
        self._params = value

    def __call__(self, x, c_noise, cond: Conditioning):
        latents = cond.latents
        if isinstance(x, Tensor):
            inputs = concat([Tensor(latents, dtype=x.dtype), x], axis=1)
        else:
            inputs = np.concatenate([np.asarray(latents, dtype=x.dtype), x], axis=1)
        return unet_forward(self.params, inputs, cond.sketches, c_noise, cond.schedule,
                            use_controlnet=cond.use_controlnet, config=self.config)

    def denoise(self, x, sigma, cond: Conditioning, grad: bool=False):
        """D(x; σ, cond); a numpy array unless ``grad``"""
        dtype = self.params['unet.conv_in.weight'].dtype
        if grad:
            return denoise(self, Tensor(x, dtype=dtype), sigma, cond,
                           sigma_data=self.sigma_data)
        with no_grad():
            output = denoise(self, np.asarray(x, dtype=dtype), sigma, cond,
                             sigma_data=self.sigma_data)
        return output.data if isinstance(output, Tensor) else output


def trainable_names(params, spec: str='finetune'):
    """Names selected by ``spec``: finetune (ControlNet and the self-attention
    layers), all, or comma-separated glob patterns"""
    names = params.names() if hasattr(params, 'names') else sorted(params)
    if spec == 'all':
        return list(names)
    patterns = FINETUNE_GROUPS if spec == 'finetune' else [p.strip() for p in spec.split(',')
                                                     if p.strip()]
    if not patterns:
        raise ConfigError('trainable: empty pattern list')
    return [name for name in names if any(fnmatch(name, p) for p in patterns)]


def save_checkpoint(fname, params, config: DenoiserConfig):
    """Write ``fname`` (LVCDCKPT) and the JSON config sidecar ``fname.json``"""
    with open(fname, 'wb') as fpt:
        fpt.write(CHECKPOINT_MAGIC)
        fpt.write(struct.pack('<II', CHECKPOINT_VERSION, len(params)))
        for name, tensor in params.items():
            encoded = name.encode('utf-8')
            fpt.write(struct.pack('<H', len(encoded)))
            fpt.write(encoded)
            write_tensor(fpt, tensor.data)
    config_params = config.get_params()
    config_params['channel_mult'] = list(config_params['channel_mult'])
    write_json(f'{fname}.json', dict(version=CHECKPOINT_VERSION, config=config_params))


def load_checkpoint(fname) -> Denoiser:
    """Inverse of :py:func:`save_checkpoint`"""
    with open(fname, 'rb') as fpt:
        if fpt.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise FormatError(f'{fname}: not an LVCD checkpoint (bad magic)')
        header = fpt.read(8)
        if len(header) != 8:
            raise FormatError(f'{fname}: truncated checkpoint header')
        version, count = struct.unpack('<II', header)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f'{fname}: checkpoint version {version}, this release reads '
                              f'version {CHECKPOINT_VERSION}; re-save it with the release '
                              'that wrote it or retrain')
        arrays = {}
        for _ in range(count):
            prefix = fpt.read(2)
            if len(prefix) != 2:
                raise FormatError(f'{fname}: truncated checkpoint, expected {count} entries')
            (length, ) = struct.unpack('<H', prefix)
            name = fpt.read(length).decode('utf-8')
            arrays[name] = read_tensor(fpt)
    sidecar = read_json(f'{fname}.json')
    if sidecar.get('version') != CHECKPOINT_VERSION:
        raise FormatError(f'{fname}.json: config version {sidecar.get("version")} does '
                          f'not match checkpoint version {CHECKPOINT_VERSION}')
    config_params = sidecar['config']
    config_params['channel_mult'] = tuple(config_params['channel_mult'])
    den = Denoiser(config=DenoiserConfig(**config_params))
    den.params = ParamStore(arrays)
    return den
