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
import dataclasses
import gzip
import json
import struct
try:
    USE_TQDM = True
    from tqdm import tqdm
except ImportError:
    USE_TQDM = False
from microtc.utils import tweet_iterator
import numpy as np
from PIL import Image, UnidentifiedImageError


class ConfigError(ValueError):
    """Invalid configuration"""


class FormatError(OSError):
    """Corrupt or incompatible file"""


class NumericalError(FloatingPointError):
    """Non-finite values where finite ones are required"""


class Params:
    """get_params/set_params protocol for configuration dataclasses

    >>> from lvcd.edm import NoiseSchedule
    >>> from sklearn.base import clone
    >>> clone(NoiseSchedule()).get_params()['T']
    25
    """

    def get_params(self, deep=None):
        """Parameters"""
        return {field.name: getattr(self, field.name)
                for field in dataclasses.fields(self)}

    def set_params(self, **kwargs):
        """Set the parameters"""
        names = {field.name for field in dataclasses.fields(self)}
        for key, value in kwargs.items():
            if key not in names:
                raise ConfigError(f'{self.__class__.__name__}: unknown key {key}')
            setattr(self, key, value)
        if hasattr(self, '__post_init__'):
            self.__post_init__()
        return self


def progress_bar(data, total=np.inf,
                 use_tqdm: bool=True,
                 **kwargs):
    """Progress bar"""

    if not USE_TQDM or not use_tqdm:
        return data
    if total == np.inf:
        total = None
    return tqdm(data, total=total, **kwargs)


def read_json(fname):
    """First JSON document of a (possibly gzip) JSON-lines file"""
    try:
        return next(tweet_iterator(fname))
    except StopIteration as exc:
        raise FormatError(f'{fname}: empty JSON file') from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f'{fname}: invalid JSON ({exc})') from exc


def write_json(fname, data):
    """Write a single-line JSON document, gzip when the name ends in .gz"""
    line = bytes(json.dumps(data) + '\n', encoding='utf-8')
    if fname.endswith('.gz'):
        with gzip.open(fname, 'wb') as fpt:
            fpt.write(line)
        return
    with open(fname, 'wb') as fpt:
        fpt.write(line)


def to_uint8(image):
    """[C, H, W] image in [0, 1] to 8-bit [H, W, C]; clamps"""
    image = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    return np.round(image * 255).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(fname, image):
    """Write an RGB (or single channel, replicated) image as binary PPM (P6)"""
    image = np.asarray(image)
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f'write_ppm expects [3, H, W], got {image.shape}')
    Image.fromarray(to_uint8(image)).save(fname, format='PPM')


def read_ppm(fname):
    """Read an 8-bit RGB PPM into a float32 [3, H, W] image in [0, 1]"""
    try:
        with Image.open(fname) as img:
            if img.format != 'PPM' or img.mode != 'RGB':
                raise FormatError(f'{fname}: not an 8-bit RGB PPM file '
                                  f'({img.format}, {img.mode})')
            data = np.asarray(img)
    except UnidentifiedImageError as exc:
        raise FormatError(f'{fname}: not a PPM file') from exc
    except FormatError:
        raise
    except OSError as exc:
        raise FormatError(f'{fname}: {exc}') from exc
    return (data.transpose(2, 0, 1) / 255.0).astype(np.float32)


def write_sketch(fname, sketch):
    """Sketch (1.0 on lines) stored as black lines on white"""
    sketch = np.asarray(sketch).reshape((1, ) + np.asarray(sketch).shape[-2:])
    write_ppm(fname, 1.0 - sketch)


def read_sketch(fname):
    """Inverse of :py:func:`write_sketch`; [1, H, W] with values in {0, 1}"""
    image = read_ppm(fname)
    return (image.mean(axis=0, keepdims=True) < 0.5).astype(np.float32)


def write_flo5(fname, flow):
    """Flow [2, H, W] (dx, dy) as FLO5: magic, u32 H, u32 W, f32 LE pairs"""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f'write_flo5 expects [2, H, W], got {flow.shape}')
    _, height, width = flow.shape
    with open(fname, 'wb') as fpt:
        fpt.write(b'FLO5')
        fpt.write(struct.pack('<II', height, width))
        fpt.write(flow.transpose(1, 2, 0).astype('<f4').tobytes())


def read_flo5(fname):
    """Read a FLO5 file into a float32 [2, H, W] array"""
    with open(fname, 'rb') as fpt:
        buffer = fpt.read()
    if buffer[:4] != b'FLO5':
        raise FormatError(f'{fname}: bad magic, expected FLO5')
    height, width = struct.unpack('<II', buffer[4:12])
    payload = buffer[12:]
    if len(payload) != height * width * 2 * 4:
        raise FormatError(f'{fname}: truncated flow payload')
    data = np.frombuffer(payload, dtype='<f4').reshape(height, width, 2)
    return data.transpose(2, 0, 1).astype(np.float32)
