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
"""Invertible frame/latent map: 4x4 space-to-depth followed by a fixed
affine map (shift 0.5, scale 2.0).

Latents and decoded frames are float64; ``decode(encode(frame))`` gives the
frame back bit for bit whenever ``frame - 0.5`` is exact in float64, which
covers 8-bit frames and float32 values of at least 2**-29.
"""
import numpy as np

PATCH = 4
SHIFT = 0.5
SCALE = 2.0
LATENT_CHANNELS = 3 * PATCH * PATCH


def encode(frame):
    """[3, H, W] (or [N, 3, H, W]) in [0, 1] to [48, H/4, W/4] latents"""
    frame = np.asarray(frame)
    if frame.ndim == 4:
        return np.stack([encode(x) for x in frame])
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ValueError(f'encode expects an RGB frame [3, H, W], got {frame.shape}')
    _, H, W = frame.shape
    if H % PATCH or W % PATCH:
        raise ValueError(f'encode: frame size {H}x{W} is not divisible by {PATCH}')
    h, w = H // PATCH, W // PATCH
    patches = frame.reshape(3, h, PATCH, w, PATCH).transpose(0, 2, 4, 1, 3)
    patches = patches.reshape(LATENT_CHANNELS, h, w).astype(np.float64)
    return (patches - SHIFT) * SCALE


def decode(latent, dtype=np.float64):
    """Inverse of :py:func:`encode`; [3, H, W] (or [N, 3, H, W]) of ``dtype``"""
    latent = np.asarray(latent)
    if latent.ndim == 4:
        return np.stack([decode(x, dtype=dtype) for x in latent])
    if latent.ndim != 3 or latent.shape[0] != LATENT_CHANNELS:
        raise ValueError(f'decode expects [{LATENT_CHANNELS}, h, w] latents, '
                         f'got {latent.shape}')
    _, h, w = latent.shape
    values = latent.astype(np.float64) / SCALE + SHIFT
    frame = values.reshape(3, PATCH, PATCH, h, w).transpose(0, 3, 1, 4, 2)
    return frame.reshape(3, h * PATCH, w * PATCH).astype(dtype, copy=False)
