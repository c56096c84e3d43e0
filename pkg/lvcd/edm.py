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
"""Continuous-noise diffusion: noise ladder, preconditioning, loss

>>> from lvcd.edm import NoiseSchedule
>>> sched = NoiseSchedule()
>>> sched.sigma_at(25), sched.sigma_at(1)
(700.0, 0.002)
"""
from dataclasses import dataclass
from typing import Union
import numpy as np
from lvcd.tensor import Tensor, mean, mul
from lvcd.utils import ConfigError, Params


@dataclass
class NoiseSchedule(Params):
    """Karras ladder: σ_t^(1/ρ) decreases linearly from σ_max^(1/ρ) (t = T)
    to σ_min^(1/ρ) (t = 1); σ_0 = 0"""
    sigma_min: float = 0.002
    sigma_max: float = 700.0
    rho: float = 7.0
    T: int = 25
    sigma_data: float = 0.5

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError('NoiseSchedule: requires 0 < sigma_min < sigma_max, '
                              f'got {self.sigma_min}, {self.sigma_max}')
        if self.T < 2:
            raise ConfigError(f'NoiseSchedule: T must be at least 2, got {self.T}')
        if self.rho <= 0 or self.sigma_data <= 0:
            raise ConfigError('NoiseSchedule: rho and sigma_data must be positive')

    def sigma_at(self, t: int) -> float:
        """σ_t for t in [0, T]"""
        if t == 0:
            return 0.0
        if not 1 <= t <= self.T:
            raise ValueError(f'sigma_at: t={t} outside [1, {self.T}]')
        if t == self.T:
            return float(self.sigma_max)
        if t == 1:
            return float(self.sigma_min)
        inv_rho = 1.0 / self.rho
        max_inv_rho = self.sigma_max ** inv_rho
        min_inv_rho = self.sigma_min ** inv_rho
        ramp = (self.T - t) / (self.T - 1)
        return float((max_inv_rho + ramp * (min_inv_rho - max_inv_rho)) ** self.rho)

    @property
    def sigmas(self):
        """σ_1 ... σ_T (increasing)"""
        return np.array([self.sigma_at(t) for t in range(1, self.T + 1)])

    def ladder(self):
        """Sampler order σ_T, ..., σ_1, σ_0 = 0"""
        return np.array([self.sigma_at(t) for t in range(self.T, -1, -1)])


@dataclass
class PrecondCoeffs:
    """Preconditioning of the network input, output and noise embedding"""
    c_skip: Union[float, np.ndarray]
    c_out: Union[float, np.ndarray]
    c_in: Union[float, np.ndarray]
    c_noise: Union[float, np.ndarray]


def precond(sigma, sigma_data: float=0.5) -> PrecondCoeffs:
    """Coefficients for σ (scalar or one value per batch entry)"""
    sigma_arr = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma_arr < 0):
        raise ValueError(f'precond: negative noise level {sigma}')
    total = sigma_arr ** 2 + sigma_data ** 2
    c_in = 1.0 / np.sqrt(total)
    with np.errstate(divide='ignore'):
        c_noise = np.log(sigma_arr) / 4
    coeffs = PrecondCoeffs(c_skip=sigma_data ** 2 / total,
                           c_out=sigma_arr * sigma_data / np.sqrt(total),
                           c_in=c_in, c_noise=c_noise)
    if sigma_arr.ndim == 0:
        coeffs = PrecondCoeffs(*[float(v) for v in (coeffs.c_skip, coeffs.c_out,
                                                    coeffs.c_in, coeffs.c_noise)])
    return coeffs


def loss_weight(sigma, sigma_data: float=0.5):
    """λ_σ = (σ² + σ_data²) / (σ·σ_data)²"""
    sigma_arr = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma_arr == 0):
        raise ValueError('loss weight is undefined at sigma = 0')
    weight = (sigma_arr ** 2 + sigma_data ** 2) / (sigma_arr * sigma_data) ** 2
    return float(weight) if weight.ndim == 0 else weight


def _per_entry(value, shape, dtype):
    """Scalar stays scalar; one value per entry is broadcast over ``shape``"""
    value = np.asarray(value)
    if value.ndim == 0:
        return float(value)
    if value.shape[0] != shape[0]:
        raise ValueError(f'{value.shape[0]} noise levels for {shape[0]} entries')
    view = (shape[0], ) + (1, ) * (len(shape) - 1)
    return np.broadcast_to(value.reshape(view), shape).astype(dtype)


def _scale(x, factor):
    if isinstance(x, Tensor):
        return mul(x, factor)
    return x * factor


def denoise(unet, x, sigma, cond=None, sigma_data: float=0.5):
    """D(x; σ) = c_skip·x + c_out·U(c_in·x; c_noise, cond)

    ``unet`` is called as ``unet(c_in * x, c_noise, cond)``; with c_out = 0
    the network is not evaluated.
    """
    coeffs = precond(sigma, sigma_data=sigma_data)
    shape = x.shape
    dtype = x.dtype
    c_skip = _per_entry(coeffs.c_skip, shape, dtype)
    c_out = _per_entry(coeffs.c_out, shape, dtype)
    c_in = _per_entry(coeffs.c_in, shape, dtype)
    if np.all(np.asarray(coeffs.c_out) == 0):
        return _scale(x, c_skip)
    c_noise = coeffs.c_noise
    if isinstance(c_noise, np.ndarray):
        # entries with σ = 0 are discarded by c_out = 0
        c_noise = np.where(np.isfinite(c_noise), c_noise, 0.0)
    output = unet(_scale(x, c_in), c_noise, cond)
    return _scale(output, c_out) + _scale(x, c_skip)


def dsm_loss(denoiser, clean, cond, sigma, noise, sigma_data: float=0.5):
    """λ_σ · MSE(D(clean + σ·noise; σ, cond), clean)

    ``denoiser`` is called as ``denoiser(x, sigma, cond)``. With one σ per
    entry each entry's squared error is weighted by its own λ_σ.
    """
    clean = np.asarray(clean)
    noise = np.asarray(noise)
    if noise.shape != clean.shape:
        raise ValueError(f'noise shape {noise.shape} != clean shape {clean.shape}')
    weight = loss_weight(sigma, sigma_data=sigma_data)
    noised = clean + _per_entry(sigma, clean.shape, clean.dtype) * noise
    output = denoiser(noised.astype(clean.dtype), sigma, cond)
    if not isinstance(output, Tensor):
        return float(np.mean(_per_entry(weight, clean.shape, np.float64)
                             * (output - clean) ** 2))
    diff = output - clean
    squared = mul(diff, diff)
    return mean(mul(squared, _per_entry(weight, clean.shape, output.dtype)))


@dataclass
class TrainingNoiseConfig(Params):
    """Training noise levels: ln σ ~ Normal(log_mean, log_std²)"""
    log_mean: float = 1.0
    log_std: float = 1.6

    def __post_init__(self):
        if self.log_std <= 0:
            raise ConfigError(f'log_std must be positive, got {self.log_std}')

    def weight(self, sigma, sigma_data: float=0.5):
        """Loss weight λ_σ"""
        return loss_weight(sigma, sigma_data=sigma_data)


def sample_training_sigma(rng, config: TrainingNoiseConfig=None, size=None):
    """Draw σ = exp(g), g ~ Normal(log_mean, log_std²)"""
    config = TrainingNoiseConfig() if config is None else config
    draw = np.exp(rng.normal(config.log_mean, config.log_std, size=size))
    return float(draw) if size is None else draw
