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
import numpy as np
from numpy.testing import assert_almost_equal
from sklearn.base import clone
from lvcd.edm import (NoiseSchedule, TrainingNoiseConfig, denoise, dsm_loss,
                      loss_weight, precond, sample_training_sigma)
from lvcd.tensor import Tensor
from lvcd.utils import ConfigError


def test_schedule_endpoints():
    """Test σ_T and σ_1"""
    sched = NoiseSchedule()
    assert abs(sched.sigma_at(25) - 700) / 700 < 1e-9
    assert abs(sched.sigma_at(1) - 0.002) / 0.002 < 1e-9
    assert sched.sigma_at(0) == 0
    ladder = sched.ladder()
    assert ladder.shape[0] == 26 and ladder[-1] == 0
    assert np.all(np.diff(ladder) < 0)


def test_schedule_affine():
    """Test σ_t^(1/ρ) is affine in t"""
    sched = NoiseSchedule()
    roots = sched.sigmas ** (1 / 7)
    steps = np.diff(roots)
    assert np.max(np.abs(steps - steps[0])) / np.abs(steps[0]) < 1e-9


def test_schedule_errors():
    """Test schedule validation"""
    try:
        NoiseSchedule(sigma_min=1.0, sigma_max=0.5)
    except ConfigError:
        pass
    else:
        assert False
    try:
        NoiseSchedule().sigma_at(26)
    except ValueError:
        return
    assert False


def test_schedule_clone():
    """Test clone of a schedule"""
    sched = NoiseSchedule(T=10)
    other = clone(sched).set_params(rho=3.0)
    assert other.T == 10 and sched.rho == 7.0


def test_precond():
    """Test preconditioning coefficients"""
    coeffs = precond(0.0)
    assert coeffs.c_skip == 1 and coeffs.c_out == 0
    coeffs = precond(0.5)
    assert_almost_equal(coeffs.c_skip, 0.5)
    assert_almost_equal(coeffs.c_out, 0.5 / np.sqrt(2))
    assert_almost_equal(coeffs.c_in, 1 / np.sqrt(0.5))
    assert_almost_equal(coeffs.c_noise, np.log(0.5) / 4)
    arr = precond(np.array([1.0, 2.0]))
    assert arr.c_skip.shape == (2, )


def test_denoise_sigma_zero():
    """Test D(x; 0) = x without evaluating the network"""

    def unet(x, c_noise, cond):
        raise RuntimeError('evaluated')

    x = np.random.default_rng(0).standard_normal((2, 3))
    assert_almost_equal(denoise(unet, x, 0.0), x)


def test_denoise_composition():
    """Test D = c_skip x + c_out U(c_in x)"""
    x = np.random.default_rng(1).standard_normal((2, 3))
    coeffs = precond(2.0)
    out = denoise(lambda y, c, cond: 2 * y, x, 2.0)
    assert_almost_equal(out, coeffs.c_skip * x + coeffs.c_out * 2 * coeffs.c_in * x)
    sigma = np.array([0.0, 2.0])
    out = denoise(lambda y, c, cond: 2 * y, x, sigma)
    assert_almost_equal(out[0], x[0])
    assert_almost_equal(out[1], coeffs.c_skip * x[1] + coeffs.c_out * 2 * coeffs.c_in * x[1])


def test_loss_weight():
    """Test λ_σ"""
    assert_almost_equal(loss_weight(0.5), (0.25 + 0.25) / 0.0625)
    try:
        loss_weight(0.0)
    except ValueError:
        return
    assert False


def test_dsm_loss():
    """Test weighted denoising loss"""
    rng = np.random.default_rng(2)
    clean = rng.standard_normal((3, 4))
    noise = rng.standard_normal((3, 4))
    assert dsm_loss(lambda x, s, c: clean, clean, None, 1.0, noise) == 0
    loss = dsm_loss(lambda x, s, c: clean + 1, clean, None, 1.0, noise)
    assert_almost_equal(loss, loss_weight(1.0))
    tensor = dsm_loss(lambda x, s, c: Tensor(clean + 1, dtype=np.float64),
                      clean, None, 1.0, noise)
    assert_almost_equal(tensor.item(), loss_weight(1.0))
    sigma = np.array([0.5, 1.0, 2.0])
    loss = dsm_loss(lambda x, s, c: clean + 1, clean, None, sigma, noise)
    assert_almost_equal(loss, np.mean(loss_weight(sigma)))


def test_training_sigma():
    """Test ln σ ~ Normal(1.0, 1.6²)"""
    rng = np.random.default_rng(3)
    draws = sample_training_sigma(rng, TrainingNoiseConfig(), size=20000)
    logs = np.log(draws)
    assert abs(logs.mean() - 1.0) < 0.05
    assert abs(logs.std() - 1.6) < 0.05
    assert isinstance(sample_training_sigma(rng), float)
