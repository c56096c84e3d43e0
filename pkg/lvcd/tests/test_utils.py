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
import os
import numpy as np
from PIL import Image
from sklearn.base import clone
from lvcd.edm import NoiseSchedule
from lvcd.utils import (ConfigError, FormatError, progress_bar, read_flo5, read_json,
                        read_ppm, read_sketch, write_flo5, write_json, write_ppm,
                        write_sketch)


def test_params():
    """Test get_params, set_params and clone"""
    schedule = NoiseSchedule(T=10)
    other = clone(schedule)
    assert other == schedule and other is not schedule
    other.set_params(T=5)
    assert other.T == 5 and schedule.T == 10
    try:
        other.set_params(steps=3)
    except ConfigError:
        pass
    else:
        assert False
    try:
        other.set_params(T=1)
    except ConfigError:
        return
    assert False


def test_progress_bar():
    """Test progress_bar without tqdm"""
    data = [1, 2, 3]
    assert progress_bar(data, use_tqdm=False) is data
    assert list(progress_bar(data, total=3)) == data


def test_json():
    """Test write_json and read_json"""
    for fname in ['utils-test.json', 'utils-test.json.gz']:
        write_json(fname, dict(a=1, b=[1.5, 2]))
        assert read_json(fname) == dict(a=1, b=[1.5, 2])
        os.unlink(fname)
    with open('utils-test.json', 'w', encoding='utf-8') as fpt:
        fpt.write('{"a": \n')
    try:
        read_json('utils-test.json')
    except FormatError:
        os.unlink('utils-test.json')
        return
    assert False


def test_ppm():
    """Test 8-bit PPM files"""
    image = np.random.default_rng(0).integers(0, 256, (3, 5, 7)) / 255
    write_ppm('utils-test.ppm', image)
    output = read_ppm('utils-test.ppm')
    assert output.shape == (3, 5, 7) and output.dtype == np.float32
    assert np.all(np.round(output * 255) == np.round(image * 255))
    with open('utils-test.ppm', 'r+b') as fpt:
        fpt.write(b'P5')
    try:
        read_ppm('utils-test.ppm')
    except FormatError:
        os.unlink('utils-test.ppm')
        return
    assert False


def test_ppm_comments():
    """Test header comments"""
    with open('utils-test.ppm', 'wb') as fpt:
        fpt.write(b'P6\n# a comment\n2 1\n255\n')
        fpt.write(bytes([255, 0, 0, 0, 0, 255]))
    output = read_ppm('utils-test.ppm')
    assert np.array_equal(output[:, 0, 0], [1, 0, 0])
    assert np.array_equal(output[:, 0, 1], [0, 0, 1])
    os.unlink('utils-test.ppm')


def test_ppm_invalid():
    """Test truncated PPM and other image formats"""
    write_ppm('utils-test.ppm', np.ones((3, 4, 4)))
    with open('utils-test.ppm', 'rb') as fpt:
        buffer = fpt.read()
    with open('utils-test.ppm', 'wb') as fpt:
        fpt.write(buffer[:-5])
    Image.new('RGB', (4, 4)).save('utils-test.png')
    for fname in ['utils-test.ppm', 'utils-test.png', 'missing-test.ppm']:
        try:
            read_ppm(fname)
        except FormatError:
            continue
        assert False, fname
    os.unlink('utils-test.ppm')
    os.unlink('utils-test.png')


def test_sketch_file():
    """Test black lines on white"""
    sketch = np.zeros((1, 4, 4), dtype=np.float32)
    sketch[0, 1] = 1
    write_sketch('utils-test.ppm', sketch)
    assert np.all(read_ppm('utils-test.ppm')[:, 1] == 0)
    assert np.array_equal(read_sketch('utils-test.ppm'), sketch)
    os.unlink('utils-test.ppm')


def test_flo5():
    """Test FLO5 files"""
    flow = np.random.default_rng(1).normal(size=(2, 3, 5)).astype(np.float32)
    write_flo5('utils-test.flo5', flow)
    assert np.array_equal(read_flo5('utils-test.flo5'), flow)
    with open('utils-test.flo5', 'rb') as fpt:
        buffer = fpt.read()
    with open('utils-test.flo5', 'wb') as fpt:
        fpt.write(buffer[:-4])
    try:
        read_flo5('utils-test.flo5')
    except FormatError:
        pass
    else:
        assert False
    with open('utils-test.flo5', 'wb') as fpt:
        fpt.write(b'PIEH' + buffer[4:])
    try:
        read_flo5('utils-test.flo5')
    except FormatError:
        os.unlink('utils-test.flo5')
        return
    assert False
