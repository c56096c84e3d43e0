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
"""Evaluation metrics: PSNR, SSIM, temporal consistency (TC) and
Euclidean Distance Map Difference (EDMD).

Frames are float arrays ``[3, H, W]`` in ``[0, 1]``; clips stack them as
``[L, 3, H, W]``. Flows are backward fields ``[2, H, W]`` holding
``(dx, dy)`` in pixels, the flow at index ``t`` maps frame ``t + 1`` onto
frame ``t``.
"""
from dataclasses import dataclass, field
import logging
import numpy as np
from scipy import ndimage
from lvcd.utils import Params
from lvcd.data import extract_sketch

logger = logging.getLogger(__name__)


@dataclass
class EvalConfig(Params):
    """Evaluation resolution and guards"""
    size: int = 256
    eps: float = 1e-8
    threshold: float = 0.15

    def __post_init__(self):
        if self.size is not None and self.size < 1:
            raise ValueError(f'size must be positive, got {self.size}')
        if self.eps <= 0:
            raise ValueError(f'eps must be positive, got {self.eps}')


@dataclass
class TCReport:
    """Per-pair ratios and the pairs whose denominators were guarded"""
    value: float
    ratios: list = field(default_factory=list)
    flagged: list = field(default_factory=list)


@dataclass
class EDMDReport:
    """Per-frame RMSE and the frames skipped for an empty sketch"""
    value: float
    errors: list = field(default_factory=list)
    skipped: list = field(default_factory=list)


def warp(frame, flow):
    """Bilinear backward gather of `frame` at ``p + flow(p)``; samples
    outside the image clamp to the border.

    >>> import numpy as np
    >>> from lvcd.metrics import warp
    >>> ramp = np.tile(np.arange(4, dtype=np.float32), (1, 3, 1))
    >>> flow = np.zeros((2, 3, 4), dtype=np.float32)
    >>> flow[0] = -1
    >>> warp(ramp, flow)[0, 0]
    array([0., 0., 1., 2.], dtype=float32)
    """
    frame = np.asarray(frame)
    flow = np.asarray(flow)
    squeeze = frame.ndim == 2
    if squeeze:
        frame = frame[np.newaxis]
    if flow.shape != (2, ) + frame.shape[-2:]:
        raise ValueError(f'flow {flow.shape} does not match frame {frame.shape}')
    H, W = frame.shape[-2:]
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    coords = np.stack([yy + flow[1], xx + flow[0]])
    output = np.stack([ndimage.map_coordinates(channel, coords, order=1,
                                               mode='nearest')
                       for channel in frame])
    return output[0] if squeeze else output


def resize_frames(frames, size):
    """Bilinear resize of the trailing two axes to ``size x size``"""
    frames = np.asarray(frames, dtype=np.float64)
    H, W = frames.shape[-2:]
    if size is None or (H == size and W == size):
        return frames
    factors = (1, ) * (frames.ndim - 2) + (size / H, size / W)
    return ndimage.zoom(frames, factors, order=1, mode='nearest', grid_mode=True)


def resize_flows(flows, size):
    """Resize ``[..., 2, H, W]`` flows and rescale the displacements"""
    flows = np.asarray(flows, dtype=np.float64)
    H, W = flows.shape[-2:]
    if size is None or (H == size and W == size):
        return flows
    output = resize_frames(flows, size).copy()
    output[..., 0, :, :] *= size / W
    output[..., 1, :, :] *= size / H
    return output


def _relative_error(frames, flow, t, eps):
    target = frames[t + 1]
    norm = float(np.linalg.norm(target))
    error = float(np.linalg.norm(warp(frames[t], flow) - target))
    return error / max(norm, eps), norm < eps


def tc_report(generated, original, flows, config=None):
    """Temporal consistency with the per-pair ratios.

    The sequence value is the mean of the per-pair ratios; both relative
    errors carry an additive `eps` so identical clips give exactly one.
    """
    config = EvalConfig() if config is None else config
    generated = resize_frames(generated, config.size)
    original = resize_frames(original, config.size)
    flows = resize_flows(flows, config.size)
    if generated.shape != original.shape:
        raise ValueError(f'generated {generated.shape} and original '
                         f'{original.shape} differ')
    L = generated.shape[0]
    if L < 2:
        raise ValueError('tc needs at least two frames')
    if flows.shape[0] < L - 1:
        raise ValueError(f'{L} frames need {L - 1} flows, got {flows.shape[0]}')
    eps = config.eps
    ratios, flagged = [], []
    for t in range(L - 1):
        num, _ = _relative_error(generated, flows[t], t, eps)
        den, black = _relative_error(original, flows[t], t, eps)
        if black or den < eps:
            flagged.append(t)
        ratios.append((num + eps) / (den + eps))
    if flagged:
        logger.warning('tc: guarded denominators on frame pairs %s', flagged)
    return TCReport(value=float(np.mean(ratios)), ratios=ratios,
                    flagged=flagged)


def tc(generated, original, flows, config=None):
    """Temporal consistency; 1.0 matches the original's temporal behaviour"""
    return tc_report(generated, original, flows, config=config).value


def _edt_1d(f):
    """Lower envelope of parabolas ``f[q] + (x - q)^2`` over one row"""
    n = f.shape[0]
    sites = np.flatnonzero(np.isfinite(f))
    output = np.full(n, np.inf)
    if sites.shape[0] == 0:
        return output
    v = [int(sites[0])]
    z = [-np.inf]
    for q in sites[1:]:
        q = int(q)
        while True:
            p = v[-1]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2 * q - 2 * p)
            if s <= z[-1]:
                v.pop()
                z.pop()
                continue
            break
        v.append(q)
        z.append(s)
    z.append(np.inf)
    k = 0
    for x in range(n):
        while z[k + 1] < x:
            k += 1
        output[x] = (x - v[k]) ** 2 + f[v[k]]
    return output


def _column_distance(mask):
    """Squared distance to the nearest line pixel on the same column"""
    H = mask.shape[0]
    rows = np.arange(H, dtype=np.float64)[:, np.newaxis]
    prev = np.where(mask, rows, -np.inf)
    prev = np.maximum.accumulate(prev, axis=0)
    nxt = np.where(mask, rows, np.inf)
    nxt = np.minimum.accumulate(nxt[::-1], axis=0)[::-1]
    return np.minimum((rows - prev) ** 2, (nxt - rows) ** 2)


def edt(mask):
    """Exact Euclidean distance to the nearest nonzero pixel of `mask`.

    Column pass followed by a lower-envelope pass over rows; squared
    distances are integers, so the result is exact.

    >>> import numpy as np
    >>> from lvcd.metrics import edt
    >>> mask = np.zeros((3, 3), dtype=bool)
    >>> mask[0, 0] = True
    >>> float(edt(mask)[1, 2])
    2.23606797749979
    """
    mask = np.asarray(mask)
    if mask.ndim == 3 and mask.shape[0] == 1:
        mask = mask[0]
    if mask.ndim != 2:
        raise ValueError(f'edt expects a 2-D mask, got {mask.shape}')
    mask = mask > 0.5 if mask.dtype.kind == 'f' else mask.astype(bool)
    if not mask.any():
        raise ValueError('edt: mask has no line pixels')
    columns = _column_distance(mask)
    squared = np.stack([_edt_1d(row) for row in columns])
    return np.sqrt(squared)


def resize_mask(mask, size):
    """Nearest-neighbour resize of a [H, W] line mask to ``size x size``"""
    mask = np.asarray(mask) > 0.5
    H, W = mask.shape
    if size is None or (H == size and W == size):
        return mask
    rows = np.minimum(((np.arange(size) + 0.5) * H / size).astype(int), H - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * W / size).astype(int), W - 1)
    return mask[np.ix_(rows, cols)]


def edmd_masks(generated, reference, size=None):
    """RMSE between the distance maps of two line masks; both masks are
    resized to ``size x size`` before the transform (native when None)"""
    generated = np.asarray(generated).reshape(np.shape(generated)[-2:])
    reference = np.asarray(reference).reshape(np.shape(reference)[-2:])
    if generated.shape != reference.shape:
        raise ValueError(f'masks differ in shape: {generated.shape} {reference.shape}')
    first = edt(resize_mask(generated, size))
    second = edt(resize_mask(reference, size))
    return float(np.sqrt(np.mean((first - second) ** 2)))


def edmd_report(generated, sketches, config=None):
    """EDMD with per-frame errors; frames with an empty sketch are skipped"""
    config = EvalConfig() if config is None else config
    generated = np.asarray(generated)
    sketches = np.asarray(sketches)
    if generated.shape[0] != sketches.shape[0]:
        raise ValueError(f'{generated.shape[0]} frames and '
                         f'{sketches.shape[0]} sketches')
    errors, skipped = [], []
    for t, (frame, sketch) in enumerate(zip(generated, sketches)):
        ours = extract_sketch(frame, threshold=config.threshold)
        if not (ours > 0.5).any() or not (np.asarray(sketch) > 0.5).any():
            skipped.append(t)
            continue
        errors.append(edmd_masks(ours, sketch, size=config.size))
    if skipped:
        logger.warning('edmd: empty sketches on frames %s', skipped)
    value = float(np.mean(errors)) if errors else float('nan')
    return EDMDReport(value=value, errors=errors, skipped=skipped)


def edmd(generated, sketches, config=None):
    """Euclidean Distance Map Difference between extracted and input sketches"""
    return edmd_report(generated, sketches, config=config).value


def psnr(a, b):
    """Peak signal-to-noise ratio (peak 1); ``inf`` for identical inputs"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f'psnr: shapes differ {a.shape} {b.shape}')
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return float('inf')
    return -10 * float(np.log10(mse))


def ssim(a, b, sigma=1.5, k1=0.01, k2=0.03):
    """Structural similarity with an 11x11 Gaussian window over the last
    two axes, averaged over every position and channel"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f'ssim: shapes differ {a.shape} {b.shape}')
    sigmas = (0, ) * (a.ndim - 2) + (sigma, sigma)

    def blur(x):
        return ndimage.gaussian_filter(x, sigmas, truncate=3.5)

    c1 = k1 ** 2
    c2 = k2 ** 2
    mu_a = blur(a)
    mu_b = blur(b)
    mu_ab = mu_a * mu_b
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    var_a = blur(a * a) - mu_aa
    var_b = blur(b * b) - mu_bb
    cov = blur(a * b) - mu_ab
    num = (2 * mu_ab + c1) * (2 * cov + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def mean_motion(flows, size=256, static_eps=1e-6):
    """Mean flow magnitude at evaluation resolution over moving positions"""
    flows = np.asarray(flows, dtype=np.float64)
    if flows.ndim == 3:
        flows = flows[np.newaxis]
    H, W = flows.shape[-2:]
    scale_x = 1.0 if size is None else size / W
    scale_y = 1.0 if size is None else size / H
    magnitude = np.hypot(flows[:, 0] * scale_x, flows[:, 1] * scale_y)
    moving = magnitude > static_eps
    if not moving.any():
        return 0.0
    return float(magnitude[moving].mean())


def color_error(frames, labels, palette):
    """Mean Euclidean RGB distance to the palette colour on shape pixels
    (labels > 0)"""
    frames = np.asarray(frames, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    palette = np.asarray(palette, dtype=np.float64)
    if frames.ndim == 3:
        frames, labels = frames[np.newaxis], labels[np.newaxis]
    if frames.shape[0] != labels.shape[0] or frames.shape[2:] != labels.shape[1:]:
        raise ValueError(f'frames {frames.shape} and labels {labels.shape} differ')
    shape = labels > 0
    if not shape.any():
        return 0.0
    pixels = frames.transpose(0, 2, 3, 1)[shape]
    target = palette[labels[shape]]
    return float(np.linalg.norm(pixels - target, axis=1).mean())


def evaluate_clip(generated, original, flows, sketches, config=None):
    """psnr, ssim, tc and edmd of one generated clip; psnr uses the MSE of
    the whole clip and ssim is the mean over frames

    >>> import numpy as np
    >>> from lvcd.data import gen_clip
    >>> from lvcd.metrics import evaluate_clip, EvalConfig
    >>> clip = gen_clip(0, length=3, H=32, W=32)
    >>> res = evaluate_clip(clip.frames, clip.frames, clip.flows,
    ...                     clip.sketches, EvalConfig(size=None))
    >>> round(res['tc'], 6), res['psnr']
    (1.0, inf)
    """
    config = EvalConfig() if config is None else config
    generated = np.asarray(generated)
    original = np.asarray(original)
    if generated.shape != original.shape:
        raise ValueError(f'generated {generated.shape} and original '
                         f'{original.shape} differ')
    ssims = [ssim(g, o) for g, o in zip(generated, original)]
    return dict(psnr=psnr(generated, original), ssim=float(np.mean(ssims)),
                tc=tc(generated, original, flows, config=config),
                edmd=edmd(generated, sketches, config=config))
