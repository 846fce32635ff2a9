"""Reference HaarPSI values (grayscale, with 2x2 pre-subsampling) for haarpsi.json."""
import json

import numpy as np
from scipy.signal import convolve2d as sp_convolve2d


def convolve2d(data, kernel):
    return sp_convolve2d(data, np.copy(kernel[::-1, ::-1]), mode="same")


def subsample(img):
    return convolve2d(img, np.ones((2, 2)) / 4.0)[::2, ::2]


def decompose(img, n_scales):
    out = np.zeros(img.shape + (2 * n_scales,))
    for s in range(1, n_scales + 1):
        f = 2.0 ** (-s) * np.ones((2 ** s, 2 ** s))
        f[: f.shape[0] // 2, :] = -f[: f.shape[0] // 2, :]
        out[:, :, s - 1] = convolve2d(img, f)
        out[:, :, s + n_scales - 1] = convolve2d(img, f.T)
    return out


def haarpsi(ref, dist, C=30.0, alpha=4.2):
    ref, dist = subsample(ref), subsample(dist)
    n = 3
    cr, cd = decompose(ref, n), decompose(dist, n)
    sims = np.zeros(ref.shape + (2,))
    weights = np.zeros(ref.shape + (2,))
    for o in range(2):
        weights[:, :, o] = np.maximum(np.abs(cr[:, :, 2 + o * n]), np.abs(cd[:, :, 2 + o * n]))
        mr = np.abs(cr[:, :, (o * n, 1 + o * n)])
        md = np.abs(cd[:, :, (o * n, 1 + o * n)])
        sims[:, :, o] = np.sum((2 * mr * md + C) / (mr ** 2 + md ** 2 + C), axis=2) / 2
    sig = 1.0 / (1.0 + np.exp(-alpha * sims))
    m = np.sum(sig * weights) / np.sum(weights)
    return (np.log(m / (1 - m)) / alpha) ** 2


rng = np.random.default_rng(20240611)
cases = []
for (h, w) in [(16, 16), (20, 24), (17, 33), (40, 32)]:
    a = rng.integers(0, 256, size=(h, w)).astype(float)
    yy, xx = np.mgrid[0:h, 0:w]
    smooth = 127.5 + 100 * np.sin(xx / 3.0) * np.cos(yy / 4.0)
    b = np.clip(np.round(0.6 * smooth + 0.4 * a + rng.normal(0, 10, size=(h, w))), 0, 255)
    a2 = np.round(smooth)
    for x, y in [(a, b), (a2, b), (a2, np.clip(a2 + 20, 0, 255))]:
        cases.append({
            "width": w,
            "height": h,
            "a": x.astype(int).ravel().tolist(),
            "b": y.astype(int).ravel().tolist(),
            "haarpsi": float(haarpsi(x, y)),
        })

with open("haarpsi.json", "w") as f:
    json.dump(cases, f)
print(len(cases), [round(c["haarpsi"], 6) for c in cases])
