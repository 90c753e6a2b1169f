"""Hash-lattice value noise, fractional Brownian motion and the smoke overlay."""

import numpy as np

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)


def _hash_unit(ix, iy, seed):
    """Deterministic uniform [0, 1) value per integer lattice point (splitmix64)."""
    with np.errstate(over="ignore"):
        h = (ix.astype(np.int64).astype(np.uint64) * _M1) ^ (iy.astype(np.int64).astype(np.uint64) * _M2)
        h = h ^ (np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * _M3)
        h ^= h >> np.uint64(30)
        h *= _M2
        h ^= h >> np.uint64(27)
        h *= _M3
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _smooth(t):
    return t * t * (3.0 - 2.0 * t)


def value_noise(x, y, seed: int):
    """Smoothly interpolated lattice noise in [0, 1] at real coordinates."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0 = np.floor(x)
    y0 = np.floor(y)
    tx = _smooth(x - x0)
    ty = _smooth(y - y0)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    v00 = _hash_unit(x0, y0, seed)
    v10 = _hash_unit(x0 + 1, y0, seed)
    v01 = _hash_unit(x0, y0 + 1, seed)
    v11 = _hash_unit(x0 + 1, y0 + 1, seed)
    top = v00 + tx * (v10 - v00)
    bottom = v01 + tx * (v11 - v01)
    return top + ty * (bottom - top)


def fbm(height: int, width: int, seed: int, octaves: int = 5, persistence: float = 0.5, cell: float = None):
    """Fractional Brownian motion field min-max normalized to [0, 1].

    Octave ``o`` samples value noise at frequency ``2**o`` with amplitude
    ``persistence**o``. ``cell`` is the base lattice spacing in pixels
    (default: a quarter of the larger image side).
    """
    cell = cell or max(height, width) / 4.0
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    xx /= cell
    yy /= cell
    field = np.zeros((height, width))
    for o in range(octaves):
        freq = 2.0 ** o
        # distinct lattice per octave so octaves are not scaled copies
        field += persistence ** o * value_noise(freq * xx, freq * yy, seed * 131 + o)
    lo, hi = field.min(), field.max()
    if hi - lo <= 0:
        return np.zeros_like(field)
    return (field - lo) / (hi - lo)


def add_fbm_smoke(img, seed: int, octaves: int = 5, persistence: float = 0.5, alpha: float = 0.6):
    """Blend a whitish FBM haze over an 8-bit image.

    ``out = img * (1 - alpha*f) + 255*0.85*alpha*f`` per channel, rounded.
    ``alpha = 0`` returns the input unchanged.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    img = np.asarray(img)
    f = fbm(img.shape[0], img.shape[1], seed, octaves, persistence)
    a = alpha * f
    if img.ndim == 3:
        a = a[..., None]
    out = img.astype(np.float64) * (1.0 - a) + 255.0 * 0.85 * a
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)
