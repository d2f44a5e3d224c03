"""Distance helpers on WGS84 coordinates."""
import math

import numpy as np

EARTH_RADIUS_M = 6_371_008.8


def haversine_m(lon1, lat1, lon2, lat2):
    """Great-circle distance in meters. Works on scalars or numpy arrays."""
    lon1, lat1, lon2, lat2 = map(np.radians, (lon1, lat1, lon2, lat2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    d = 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    return float(d) if np.ndim(d) == 0 else d


class LocalProjection:
    """Equirectangular projection to meters around a reference latitude.

    Good to well under 0.1% over a few tens of kilometres, which is all the
    snapping and rasterisation code needs.
    """

    def __init__(self, lon0, lat0):
        self.lon0 = float(lon0)
        self.lat0 = float(lat0)
        self._kx = math.radians(1.0) * EARTH_RADIUS_M * math.cos(math.radians(self.lat0))
        self._ky = math.radians(1.0) * EARTH_RADIUS_M

    @classmethod
    def around(cls, lons, lats):
        lons = np.asarray(lons, dtype=float)
        lats = np.asarray(lats, dtype=float)
        return cls(0.5 * (lons.min() + lons.max()), 0.5 * (lats.min() + lats.max()))

    def forward(self, lon, lat):
        x = (np.asarray(lon, dtype=float) - self.lon0) * self._kx
        y = (np.asarray(lat, dtype=float) - self.lat0) * self._ky
        return x, y

    def inverse(self, x, y):
        return (np.asarray(x, dtype=float) / self._kx + self.lon0,
                np.asarray(y, dtype=float) / self._ky + self.lat0)
