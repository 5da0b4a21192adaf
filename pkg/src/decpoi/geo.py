"""Great-circle geometry helpers shared by data synthesis, pretraining,
neighbor identification and evaluation."""

import numpy as np

EARTH_RADIUS_KM = 6371.0

# Degrees-per-km at the equator; used only by the synthetic generator to
# convert small km offsets into coordinate offsets.
KM_PER_DEG_LAT = 110.574
KM_PER_DEG_LON_EQ = 111.320


def haversine_km(a, b):
    """Great-circle distance in km between (lon, lat) points in degrees.

    Accepts scalars or broadcastable arrays; returns float for scalar input.
    """
    lon1, lat1 = np.radians(np.asarray(a[0], dtype=float)), np.radians(np.asarray(a[1], dtype=float))
    lon2, lat2 = np.radians(np.asarray(b[0], dtype=float)), np.radians(np.asarray(b[1], dtype=float))
    dlon = lon2 - lon1
    dlat = lat2 - lat1
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    arc = 2.0 * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    d = EARTH_RADIUS_KM * arc
    return float(d) if np.isscalar(d) or d.ndim == 0 else d


def pairwise_haversine_km(coords_a, coords_b):
    """|A| x |B| distance matrix between two (n, 2) arrays of (lon, lat)."""
    a = np.asarray(coords_a, dtype=float)
    b = np.asarray(coords_b, dtype=float)
    return haversine_km(
        (a[:, None, 0], a[:, None, 1]),
        (b[None, :, 0], b[None, :, 1]),
    )
