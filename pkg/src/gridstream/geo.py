"""Great-circle distances over lon/lat degrees.

The grid and its layer formulas work in degree units; when a query
radius is given in meters the layer construction needs degree radii
that safely bracket the metric ball. ``degree_radius_bounds`` returns
an under-estimate for the guaranteed layer (inside it, the haversine
distance is certainly within r) and an over-estimate for the candidate
layer (outside it, certainly beyond r). Both carry a 2% margin against
the spherical-vs-planar approximation, which is far above the actual
error at city scale.
"""

from __future__ import annotations

import math

EARTH_RADIUS_M = 6371008.8
METERS_PER_DEGREE = math.pi * EARTH_RADIUS_M / 180.0


def haversine_m(ax: float, ay: float, bx: float, by: float) -> float:
    """Great-circle meters between (lon, lat) pairs in degrees."""
    lat1 = math.radians(ay)
    lat2 = math.radians(by)
    dlat = lat2 - lat1
    dlon = math.radians(bx - ax)
    h = (math.sin(dlat / 2.0) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def degree_radius_bounds(r_m: float, lat_min: float,
                         lat_max: float) -> tuple[float, float]:
    """Degree radii (under, over) bracketing a metric radius on a
    latitude band.

    under: any point within ``under`` degrees (planar) of q is within
    r_m meters; safe for the guaranteed layer. over: any point within
    r_m meters is within ``over`` degrees; safe for the candidate layer.
    """
    if r_m <= 0:
        raise ValueError(f"radius must be positive, got {r_m}")
    mpd = METERS_PER_DEGREE
    under = r_m / (mpd * 1.02)
    pad_deg = r_m / mpd
    max_abs = min(max(abs(lat_min), abs(lat_max)) + pad_deg, 89.0)
    over = r_m * 1.02 / (mpd * math.cos(math.radians(max_abs)))
    return under, over
