"""Nested grid geometry: projection, hierarchical cell encoding, decoding.

A point is described by one absolute cell at the coarsest scale plus, at each
finer scale, a relative offset within its parent cell. Offsets are level-local
(every parent at a given level shares the same offset range), which is what
keeps the per-level vocabularies small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

EARTH_RADIUS_M = 6_371_000.0


class GridError(ValueError):
    """Invalid grid specification or malformed cell key."""


def project(lat: float, lon: float, ref_lat: float = 0.0) -> tuple[float, float]:
    """Equirectangular projection of degrees to meters.

    x = R * lon_rad * cos(ref_lat), y = R * lat_rad. Monotone and invertible,
    adequate at city scale; `ref_lat` should sit near the data's latitude band.
    """
    if not (-90.0 <= lat <= 90.0):
        raise GridError(f"latitude out of range: {lat}")
    if not (-180.0 <= lon <= 180.0):
        raise GridError(f"longitude out of range: {lon}")
    x = EARTH_RADIUS_M * math.radians(lon) * math.cos(math.radians(ref_lat))
    y = EARTH_RADIUS_M * math.radians(lat)
    return x, y


def unproject(x: float, y: float, ref_lat: float = 0.0) -> tuple[float, float]:
    """Inverse of `project`, returning (lat, lon) degrees."""
    lat = math.degrees(y / EARTH_RADIUS_M)
    lon = math.degrees(x / (EARTH_RADIUS_M * math.cos(math.radians(ref_lat))))
    return lat, lon


@dataclass(frozen=True)
class GridSpec:
    """Strictly nested grid scales, coarse to fine, plus a common origin.

    `scales[0] > scales[1] > ... > scales[-1]` in meters, each an exact
    integer multiple (>= 2) of the next, so cells nest without overlap.
    """

    scales: tuple[float, ...]
    origin: tuple[float, float] = (0.0, 0.0)
    ratios: tuple[int, ...] = field(init=False)  # ratios[h] = scales[h-1] / scales[h]

    def __post_init__(self):
        scales = tuple(float(s) for s in self.scales)
        if len(scales) < 1:
            raise GridError("need at least one scale")
        if any(s <= 0 for s in scales):
            raise GridError(f"scales must be positive: {scales}")
        ratios = []
        for h in range(1, len(scales)):
            q = scales[h - 1] / scales[h]
            q_int = round(q)
            if q_int < 2 or abs(q - q_int) > 1e-9 * q:
                raise GridError(
                    f"scale {scales[h - 1]} is not an integer multiple (>=2) of {scales[h]}"
                )
            ratios.append(q_int)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "ratios", tuple(ratios))

    @property
    def levels(self) -> int:
        return len(self.scales)


def encode_point(x: float, y: float, spec: GridSpec):
    """Map projected meters to hierarchical keys.

    Returns a list of length `spec.levels`: element 0 is the absolute coarse
    cell `(i, j)`; element h-1 for h > 1 is the linearized offset
    `o_x * q_h + o_y` inside its parent, with floor division and Euclidean
    mod so negative coordinates stay well-defined.
    """
    x0, y0 = spec.origin
    r1 = spec.scales[0]
    keys: list = [(math.floor((x - x0) / r1), math.floor((y - y0) / r1))]
    for h in range(2, spec.levels + 1):
        rh = spec.scales[h - 1]
        q = spec.ratios[h - 2]
        ox = math.floor((x - x0) / rh) % q
        oy = math.floor((y - y0) / rh) % q
        keys.append(ox * q + oy)
    return keys


def decode_keys(keys, spec: GridSpec) -> tuple[float, float, float]:
    """Invert `encode_point`: return the finest cell's center and its size.

    The absolute cell fixes the coarse corner; each offset then narrows to a
    sub-cell. The returned center is within scales[-1] / 2 of any point that
    encodes to `keys` (the round-trip law).
    """
    if len(keys) != spec.levels:
        raise GridError(f"expected {spec.levels} keys, got {len(keys)}")
    x0, y0 = spec.origin
    i, j = keys[0]
    cx = x0 + i * spec.scales[0]
    cy = y0 + j * spec.scales[0]
    for h in range(2, spec.levels + 1):
        q = spec.ratios[h - 2]
        off = int(keys[h - 1])
        if not (0 <= off < q * q):
            raise GridError(f"level-{h} offset {off} outside [0, {q * q})")
        ox, oy = divmod(off, q)
        cx += ox * spec.scales[h - 1]
        cy += oy * spec.scales[h - 1]
    half = spec.scales[-1] / 2.0
    return cx + half, cy + half, spec.scales[-1]


def finest_cell(x: float, y: float, spec: GridSpec) -> tuple[int, int]:
    """Absolute cell index at the finest scale (identifies a flat location)."""
    x0, y0 = spec.origin
    r = spec.scales[-1]
    return math.floor((x - x0) / r), math.floor((y - y0) / r)
