"""Coordinates to continent to GDP-per-capita income proxy."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ValidationError


class Continent(str, enum.Enum):
    AFRICA = "Africa"
    ASIA = "Asia"
    EUROPE = "Europe"
    NORTH_AMERICA = "NorthAmerica"
    SOUTH_AMERICA = "SouthAmerica"
    OCEANIA = "Oceania"

    @classmethod
    def parse(cls, name: str) -> "Continent":
        key = name.strip().replace(" ", "").replace("_", "").lower()
        for c in cls:
            if c.value.lower() == key:
                return c
        raise ValidationError(f"unknown continent {name!r}")


# Nominal GDP per capita (US$) used as the income of every sample from a
# continent. Antarctica has no entry.
GDP_PER_CAPITA: dict[Continent, int] = {
    Continent.OCEANIA: 53220,
    Continent.NORTH_AMERICA: 49240,
    Continent.EUROPE: 29410,
    Continent.SOUTH_AMERICA: 8560,
    Continent.ASIA: 7350,
    Continent.AFRICA: 1930,
}


@dataclass(frozen=True)
class ContinentIncomeTable:
    values: dict

    def __post_init__(self):
        if set(self.values) != set(Continent) or len(self.values) != 6:
            raise ValidationError("income table needs exactly one entry per continent")

    def __getitem__(self, continent: Continent) -> float:
        return self.values[continent]

    def ordered(self) -> list[Continent]:
        """Continents sorted by income, highest first."""
        return sorted(self.values, key=lambda c: (-self.values[c], c.value))

    def to_json(self) -> str:
        return json.dumps({c.value: self.values[c] for c in self.ordered()})

    @classmethod
    def from_json(cls, text: str) -> "ContinentIncomeTable":
        return cls({Continent.parse(k): v for k, v in json.loads(text).items()})


DEFAULT_INCOME_TABLE = ContinentIncomeTable(dict(GDP_PER_CAPITA))


@dataclass(frozen=True)
class GeoTable:
    """Continent polygons in lookup order; each ring is an ``(n, 2)`` lon/lat array."""

    rings: tuple[tuple[Continent, np.ndarray], ...]

    @classmethod
    def parse(cls, text: str) -> "GeoTable":
        rings: list[tuple[Continent, list]] = []
        current = None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                current = Continent.parse(line[1:-1])
            elif line == "ring":
                if current is None:
                    raise ValidationError(f"line {lineno}: ring outside a continent record")
                rings.append((current, []))
            else:
                if not rings:
                    raise ValidationError(f"line {lineno}: vertex before any ring")
                try:
                    lon, lat = (float(v) for v in line.split())
                except ValueError:
                    raise ValidationError(f"line {lineno}: expected 'lon lat', got {raw!r}") from None
                rings[-1][1].append((lon, lat))
        out = []
        for cont, verts in rings:
            if len(verts) < 3:
                raise ValidationError(f"{cont.value}: ring with fewer than 3 vertices")
            out.append((cont, np.array(verts, dtype=np.float64)))
        return cls(tuple(out))

    @classmethod
    def from_file(cls, path: str | Path) -> "GeoTable":
        return cls.parse(Path(path).read_text(encoding="utf-8"))


@lru_cache(maxsize=1)
def default_geo_table() -> GeoTable:
    text = resources.files("geofair").joinpath("data/continents.txt").read_text(encoding="utf-8")
    return GeoTable.parse(text)


def point_in_ring(lon: float, lat: float, ring: np.ndarray) -> bool:
    """Even-odd ray casting test in the lon/lat plane."""
    x, y = ring[:, 0], ring[:, 1]
    xj, yj = np.roll(x, 1), np.roll(y, 1)
    crosses = (y > lat) != (yj > lat)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_at = (xj - x) * (lat - y) / (yj - y) + x
    return bool(np.count_nonzero(crosses & (lon < x_at)) % 2)


def _haversine(lon1, lat1, lon2, lat2):
    lon1, lat1, lon2, lat2 = map(np.radians, (lon1, lat1, lon2, lat2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def check_coordinates(latitude: float, longitude: float) -> None:
    if not (math.isfinite(latitude) and -90.0 <= latitude <= 90.0):
        raise ValidationError(f"latitude {latitude} outside [-90, 90]")
    if not (math.isfinite(longitude) and -180.0 <= longitude <= 180.0):
        raise ValidationError(f"longitude {longitude} outside [-180, 180]")


def resolve_continent(latitude: float, longitude: float, geo_table: GeoTable | None = None) -> Continent:
    """Continent whose polygon contains the point.

    Points inside no polygon fall back to the continent owning the nearest
    vertex by great-circle distance; ties go to the earlier vertex in file
    order.
    """
    check_coordinates(latitude, longitude)
    table = geo_table or default_geo_table()
    for cont, ring in table.rings:
        if point_in_ring(longitude, latitude, ring):
            return cont
    best, best_d = None, math.inf
    for cont, ring in table.rings:
        d = _haversine(longitude, latitude, ring[:, 0], ring[:, 1])
        i = int(np.argmin(d))
        if d[i] < best_d:
            best, best_d = cont, float(d[i])
    return best
