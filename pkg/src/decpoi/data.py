"""Check-in datasets: ingestion, sparsity filtering, leave-one-out split,
weekly time discretization and the synthetic generator used at desk scale.

File formats:
  check-ins  CSV, header ``user_id,poi_id,timestamp`` (integer seconds, UTC)
  catalog    CSV, header ``poi_id,lat,lon,category_id``

Timestamps are UTC and the week origin is Monday 00:00.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, EmptyDatasetError, ParseError, ReferentialError, SplitError
from .geo import KM_PER_DEG_LAT, KM_PER_DEG_LON_EQ, haversine_km

SECONDS_PER_WEEK = 7 * 24 * 3600
SEQUENCE_CAP = 200

CHECKIN_HEADER = ["user_id", "poi_id", "timestamp"]
CATALOG_HEADER = ["poi_id", "lat", "lon", "category_id"]


@dataclass(frozen=True)
class Poi:
    id: str
    lon: float
    lat: float
    category: str

    def __post_init__(self):
        if not -180.0 <= self.lon <= 180.0:
            raise ConfigError(f"longitude out of range for POI {self.id}: {self.lon}")
        if not -90.0 <= self.lat <= 90.0:
            raise ConfigError(f"latitude out of range for POI {self.id}: {self.lat}")


@dataclass(frozen=True)
class CheckIn:
    user: str
    poi: str
    timestamp: int

    def __post_init__(self):
        if self.timestamp < 0:
            raise ConfigError(f"negative timestamp for user {self.user}")


@dataclass(frozen=True)
class Trajectory:
    """A user's time-ordered visit sequence; the only per-device raw data."""

    user: str
    checkins: tuple[CheckIn, ...]

    def __post_init__(self):
        if len(self.checkins) < 1:
            raise ConfigError(f"empty trajectory for user {self.user}")
        times = [c.timestamp for c in self.checkins]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ConfigError(f"timestamps not sorted for user {self.user}")

    def __len__(self):
        return len(self.checkins)

    def recent(self, cap: int = SEQUENCE_CAP) -> "Trajectory":
        """Most recent `cap` check-ins (modeling view of long histories)."""
        if len(self.checkins) <= cap:
            return self
        return Trajectory(self.user, self.checkins[-cap:])

    def poi_ids(self) -> list[str]:
        return [c.poi for c in self.checkins]


class PoiCatalog:
    """Public POI metadata: coordinates and category, index-addressable."""

    def __init__(self, pois: list[Poi]):
        if not pois:
            raise EmptyDatasetError("catalog has no POIs")
        self.pois = list(pois)
        self._index = {p.id: i for i, p in enumerate(self.pois)}
        if len(self._index) != len(self.pois):
            raise ConfigError("duplicate POI ids in catalog")
        self.coords = np.array([[p.lon, p.lat] for p in self.pois], dtype=float)
        self.categories = sorted({p.category for p in self.pois})
        self._cat_index = {c: i for i, c in enumerate(self.categories)}
        self.poi_categories = np.array([self._cat_index[p.category] for p in self.pois])

    def __len__(self):
        return len(self.pois)

    def __contains__(self, poi_id):
        return poi_id in self._index

    def index(self, poi_id: str) -> int:
        return self._index[poi_id]

    def poi(self, poi_id: str) -> Poi:
        return self.pois[self._index[poi_id]]

    def category_index(self, category: str) -> int:
        return self._cat_index[category]

    @property
    def n_categories(self):
        return len(self.categories)


@dataclass
class Dataset:
    catalog: PoiCatalog
    trajectories: dict[str, Trajectory]

    def __post_init__(self):
        for user, traj in self.trajectories.items():
            for c in traj.checkins:
                if c.poi not in self.catalog:
                    raise ReferentialError(
                        f"user {user} checked in at unknown POI {c.poi}")

    @property
    def n_users(self):
        return len(self.trajectories)

    @property
    def n_pois(self):
        return len(self.catalog)

    @property
    def n_categories(self):
        return self.catalog.n_categories

    def users(self) -> list[str]:
        return sorted(self.trajectories)


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def _read_rows(path, expected_header):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if [h.strip() for h in header] != expected_header:
            raise ParseError(f"{path}:1: expected header {','.join(expected_header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(expected_header):
                raise ParseError(f"{path}:{lineno}: expected {len(expected_header)} fields")
            yield lineno, [f.strip() for f in row]


def load_catalog(poi_file) -> PoiCatalog:
    pois = []
    for lineno, (poi_id, lat, lon, cat) in _read_rows(poi_file, CATALOG_HEADER):
        try:
            pois.append(Poi(poi_id, float(lon), float(lat), cat))
        except ValueError as exc:
            raise ParseError(f"{poi_file}:{lineno}: {exc}") from None
    return PoiCatalog(pois)


def load_checkins(checkin_file, poi_file) -> Dataset:
    """Parse both CSVs into a Dataset; trajectories sorted by timestamp."""
    catalog = load_catalog(poi_file)
    per_user: dict[str, list[CheckIn]] = {}
    for lineno, (user, poi, ts) in _read_rows(checkin_file, CHECKIN_HEADER):
        try:
            checkin = CheckIn(user, poi, int(ts))
        except (ValueError, ConfigError) as exc:
            raise ParseError(f"{checkin_file}:{lineno}: {exc}") from None
        if poi not in catalog:
            raise ReferentialError(
                f"{checkin_file}:{lineno}: POI {poi} not in catalog")
        per_user.setdefault(user, []).append(checkin)
    if not per_user:
        raise EmptyDatasetError(f"{checkin_file}: no check-ins")
    trajectories = {
        user: Trajectory(user, tuple(sorted(cs, key=lambda c: c.timestamp)))
        for user, cs in per_user.items()
    }
    return Dataset(catalog, trajectories)


def save_dataset(dataset: Dataset, checkin_file, poi_file):
    with open(poi_file, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CATALOG_HEADER)
        for p in dataset.catalog.pois:
            writer.writerow([p.id, repr(p.lat), repr(p.lon), p.category])
    with open(checkin_file, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CHECKIN_HEADER)
        for user in dataset.users():
            for c in dataset.trajectories[user].checkins:
                writer.writerow([c.user, c.poi, c.timestamp])


# ---------------------------------------------------------------------------
# Filtering and splitting
# ---------------------------------------------------------------------------

def filter_sparse(dataset: Dataset, min_user_checkins: int, min_poi_visits: int) -> Dataset:
    """Iterate removal of sparse users and POIs to a fixed point.

    A user needs >= min_user_checkins surviving check-ins; a POI needs
    >= min_poi_visits visits from surviving users. The catalog shrinks to
    the surviving POIs.
    """
    if min_user_checkins < 1 or min_poi_visits < 1:
        raise ConfigError("filter thresholds must be >= 1")
    checkins = {u: list(t.checkins) for u, t in dataset.trajectories.items()}
    alive_pois = {p.id for p in dataset.catalog.pois}
    while True:
        checkins = {u: [c for c in cs if c.poi in alive_pois] for u, cs in checkins.items()}
        checkins = {u: cs for u, cs in checkins.items() if len(cs) >= min_user_checkins}
        visits: dict[str, int] = {}
        for cs in checkins.values():
            for c in cs:
                visits[c.poi] = visits.get(c.poi, 0) + 1
        surviving = {p for p in alive_pois if visits.get(p, 0) >= min_poi_visits}
        if surviving == alive_pois:
            break
        alive_pois = surviving
        if not alive_pois or not checkins:
            raise EmptyDatasetError("sparsity filter removed everything")
    if not checkins:
        raise EmptyDatasetError("sparsity filter removed everything")
    catalog = PoiCatalog([p for p in dataset.catalog.pois if p.id in alive_pois])
    trajectories = {u: Trajectory(u, tuple(cs)) for u, cs in checkins.items()}
    return Dataset(catalog, trajectories)


def split_leave_one_out(dataset: Dataset, cap: int = SEQUENCE_CAP):
    """Hold out each user's final check-in; earlier ones train.

    Trajectories are first capped to their most recent `cap` check-ins,
    so the held-out item is the last of the capped window.
    Returns (train Dataset, {user: held-out CheckIn}).
    """
    train: dict[str, Trajectory] = {}
    test: dict[str, CheckIn] = {}
    for user, traj in dataset.trajectories.items():
        capped = traj.recent(cap)
        if len(capped) < 2:
            raise SplitError(f"user {user}: trajectory too short to split")
        train[user] = Trajectory(user, capped.checkins[:-1])
        test[user] = capped.checkins[-1]
    return Dataset(dataset.catalog, train), test


def discretize_time(timestamp: int) -> int:
    """Weekly hour slot in [0, 167]: weekday*24 + hour, Monday 00:00 UTC = 0."""
    if timestamp < 0:
        raise ConfigError("timestamp must be >= 0")
    # Epoch day 0 (1970-01-01) was a Thursday, weekday index 3.
    weekday = (timestamp // 86400 + 3) % 7
    hour = (timestamp % 86400) // 3600
    return int(weekday * 24 + hour)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Knobs of the synthetic check-in generator.

    POIs sit inside `clusters` well-separated geographic clusters; each user
    sticks to one home cluster and draws categories from one of
    `category_profiles` preference profiles, so both geographical and
    semantic neighbor structure exist by construction.
    """

    users: int = 50
    pois: int = 300
    categories: int = 10
    clusters: int = 2
    checkins_per_user: int = 24
    cluster_radius_km: float = 5.0
    category_profiles: int = 5
    revisit_prob: float = 0.2
    seed: int = 0

    field_names = ("users", "pois", "categories", "clusters", "checkins_per_user",
                   "cluster_radius_km", "category_profiles", "revisit_prob", "seed")

    def validate(self):
        if self.users < 1 or self.pois < 1:
            raise ConfigError("synthetic config needs at least one user and one POI")
        if self.categories < 1 or self.clusters < 1 or self.category_profiles < 1:
            raise ConfigError("categories, clusters and profiles must be >= 1")
        if self.checkins_per_user < 1:
            raise ConfigError("checkins_per_user must be >= 1")


def _cluster_centers(n: int, rng: np.random.Generator) -> np.ndarray:
    """Widely separated (lon, lat) centers: spread longitudes, mild jitter."""
    lons = -150.0 + 300.0 * np.arange(n) / max(n - 1, 1) + rng.uniform(-3, 3, n)
    lats = rng.uniform(-40.0, 40.0, n)
    return np.column_stack([lons, lats])


def _offset_km(center, dist_km, bearing_rad):
    """Place a point approximately dist_km from center (small offsets only)."""
    lon, lat = center
    dlat = dist_km * np.cos(bearing_rad) / KM_PER_DEG_LAT
    dlon = dist_km * np.sin(bearing_rad) / (KM_PER_DEG_LON_EQ * np.cos(np.radians(lat)))
    return float(lon + dlon), float(lat + dlat)


def generate_synthetic(cfg: SynthConfig, seed: int | None = None) -> Dataset:
    """Deterministic synthetic dataset with planted neighbor structure."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)

    centers = _cluster_centers(cfg.clusters, rng)
    pois = []
    for i in range(cfg.pois):
        cluster = i % cfg.clusters
        # Keep offsets inside 90% of the radius so Haversine round-off never
        # pushes a POI past the nominal cluster radius.
        dist = cfg.cluster_radius_km * 0.9 * np.sqrt(rng.random())
        bearing = rng.uniform(0, 2 * np.pi)
        lon, lat = _offset_km(centers[cluster], dist, bearing)
        pois.append(Poi(f"p{i:04d}", lon, lat, f"c{i % cfg.categories:03d}"))
    catalog = PoiCatalog(pois)

    # Category preference profiles: each concentrates on two categories.
    profiles = np.full((cfg.category_profiles, cfg.categories), 0.1 / cfg.categories)
    for j in range(cfg.category_profiles):
        a = (2 * j) % cfg.categories
        b = (2 * j + 1) % cfg.categories
        profiles[j, a] += 0.45
        profiles[j, b] += 0.45
    profiles /= profiles.sum(axis=1, keepdims=True)

    by_cluster_cat: dict[tuple[int, int], list[int]] = {}
    by_cluster: dict[int, list[int]] = {}
    for i in range(cfg.pois):
        cluster = i % cfg.clusters
        cat = i % cfg.categories
        by_cluster_cat.setdefault((cluster, cat), []).append(i)
        by_cluster.setdefault(cluster, []).append(i)

    trajectories = {}
    for u in range(cfg.users):
        user = f"u{u:04d}"
        home = u % cfg.clusters
        profile = (u // cfg.clusters) % cfg.category_profiles
        t = int(rng.integers(0, SECONDS_PER_WEEK))
        visited: list[int] = []
        checkins = []
        for _ in range(cfg.checkins_per_user):
            if visited and rng.random() < cfg.revisit_prob:
                poi_idx = visited[int(rng.integers(len(visited)))]
            else:
                cat = int(rng.choice(cfg.categories, p=profiles[profile]))
                pool = by_cluster_cat.get((home, cat)) or by_cluster[home]
                poi_idx = int(pool[int(rng.integers(len(pool)))])
            visited.append(poi_idx)
            checkins.append(CheckIn(user, pois[poi_idx].id, t))
            t += int(rng.integers(1800, 12 * 3600))
        trajectories[user] = Trajectory(user, tuple(checkins))
    return Dataset(catalog, trajectories)
