"""Resolve location coordinates into address, POI and street-view context.

Three upstreams are consulted (a Nominatim-compatible reverse geocoder, an
Overpass-compatible POI endpoint, and a street-view metadata endpoint), each
behind a disk cache keyed by coordinates rounded to 5 decimal places (~1 m).
With ``offline=True`` no network is ever touched: cache hits are served and
misses raise :class:`OfflineMissError`. Live geocoder calls are spaced at
least one second apart to respect public-service usage policies.

POI caches store raw entries (name, category, coordinates); distance,
radius filtering and the result limit are applied on read so configuration
changes take effect on a warm cache.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping

from .domain import LocationSample, PoiEntry
from .errors import EnrichmentError, OfflineMissError, UpstreamUnavailableError

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6371000.0

DEFAULT_GEOCODER_URL = "https://nominatim.openstreetmap.org/reverse"
DEFAULT_OVERPASS_URL = "https://overpass-api.de/api/interpreter"
DEFAULT_STREETVIEW_URL = "https://maps.googleapis.com/maps/api/streetview/metadata"
USER_AGENT = "urbanmas/0.1 (research pipeline)"

# Tag keys inspected, in order, to derive a POI category label.
_CATEGORY_TAGS = (
    "amenity", "shop", "leisure", "tourism", "natural", "railway",
    "highway", "office", "building", "landuse",
)


def haversine_m(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance between two points, in meters."""
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = math.radians(lat2 - lat1)
    dlambda = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlambda / 2) ** 2
    return EARTH_RADIUS_M * 2 * math.atan2(math.sqrt(a), math.sqrt(1 - a))


@dataclass(frozen=True)
class IngestConfig:
    """Parameters for context ingestion."""

    cache_dir: Path
    poi_radius_m: float = 300.0
    poi_limit: int = 25
    offline: bool = False
    geocoder_url: str = DEFAULT_GEOCODER_URL
    overpass_url: str = DEFAULT_OVERPASS_URL
    streetview_url: str = DEFAULT_STREETVIEW_URL
    streetview_api_key: str = ""
    min_request_interval_s: float = 1.0

    def __post_init__(self) -> None:
        if self.poi_radius_m <= 0:
            raise ValueError("poi_radius_m must be positive")
        if self.poi_limit <= 0:
            raise ValueError("poi_limit must be positive")
        object.__setattr__(self, "cache_dir", Path(self.cache_dir))


HttpGet = Callable[[str, Mapping[str, object]], tuple[int, str]]


def _requests_get(url: str, params: Mapping[str, object]) -> tuple[int, str]:
    import requests

    resp = requests.get(url, params=dict(params), headers={"User-Agent": USER_AGENT}, timeout=30)
    return resp.status_code, resp.text


def _coord_key(lat: float, lon: float) -> str:
    return f"{lat:.5f}_{lon:.5f}"


class GeoClient:
    """Cached, offline-capable client for the three geo upstreams.

    ``http_get`` is injectable so tests can prove that offline mode makes
    zero network attempts. Counters track cache hits, misses and live
    calls for the ingest summary.
    """

    def __init__(self, config: IngestConfig, http_get: HttpGet = _requests_get):
        self.config = config
        self._http_get = http_get
        self._throttle_lock = threading.Lock()
        self._last_request = 0.0
        self._stats_lock = threading.Lock()
        self.cache_hits = 0
        self.cache_misses = 0
        self.network_calls = 0

    # -- cache plumbing ----------------------------------------------------

    def _cache_path(self, kind: str, lat: float, lon: float) -> Path:
        return self.config.cache_dir / f"{kind}_{_coord_key(lat, lon)}.json"

    def _cache_read(self, kind: str, lat: float, lon: float) -> dict | None:
        path = self._cache_path(kind, lat, lon)
        if not path.exists():
            with self._stats_lock:
                self.cache_misses += 1
            return None
        with self._stats_lock:
            self.cache_hits += 1
        return json.loads(path.read_text(encoding="utf-8"))

    def _cache_write(self, kind: str, lat: float, lon: float, data: dict) -> None:
        self.config.cache_dir.mkdir(parents=True, exist_ok=True)
        path = self._cache_path(kind, lat, lon)
        path.write_text(json.dumps(data, ensure_ascii=False, indent=1), encoding="utf-8")

    def _fetch(self, url: str, params: Mapping[str, object]) -> str:
        """Rate-limited GET against an upstream; exceptions become upstream errors."""
        with self._throttle_lock:
            wait = self.config.min_request_interval_s - (time.monotonic() - self._last_request)
            if wait > 0:
                time.sleep(wait)
            self._last_request = time.monotonic()
            with self._stats_lock:
                self.network_calls += 1
        try:
            status, body = self._http_get(url, params)
        except Exception as exc:
            raise UpstreamUnavailableError(f"{url}: {exc}") from exc
        if status != 200:
            raise UpstreamUnavailableError(f"{url}: HTTP {status}")
        return body

    # -- operations ----------------------------------------------------------

    def reverse_geocode(self, lat: float, lon: float) -> str:
        """Resolve coordinates to a human-readable address string."""
        cached = self._cache_read("reverse", lat, lon)
        if cached is not None:
            return cached["address"]
        if self.config.offline:
            raise OfflineMissError(f"no cached address for {_coord_key(lat, lon)}")
        body = self._fetch(
            self.config.geocoder_url,
            {"lat": lat, "lon": lon, "format": "jsonv2"},
        )
        try:
            address = json.loads(body)["display_name"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise UpstreamUnavailableError(f"geocoder returned unusable body: {exc}") from exc
        self._cache_write("reverse", lat, lon, {"address": address})
        return address

    def nearby_pois(self, lat: float, lon: float) -> list[PoiEntry]:
        """Named POIs within the configured radius, closest first."""
        cached = self._cache_read("pois", lat, lon)
        if cached is not None:
            raw = cached["elements"]
        elif self.config.offline:
            raise OfflineMissError(f"no cached POIs for {_coord_key(lat, lon)}")
        else:
            query = (
                f"[out:json][timeout:25];"
                f'node(around:{self.config.poi_radius_m:.0f},{lat},{lon})["name"];'
                f"out qt;"
            )
            body = self._fetch(self.config.overpass_url, {"data": query})
            try:
                elements = json.loads(body)["elements"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise UpstreamUnavailableError(f"POI endpoint returned unusable body: {exc}") from exc
            raw = [
                {
                    "name": el.get("tags", {}).get("name", ""),
                    "category": _category(el.get("tags", {})),
                    "lat": el.get("lat"),
                    "lon": el.get("lon"),
                }
                for el in elements
                if el.get("lat") is not None and el.get("lon") is not None
            ]
            self._cache_write("pois", lat, lon, {"elements": raw})

        pois = []
        for entry in raw:
            if not entry.get("name"):
                continue
            distance = haversine_m(lat, lon, float(entry["lat"]), float(entry["lon"]))
            if distance <= self.config.poi_radius_m:
                pois.append(
                    PoiEntry(
                        name=entry["name"],
                        category=entry.get("category") or "poi",
                        distance_m=distance,
                    )
                )
        pois.sort(key=lambda p: (p.distance_m, p.name))
        return pois[: self.config.poi_limit]

    def streetview_refs(self, lat: float, lon: float) -> list[str]:
        """Stable street-view image references; an empty list is valid."""
        cached = self._cache_read("streetview", lat, lon)
        if cached is not None:
            return list(cached["refs"])
        if self.config.offline:
            # No coverage recorded is not an error: imagery is optional downstream.
            return []
        body = self._fetch(
            self.config.streetview_url,
            {
                "location": f"{lat},{lon}",
                "key": self.config.streetview_api_key,
            },
        )
        try:
            meta = json.loads(body)
        except json.JSONDecodeError as exc:
            raise UpstreamUnavailableError(f"street-view endpoint returned unusable body: {exc}") from exc
        refs: list[str] = []
        if meta.get("status") == "OK":
            pano = meta.get("pano_id", "")
            base = self.config.streetview_url.rsplit("/", 1)[0]
            refs.append(f"{base}?pano={pano}&size=640x640&key={self.config.streetview_api_key}")
        self._cache_write("streetview", lat, lon, {"refs": refs})
        return refs

    def enrich(self, sample: LocationSample) -> LocationSample:
        """Populate address, POIs and street-view refs on a copy of the sample.

        Already-populated context is kept, which makes enrichment
        idempotent. A single failing upstream degrades to a warning and an
        empty field; the call fails only when every upstream failed and
        nothing could be populated.
        """
        failures: list[str] = []

        address = sample.address
        if address is None:
            try:
                address = self.reverse_geocode(sample.latitude, sample.longitude)
            except (UpstreamUnavailableError, OfflineMissError) as exc:
                failures.append(f"geocoder: {exc}")
                logger.warning("enrich %s: address unavailable (%s)", sample.id, exc)

        pois = sample.pois
        if not pois:
            try:
                pois = tuple(self.nearby_pois(sample.latitude, sample.longitude))
            except (UpstreamUnavailableError, OfflineMissError) as exc:
                failures.append(f"pois: {exc}")
                logger.warning("enrich %s: POIs unavailable (%s)", sample.id, exc)

        refs = sample.streetview_refs
        if not refs:
            try:
                refs = tuple(self.streetview_refs(sample.latitude, sample.longitude))
            except (UpstreamUnavailableError, OfflineMissError) as exc:
                failures.append(f"streetview: {exc}")
                logger.warning("enrich %s: street-view unavailable (%s)", sample.id, exc)

        if len(failures) == 3:
            raise EnrichmentError(f"all upstreams failed for {sample.id}: {'; '.join(failures)}")
        return replace(sample, address=address, pois=pois, streetview_refs=refs)


def _category(tags: Mapping[str, str]) -> str:
    for key in _CATEGORY_TAGS:
        if key in tags:
            return f"{key}:{tags[key]}"
    return "poi"
