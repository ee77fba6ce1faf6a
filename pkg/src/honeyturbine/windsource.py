"""Base wind speed: recorded profile replay or a live forecast query, plus noise."""

from __future__ import annotations

import bisect
import json
import logging
import math
import queue
import threading
import time
import urllib.parse
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_SIGMA = 0.5
DEFAULT_ALTITUDE = 50.0


@dataclass(frozen=True)
class WindSample:
    v_wind: float
    timestamp: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.v_wind) and self.v_wind >= 0):
            raise ValueError(f"invalid wind sample {self.v_wind!r}")


@dataclass(frozen=True)
class GeoPoint:
    latitude: float
    longitude: float

    def __post_init__(self):
        if not -90 <= self.latitude <= 90:
            raise ValueError(f"latitude out of range: {self.latitude}")
        if not -180 <= self.longitude <= 180:
            raise ValueError(f"longitude out of range: {self.longitude}")


class ProfileError(ValueError):
    pass


class WindProfile:
    """Piecewise-linear wind profile; holds the last value past the end."""

    def __init__(self, samples):
        samples = sorted(samples, key=lambda s: s.timestamp)
        if not samples:
            raise ProfileError("wind profile is empty")
        self.samples = samples
        self._times = [s.timestamp for s in samples]
        self._cursor = 0.0

    @classmethod
    def load(cls, path) -> "WindProfile":
        """Read ``timestamp_seconds,speed_mps`` lines; a header line is allowed."""
        samples = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            try:
                t, v = float(parts[0]), float(parts[1])
            except (ValueError, IndexError):
                if lineno == 1 or not samples:
                    continue  # header
                raise ProfileError(f"{path}:{lineno}: bad record {line!r}")
            try:
                samples.append(WindSample(v, t))
            except ValueError as exc:
                raise ProfileError(f"{path}:{lineno}: {exc}") from None
        return cls(samples)

    @classmethod
    def constant(cls, v_wind: float) -> "WindProfile":
        return cls([WindSample(v_wind, 0.0)])

    def at(self, t: float) -> float:
        times = self._times
        if t <= times[0]:
            return self.samples[0].v_wind
        if t >= times[-1]:
            return self.samples[-1].v_wind
        i = bisect.bisect_right(times, t)
        a, b = self.samples[i - 1], self.samples[i]
        span = b.timestamp - a.timestamp
        if span <= 0:
            return b.v_wind
        return a.v_wind + (b.v_wind - a.v_wind) * (t - a.timestamp) / span

    def replay_next(self, t: float | None = None) -> WindSample:
        """Sample at ``t`` (or continue from the last call, one second on)."""
        if t is None:
            t = self._cursor
        self._cursor = t + 1.0
        return WindSample(self.at(t), t)


def perturb(base: float, rng: np.random.Generator, sigma: float = DEFAULT_SIGMA, timestamp: float = 0.0) -> WindSample:
    if base < 0:
        raise ValueError("base wind must be non-negative")
    eps = rng.normal(0.0, sigma) if sigma > 0 else 0.0
    return WindSample(max(0.0, base + eps), timestamp)


def extract_field(document, path: str) -> float:
    """Walk a dotted path (``a.b.0.c``) through decoded JSON."""
    node = document
    for part in path.split("."):
        if isinstance(node, list):
            node = node[int(part)]
        else:
            node = node[part]
    value = float(node)
    if not math.isfinite(value) or value < 0:
        raise ValueError(f"unusable wind value {node!r}")
    return value


class LiveWindSource:
    """Forecast-service wind with a cache, fed by a background fetcher.

    `base` never blocks: it hands out the newest completed fetch, the cached
    value, or the replay fallback, and schedules a new fetch when one is due.
    """

    def __init__(self, point: GeoPoint, endpoint: str, field_path: str, fallback: WindProfile,
                 events=None, fetch_period: float = 60.0, altitude: float = DEFAULT_ALTITUDE,
                 timeout: float = 5.0, extra_params: dict | None = None):
        self.point = point
        self.endpoint = endpoint
        self.field_path = field_path
        self.fallback = fallback
        self.events = events
        self.fetch_period = fetch_period
        self.altitude = altitude
        self.timeout = timeout
        self.extra_params = dict(extra_params or {})
        self.cached: float | None = None
        self.cached_at: float | None = None
        self._results: queue.SimpleQueue = queue.SimpleQueue()
        self._inflight = False
        self._next_fetch = 0.0

    def request_url(self) -> str:
        params = {
            "latitude": self.point.latitude,
            "longitude": self.point.longitude,
            "altitude": self.altitude,
            **self.extra_params,
        }
        sep = "&" if "?" in self.endpoint else "?"
        return self.endpoint + sep + urllib.parse.urlencode(params)

    def _fetch(self) -> float:
        with urllib.request.urlopen(self.request_url(), timeout=self.timeout) as resp:
            body = json.loads(resp.read().decode("utf-8"))
        return extract_field(body, self.field_path)

    def fetch_base_wind(self, sim_time: float = 0.0) -> float:
        """Blocking fetch.  Falls back to cache, then to the replay profile."""
        try:
            value = self._fetch()
        except Exception as exc:  # network, HTTP, JSON and schema errors alike
            return self._degraded(exc, sim_time)
        self.cached, self.cached_at = value, time.time()
        return value

    def _degraded(self, exc: Exception, sim_time: float) -> float:
        if self.cached is not None:
            value, fallback = self.cached, "cache"
        else:
            value, fallback = self.fallback.at(sim_time), "replay"
        logger.warning("wind fetch failed (%s), using %s", exc, fallback)
        if self.events is not None:
            self.events.emit("windsource", "wind_degraded", severity="warning",
                             error=str(exc)[:200], fallback=fallback, value=value)
        return value

    def _worker(self) -> None:
        try:
            self._results.put((True, self._fetch()))
        except Exception as exc:
            self._results.put((False, exc))

    def base(self, sim_time: float) -> float:
        while True:
            try:
                ok, result = self._results.get_nowait()
            except queue.Empty:
                break
            self._inflight = False
            if ok:
                self.cached, self.cached_at = result, time.time()
            else:
                self._degraded(result, sim_time)
        if not self._inflight and sim_time >= self._next_fetch:
            self._inflight = True
            self._next_fetch = sim_time + self.fetch_period
            threading.Thread(target=self._worker, daemon=True).start()
        if self.cached is not None:
            return self.cached
        return self.fallback.at(sim_time)


class ReplayWindSource:
    def __init__(self, profile: WindProfile):
        self.profile = profile

    def base(self, sim_time: float) -> float:
        return self.profile.at(sim_time)


class PerturbedWind:
    """Adds seeded Gaussian noise on top of a base source."""

    def __init__(self, source, seed: int, sigma: float = DEFAULT_SIGMA):
        self.source = source
        self.sigma = sigma
        self.rng = np.random.default_rng(seed)

    def sample(self, sim_time: float) -> WindSample:
        return perturb(self.source.base(sim_time), self.rng, self.sigma, sim_time)
