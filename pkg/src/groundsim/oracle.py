"""Per-lane dynamics estimates from a prompt protocol.

A prompt is the task text, one context sentence (weather, road type, vehicle
count) and an output-format block. Responses are parsed back into a
:class:`DynamicsEstimate`. Three backends answer prompts: a deterministic rule
table (default, offline), a replay file of recorded responses, and a remote
chat-completion endpoint.
"""
from __future__ import annotations

import csv
import json
import os
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .scenario import ConfigError, DomainContext, OracleParams, RoadType, Weather, builtin_profile

CREDENTIAL_ENV = "GROUNDSIM_LLM_KEY"
BUCKET_WIDTH = 5

TASK_TEXT = (
    "The indicators describing the traffic dynamics include the average acceleration (AC) of the vehicles "
    "(m/s²), the average deceleration (AD) (m/s²), the average emergency deceleration (AED) (m/s²) and the "
    "average startup delay (ADL) describing the average time needed for the waiting vehicles to start moving "
    "with the unit (s), and the above might vary based on weather or road type. Please assume the above "
    "indicators based on the traffic perceptive information below:"
)
OUTPUT_RESTRICTION = (
    "Please answer by replacing {value} in the format below:\n"
    "[average acceleration: {value}],\n"
    "[average deceleration: {value}],\n"
    "[average emergency deceleration: {value}],\n"
    "[average startup delay: {value}]."
)

_ROAD_PHRASE = {
    RoadType.NORMAL: "normal road",
    RoadType.LIGHT_INDUSTRY: "light industry road",
    RoadType.HEAVY_INDUSTRY: "heavy industry truck road",
}

FIELDS = (
    ("ac", "average acceleration"),
    ("ad", "average deceleration"),
    ("aed", "average emergency deceleration"),
    ("adl", "average startup delay"),
)


class OracleError(RuntimeError):
    """Backend failure (transport, status, exhausted retries)."""


class ResponseParseError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class EstimateRejected(ValueError):
    pass


@dataclass(frozen=True)
class DynamicsEstimate:
    ac: float
    ad: float
    aed: float
    adl: float

    def validate(self) -> "DynamicsEstimate":
        values = self.as_tuple()
        if any(v != v or v < 0 for v in values):
            raise EstimateRejected(f"estimate has negative or NaN fields: {values}")
        if self.aed < self.ad:
            raise EstimateRejected(f"emergency deceleration {self.aed} below deceleration {self.ad}")
        return self

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.ac, self.ad, self.aed, self.adl)


@dataclass(frozen=True)
class PromptContext:
    context: DomainContext
    vehicle_count: int
    lane: int = 0

    def __post_init__(self):
        if self.vehicle_count < 0:
            raise ValueError("vehicle_count must be >= 0")


def context_sentence(ctx: DomainContext, vehicle_count: int) -> str:
    road = _ROAD_PHRASE[ctx.road_type]
    if ctx.road_type is RoadType.HEAVY_INDUSTRY:
        return f"In {ctx.weather.value} day, on a {road}, {vehicle_count} vehicles"
    return f"In {ctx.weather.value} day, on a {road} with {vehicle_count} vehicles"


def build_prompt(ctx: PromptContext) -> str:
    return f"{TASK_TEXT}\n{context_sentence(ctx.context, ctx.vehicle_count)}.\n{OUTPUT_RESTRICTION}"


_NUMBER = r"([-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?)"


def _field_pattern(label: str) -> re.Pattern:
    words = r"\s+".join(label.split())
    return re.compile(r"\[\s*" + words + r"\s*(?:\([^)]*\))?\s*:\s*(.*?)\]", re.IGNORECASE | re.DOTALL)


_PATTERNS = {key: _field_pattern(label) for key, label in FIELDS}


def parse_response(text: str) -> DynamicsEstimate:
    """Extract the four bracketed fields; prose, spacing and units are tolerated."""
    values = {}
    for key, label in FIELDS:
        m = _PATTERNS[key].search(text)
        if m is None:
            raise ResponseParseError(label, "field missing from response")
        num = re.match(r"\s*" + _NUMBER, m.group(1))
        if num is None:
            raise ResponseParseError(label, f"non-numeric value {m.group(1).strip()!r}")
        values[key] = float(num.group(1))
    return DynamicsEstimate(**values)


def format_response(est: DynamicsEstimate) -> str:
    return ",\n".join(f"[{label}: {float(getattr(est, key))!r}]" for key, label in FIELDS) + "."


# --- rule table ---------------------------------------------------------------

RuleTable = dict[tuple[Weather, RoadType], DynamicsEstimate]


def _estimate(name: str) -> DynamicsEstimate:
    return DynamicsEstimate(*builtin_profile(name).as_tuple())


def default_rule_table() -> RuleTable:
    """Rows for all weather/road pairs.

    The five pairs that name a built-in setting use that row verbatim. The
    rest combine their weather row (sunny V0, rainy V3, snowy V4) with their
    road row (normal V0, light industry V1, heavy industry V2) by taking the
    lower accelerations and decelerations and the longer startup delay.
    """
    weather_row = {Weather.SUNNY: _estimate("V0"), Weather.RAINY: _estimate("V3"), Weather.SNOWY: _estimate("V4")}
    road_row = {RoadType.NORMAL: _estimate("V0"), RoadType.LIGHT_INDUSTRY: _estimate("V1"),
                RoadType.HEAVY_INDUSTRY: _estimate("V2")}
    table = {}
    for w, wr in weather_row.items():
        for r, rr in road_row.items():
            table[(w, r)] = DynamicsEstimate(min(wr.ac, rr.ac), min(wr.ad, rr.ad), min(wr.aed, rr.aed),
                                             max(wr.adl, rr.adl))
    return table


def load_rule_table(path: str | Path) -> RuleTable:
    """Read ``weather,road,ac,ad,aed,adl`` rows; every weather/road pair must be present."""
    table = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 6:
                raise ConfigError("oracle.table", f"line {lineno}: expected 6 fields")
            try:
                key = (Weather(row[0].strip()), RoadType(row[1].strip()))
                table[key] = DynamicsEstimate(*(float(v) for v in row[2:])).validate()
            except (ValueError, EstimateRejected) as err:
                raise ConfigError("oracle.table", f"line {lineno}: {err}") from None
    missing = [(w.value, r.value) for w in Weather for r in RoadType if (w, r) not in table]
    if missing:
        raise ConfigError("oracle.table", f"missing rows for {missing}")
    return table


def write_rule_table(table: RuleTable, path: str | Path) -> None:
    lines = [f"{w.value},{r.value},{e.ac!r},{e.ad!r},{e.aed!r},{e.adl!r}"
             for (w, r), e in sorted(table.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value))]
    Path(path).write_text("\n".join(lines) + "\n")


def rule_estimate(table: RuleTable, ctx: PromptContext) -> DynamicsEstimate:
    """Table row adjusted for congestion: acceleration shrinks and startup delay grows with N."""
    base = table[(ctx.context.weather, ctx.context.road_type)]
    n = ctx.vehicle_count
    return DynamicsEstimate(base.ac * max(0.5, 1.0 - 0.02 * n), base.ad, base.aed, base.adl + 0.01 * n)


# --- backends -------------------------------------------------------------------

class RuleBackend:
    kind = "rule"

    def __init__(self, table: RuleTable | None = None):
        self.table = table if table is not None else default_rule_table()
        self.calls = 0

    def __call__(self, ctx: PromptContext) -> DynamicsEstimate:
        self.calls += 1
        return rule_estimate(self.table, ctx)


def _key(ctx: PromptContext) -> tuple[str, str, int]:
    return (ctx.context.weather.value, ctx.context.road_type.value, ctx.vehicle_count // BUCKET_WIDTH)


class ReplayBackend:
    """Recorded responses, one JSON object per line:
    ``{"weather": .., "road_type": .., "bucket": .., "response": ..}``."""

    kind = "replay"

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.responses: dict[tuple[str, str, int], str] = {}
        for lineno, line in enumerate(self.path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                self.responses[(rec["weather"], rec["road_type"], int(rec["bucket"]))] = rec["response"]
            except (ValueError, KeyError) as err:
                raise ConfigError("oracle.replay", f"line {lineno}: {err}") from None
        self.calls = 0

    def __call__(self, ctx: PromptContext) -> DynamicsEstimate:
        self.calls += 1
        key = _key(ctx)
        if key not in self.responses:
            raise OracleError(f"no recorded response for {key}")
        return parse_response(self.responses[key])


def write_replay(records: dict[tuple[str, str, int], str], path: str | Path) -> None:
    lines = [json.dumps({"weather": w, "road_type": r, "bucket": b, "response": text}, sort_keys=True)
             for (w, r, b), text in sorted(records.items())]
    Path(path).write_text("\n".join(lines) + "\n")


class RemoteBackend:
    """Chat-completion endpoint. See ``docs/oracle.md`` for the wire format.

    The credential is read from ``GROUNDSIM_LLM_KEY`` at construction so a
    missing key fails before any traffic is simulated.
    """

    kind = "remote"

    def __init__(self, endpoint: str, model: str = "gpt-4", timeout: float = 30.0, attempts: int = 3,
                 backoff: float = 1.0, api_key: str | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        if not endpoint:
            raise ConfigError("oracle.endpoint", "remote backend needs an endpoint URL")
        key = api_key if api_key is not None else os.environ.get(CREDENTIAL_ENV)
        if not key:
            raise ConfigError(CREDENTIAL_ENV, "credential environment variable is not set")
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self._key = key
        self._sleep = sleep
        self.calls = 0
        self.requests = 0

    def request_body(self, prompt: str) -> bytes:
        body = {"model": self.model, "temperature": 0, "messages": [{"role": "user", "content": prompt}]}
        return json.dumps(body).encode("utf-8")

    def complete(self, prompt: str) -> str:
        """Send one prompt; retry transient failures with exponential backoff."""
        data = self.request_body(prompt)
        errors = []
        for attempt in range(self.attempts):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            self.requests += 1
            req = urllib.request.Request(self.endpoint, data=data, method="POST", headers={
                "Content-Type": "application/json", "Authorization": f"Bearer {self._key}"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                return payload["choices"][0]["message"]["content"]
            except urllib.error.HTTPError as err:
                errors.append(f"HTTP {err.code}")
                if err.code < 500 and err.code != 429:
                    break
            except (urllib.error.URLError, TimeoutError, OSError) as err:
                errors.append(f"transport: {err}")
            except (ValueError, KeyError, IndexError, TypeError) as err:
                errors.append(f"malformed response: {err!r}")
                break
        raise OracleError(f"remote backend failed after {len(errors)} attempt(s): {'; '.join(errors)}")

    def __call__(self, ctx: PromptContext) -> DynamicsEstimate:
        self.calls += 1
        return parse_response(self.complete(build_prompt(ctx)))


def make_backend(params: OracleParams, base_dir: str | Path | None = None):
    def resolve(p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() or base_dir is None else Path(base_dir) / path

    if params.backend == "rule":
        return RuleBackend(load_rule_table(resolve(params.table)) if params.table else None)
    if params.backend == "replay":
        if not params.replay:
            raise ConfigError("oracle.replay", "replay backend needs a replay file")
        return ReplayBackend(resolve(params.replay))
    if params.backend == "remote":
        return RemoteBackend(params.endpoint, params.model, params.timeout)
    raise ConfigError("oracle.backend", f"unknown backend {params.backend!r}")


# --- cache + query ------------------------------------------------------------------

class DynamicsOracle:
    """Cached front end over a backend.

    Keys are ``(weather, road_type, vehicle_count // 5)``. A miss asks the
    backend with the bucket's lowest count, so an entry does not depend on
    which count first touched it. Concurrent callers share one in-flight
    backend call per key.
    """

    def __init__(self, backend, cache_path: str | Path | None = None):
        self.backend = backend
        self.cache_path = Path(cache_path) if cache_path else None
        self._cache: dict[tuple[str, str, int], DynamicsEstimate] = {}
        self._lock = threading.Lock()
        self._inflight: dict[tuple[str, str, int], threading.Event] = {}
        self.calls = 0
        if self.cache_path is not None and self.cache_path.exists():
            self._cache = load_cache(self.cache_path)

    @property
    def cache(self) -> dict:
        with self._lock:
            return dict(self._cache)

    def query(self, ctx: PromptContext) -> DynamicsEstimate:
        key = _key(ctx)
        while True:
            with self._lock:
                if key in self._cache:
                    return self._cache[key]
                event = self._inflight.get(key)
                if event is None:
                    event = threading.Event()
                    self._inflight[key] = event
                    owner = True
                else:
                    owner = False
            if not owner:
                event.wait()
                continue
            try:
                rep = PromptContext(ctx.context, key[2] * BUCKET_WIDTH, ctx.lane)
                self.calls += 1
                est = self.backend(rep).validate()
                with self._lock:
                    self._cache[key] = est
                    if self.cache_path is not None:
                        save_cache(self._cache, self.cache_path)
                return est
            finally:
                with self._lock:
                    self._inflight.pop(key, None)
                event.set()

    def lane_estimates(self, context: DomainContext, lane_counts) -> list[DynamicsEstimate]:
        return [self.query(PromptContext(context, int(n), lane)) for lane, n in enumerate(lane_counts)]


def save_cache(cache: dict, path: str | Path) -> None:
    rows = [{"weather": w, "road_type": r, "bucket": b, "estimate": list(e.as_tuple())}
            for (w, r, b), e in sorted(cache.items())]
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(rows, indent=1) + "\n")
    tmp.replace(path)


def load_cache(path: str | Path) -> dict:
    rows = json.loads(Path(path).read_text())
    return {(row["weather"], row["road_type"], int(row["bucket"])): DynamicsEstimate(*row["estimate"])
            for row in rows}
