"""Decoded ADS-B track logs, METAR wind groups and the weather join."""

from __future__ import annotations

import bisect
import calendar
import math
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Iterable, Sequence, TextIO

KT_TO_MS = 1852.0 / 3600.0

VARIABLE = "VARIABLE"
CALM = "CALM"

TRACK_COLUMNS = ("timestamp", "aircraft_id", "latitude", "longitude", "altitude_ft")


@dataclass(frozen=True)
class RawTrackRecord:
    timestamp: int
    aircraft_id: str
    latitude: float
    longitude: float
    altitude_msl: float  # feet


@dataclass(frozen=True)
class Diagnostic:
    source: str
    line: int
    message: str

    def __str__(self) -> str:
        return f"{self.source}:{self.line}: {self.message}"


class MetarError(ValueError):
    """A METAR body whose wind group (or header) cannot be decoded."""

    def __init__(self, message: str, token: str | None = None):
        super().__init__(message if token is None else f"{message}: {token!r}")
        self.token = token


@dataclass(frozen=True)
class MetarReport:
    station: str
    issue_time: int | None  # UTC epoch seconds; None without a date reference
    wind_dir_deg: int | str  # degrees true (FROM), or VARIABLE / CALM
    wind_speed_kt: int
    gust_kt: int | None
    raw_text: str

    @property
    def is_calm(self) -> bool:
        return self.wind_dir_deg == CALM

    @property
    def is_variable(self) -> bool:
        return self.wind_dir_deg == VARIABLE


@dataclass(frozen=True)
class WindContext:
    u_along: float  # m/s along the runway x-axis
    u_cross: float  # m/s along the y-axis
    variable_flag: bool = False


CALM_WIND = WindContext(0.0, 0.0, False)


# ----------------------------------------------------------------------
# track log


def _looks_like_header(fields: list[str]) -> bool:
    return fields[0].strip().lower() in {"timestamp", "time", "t"}


def _parse_coord(text: str) -> float:
    # empty location fields survive parsing as NaN so cleaning can count them
    text = text.strip()
    return float("nan") if text == "" else float(text)


def parse_track_log(
    stream: TextIO | Iterable[str], source: str = "<stream>"
) -> tuple[list[RawTrackRecord], list[Diagnostic]]:
    """Parse 5-column CSV track records: timestamp,id,lat,lon,alt_ft.

    Returns the well-formed records in input order plus one diagnostic per
    rejected line. A header line is allowed as the first non-blank line.
    """
    records: list[RawTrackRecord] = []
    diagnostics: list[Diagnostic] = []
    first = True
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(",")
        if first and _looks_like_header(fields):
            first = False
            continue
        first = False
        if len(fields) < len(TRACK_COLUMNS):
            diagnostics.append(Diagnostic(source, lineno, f"missing field ({len(fields)} of 5)"))
            continue
        if len(fields) > len(TRACK_COLUMNS):
            diagnostics.append(Diagnostic(source, lineno, f"extra field ({len(fields)} of 5)"))
            continue
        ts_text, ident, lat_text, lon_text, alt_text = (f.strip() for f in fields)
        if not ident:
            diagnostics.append(Diagnostic(source, lineno, "empty aircraft id"))
            continue
        try:
            timestamp = int(ts_text)
        except ValueError:
            diagnostics.append(Diagnostic(source, lineno, f"bad timestamp {ts_text!r}"))
            continue
        if timestamp <= 0:
            diagnostics.append(Diagnostic(source, lineno, f"non-positive timestamp {timestamp}"))
            continue
        try:
            lat = _parse_coord(lat_text)
            lon = _parse_coord(lon_text)
            alt = _parse_coord(alt_text)
        except ValueError:
            diagnostics.append(
                Diagnostic(source, lineno, f"bad number in {lat_text!r},{lon_text!r},{alt_text!r}")
            )
            continue
        records.append(RawTrackRecord(timestamp, ident, lat, lon, alt))
    return records, diagnostics


def format_track_record(rec: RawTrackRecord) -> str:
    return f"{rec.timestamp},{rec.aircraft_id},{rec.latitude!r},{rec.longitude!r},{rec.altitude_msl!r}"


# ----------------------------------------------------------------------
# METAR

_STATION_RE = re.compile(r"^[A-Z][A-Z0-9]{3}$")
_TIME_RE = re.compile(r"^(\d{2})(\d{2})(\d{2})Z$")
_WIND_RE = re.compile(r"^(?P<dir>\d{3}|VRB)(?P<speed>\d{2,3})(?:G(?P<gust>\d{2,3}))?KT$")
# anything shaped like a wind group, including malformed ones
_WINDISH_RE = re.compile(r"^(\d|VRB|/){3}.*(KT|MPS|KMH)$")


def _resolve_day_time(day: int, hour: int, minute: int, reference: int) -> int:
    """Epoch seconds of the ddhhmm instant closest to ``reference``."""
    ref = datetime.fromtimestamp(reference, tz=timezone.utc)
    candidates = []
    for dm in (-1, 0, 1):
        month = ref.month + dm
        year = ref.year + (month - 1) // 12
        month = (month - 1) % 12 + 1
        if day > calendar.monthrange(year, month)[1]:
            continue
        candidates.append(calendar.timegm((year, month, day, hour, minute, 0)))
    if not candidates:
        raise MetarError("day of month does not exist near reference", f"{day:02d}")
    return min(candidates, key=lambda c: (abs(c - reference), c))


def parse_metar(raw: str, reference: int | None = None) -> MetarReport:
    """Decode station, issue time and wind group of one METAR body.

    ``reference`` is any UTC epoch second near the report and resolves the
    ddhhmmZ group into an absolute ``issue_time``. Other groups are kept
    only in ``raw_text``.
    """
    text = " ".join(raw.split())
    tokens = text.split(" ")
    i = 0
    while i < len(tokens) and tokens[i] in {"METAR", "SPECI"}:
        i += 1
    if i >= len(tokens) or not _STATION_RE.match(tokens[i]):
        raise MetarError("missing station identifier", tokens[i] if i < len(tokens) else None)
    station = tokens[i]
    i += 1
    if i >= len(tokens):
        raise MetarError("missing issue time group")
    m = _TIME_RE.match(tokens[i])
    if not m:
        raise MetarError("ill-formed issue time group", tokens[i])
    day, hour, minute = (int(g) for g in m.groups())
    if not (1 <= day <= 31 and hour <= 23 and minute <= 59):
        raise MetarError("ill-formed issue time group", tokens[i])
    i += 1
    while i < len(tokens) and tokens[i] in {"AUTO", "COR", "NIL"}:
        if tokens[i] == "NIL":
            raise MetarError("missing wind group (NIL report)", "NIL")
        i += 1
    if i >= len(tokens):
        raise MetarError("missing wind group")
    token = tokens[i]
    m = _WIND_RE.match(token)
    if not m:
        if _WINDISH_RE.match(token):
            raise MetarError("ill-formed wind group", token)
        raise MetarError("missing wind group", token)

    speed = int(m["speed"])
    gust = int(m["gust"]) if m["gust"] else None
    if gust is not None and gust < speed:
        raise MetarError("gust below mean wind speed", token)
    if m["dir"] == "VRB":
        direction: int | str = VARIABLE
    else:
        deg = int(m["dir"])
        if deg > 360:
            raise MetarError("wind direction above 360", token)
        if deg == 0:
            if speed != 0 or gust is not None:
                raise MetarError("direction 000 with non-zero wind", token)
            direction = CALM
        else:
            direction = deg % 360
    issue_time = None
    if reference is not None:
        issue_time = _resolve_day_time(day, hour, minute, reference)
    return MetarReport(station, issue_time, direction, speed, gust, text)


def _split_timestamp_prefix(line: str) -> tuple[int | None, str]:
    head, _, rest = line.partition(" ")
    stamp = head.replace("Z", "+00:00") if head.endswith("Z") else head
    try:
        when = datetime.fromisoformat(stamp)
    except ValueError:
        return None, line
    if when.tzinfo is None:
        when = when.replace(tzinfo=timezone.utc)
    return int(when.timestamp()), rest


def read_metar_lines(
    stream: TextIO | Iterable[str], source: str = "<stream>", reference: int | None = None
) -> tuple[list[MetarReport], list[Diagnostic]]:
    """One report per line, optionally prefixed by an ISO-8601 UTC timestamp.

    The prefix (or ``reference`` when absent) anchors the ddhhmmZ group.
    Reports come back sorted by issue time.
    """
    reports: list[MetarReport] = []
    diagnostics: list[Diagnostic] = []
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        stamp, body = _split_timestamp_prefix(line)
        ref = stamp if stamp is not None else reference
        if ref is None:
            diagnostics.append(Diagnostic(source, lineno, "no date reference for report"))
            continue
        try:
            reports.append(parse_metar(body, reference=ref))
        except MetarError as exc:
            diagnostics.append(Diagnostic(source, lineno, str(exc)))
    reports.sort(key=lambda r: r.issue_time)
    return reports, diagnostics


def wind_to_runway_frame(report: MetarReport, axis_azimuth_deg: float) -> WindContext:
    """Resolve the reported wind into components along/across the runway axis.

    The wind blows from ``wind_dir_deg``; its motion heading is that plus
    180 degrees. ``u_cross`` is positive to the right of the axis.
    """
    if not 0.0 <= axis_azimuth_deg < 360.0:
        raise ValueError(f"axis azimuth {axis_azimuth_deg} outside [0, 360)")
    if report.is_variable:
        return WindContext(0.0, 0.0, True)
    if report.is_calm:
        return CALM_WIND
    speed = report.wind_speed_kt * KT_TO_MS
    rel = math.radians(report.wind_dir_deg + 180.0 - axis_azimuth_deg)
    return WindContext(speed * math.cos(rel), speed * math.sin(rel), False)


def nearest_report(reports: Sequence[MetarReport], times: Sequence[int], t: int) -> MetarReport:
    """Report whose issue time is nearest to t (ties -> earlier); ``times`` sorted."""
    k = bisect.bisect_left(times, t)
    if k == 0:
        return reports[0]
    if k == len(times):
        return reports[bisect.bisect_left(times, times[-1])]
    before, after = times[k - 1], times[k]
    if t - before <= after - t:
        # earliest of any reports sharing that issue time
        return reports[bisect.bisect_left(times, before)]
    return reports[k]


def join_weather(
    records: Sequence[RawTrackRecord], reports: Sequence[MetarReport]
) -> list[tuple[RawTrackRecord, MetarReport]]:
    """Pair each record with the METAR closest in time (ties -> earlier report)."""
    if not reports:
        raise ValueError("no weather available")
    times = [r.issue_time for r in reports]
    if any(t is None for t in times):
        raise ValueError("reports without issue_time cannot be joined")
    if any(a > b for a, b in zip(times, times[1:])):
        raise ValueError("reports must be sorted by issue_time")
    return [(rec, nearest_report(reports, times, rec.timestamp)) for rec in records]
