"""Repository and scanner clients for corpus construction.

Both clients run either live (HTTP+JSON against a base endpoint) or offline
against a fixture directory with the same observable behaviour.  Offline
layout::

    DIR/index.csv            hash,verdict,category,filename[,date]
    DIR/<filename>           APK bytes referenced by the index
    DIR/reports/<hash>.json  {"detections": {"EngineA": "Trojan.Banker.x", "EngineB": null}}

Live endpoints::

    GET {base}/samples?page=N          {"samples": [...], "next_page": N+1 | null}
    GET {base}/samples/{hash}/download APK bytes
    GET {base}/reports/{hash}          same JSON as the offline report files

The credential is looked up in the environment at request time and sent as
a header; it is never stored on any object and is scrubbed from error text.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

from .errors import (
    AuthFailure,
    BadConfig,
    ClientError,
    FixtureMissing,
    HashMismatch,
    NotFound,
    RateLimited,
    UnknownHash,
    UnmappableCategory,
)
from .preprocess import CATEGORIES

log = logging.getLogger(__name__)

HASH_RE = re.compile(r"[0-9a-f]{64}")
VERDICTS = ("benign", "malware")
SOURCES = ("repository", "local")
STATUSES = ("listed", "downloaded", "failed")
INDEX_COLUMNS = ("hash", "verdict", "category", "filename")
CREDENTIAL_HEADER = "x-apikey"


@dataclass(frozen=True)
class SampleDescriptor:
    sha256: str
    source: str = "repository"
    verdict: str | None = None
    category: str | None = None
    status: str = "listed"
    filename: str | None = None
    date: str | None = None

    def __post_init__(self):
        if not isinstance(self.sha256, str) or not HASH_RE.fullmatch(self.sha256):
            raise ValueError(f"sha256 must be 64 lowercase hex characters, got {self.sha256!r}")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}")
        if self.verdict is not None and self.verdict not in VERDICTS:
            raise ValueError(f"verdict must be one of {VERDICTS}")
        if self.category is not None and self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.status not in STATUSES:
            raise ValueError(f"status must be one of {STATUSES}")

    @property
    def dataset_ready(self) -> bool:
        return self.verdict is not None


@dataclass(frozen=True)
class ClientConfig:
    base_url: str | None = None
    credential_env: str | None = None  # name of the environment variable, never the value
    rate_limit: float = 240.0  # requests per minute
    max_attempts: int = 4
    backoff: float = 1.0  # seconds, doubled on every retry
    offline: bool = False
    fixture_dir: str | None = None
    store_dir: str = "samples"
    timeout: float = 30.0
    workers: int = 4

    def __post_init__(self):
        if self.rate_limit <= 0:
            raise BadConfig("rate limit must be > 0")
        if self.max_attempts < 1:
            raise BadConfig("max_attempts must be >= 1")
        if self.backoff < 0:
            raise BadConfig("backoff must be >= 0")
        if self.workers < 1:
            raise BadConfig("workers must be >= 1")
        if self.offline and not self.fixture_dir:
            raise BadConfig("offline mode requires a fixture directory")
        if not self.offline and not self.base_url:
            raise BadConfig("live mode requires a base endpoint")


@dataclass(frozen=True)
class SampleFilter:
    verdict: str | None = None
    date_from: str | None = None  # ISO dates, inclusive
    date_to: str | None = None
    category: str | None = None

    def matches(self, d: SampleDescriptor) -> bool:
        if self.verdict is not None and d.verdict != self.verdict:
            return False
        if self.category is not None and d.category != self.category:
            return False
        if self.date_from or self.date_to:
            if not d.date:
                return False
            day = dt.date.fromisoformat(d.date[:10])
            if self.date_from and day < dt.date.fromisoformat(self.date_from):
                return False
            if self.date_to and day > dt.date.fromisoformat(self.date_to):
                return False
        return True

    @classmethod
    def parse(cls, spec: str | None) -> "SampleFilter":
        """``"verdict=malware,date_from=2021-01-01"`` -> SampleFilter."""
        if not spec:
            return cls()
        kw = {}
        for part in spec.split(","):
            key, sep, value = part.partition("=")
            key = key.strip()
            if not sep or key not in cls.__dataclass_fields__:
                raise BadConfig(f"bad filter term {part!r}")
            kw[key] = value.strip()
        return cls(**kw)


class RateLimiter:
    """Spaces calls at least ``60 / per_minute`` seconds apart; thread-safe."""

    def __init__(self, per_minute: float, clock=time.monotonic, sleep=time.sleep):
        self.interval = 60.0 / per_minute
        self.clock = clock
        self.sleep = sleep
        self._next = None
        self._lock = threading.Lock()

    def wait(self):
        with self._lock:
            now = self.clock()
            if self._next is not None and now < self._next:
                self.sleep(self._next - now)
                now = self._next
            self._next = now + self.interval


class _Client:
    def __init__(self, config: ClientConfig, sleep=time.sleep, clock=time.monotonic):
        self.config = config
        self.sleep = sleep
        self.limiter = RateLimiter(config.rate_limit, clock, sleep)
        self.attempts = 0  # HTTP requests issued, retries included

    def __repr__(self):
        mode = f"offline:{self.config.fixture_dir}" if self.config.offline else self.config.base_url
        return f"{type(self).__name__}({mode})"

    @property
    def fixture_dir(self) -> Path:
        path = Path(self.config.fixture_dir)
        if not path.is_dir():
            raise FixtureMissing(f"fixture directory {path} does not exist")
        return path

    def _secret(self):
        name = self.config.credential_env
        if not name:
            return None
        value = os.environ.get(name)
        if not value:
            raise AuthFailure(f"credential variable {name} is not set")
        return value

    def _scrub(self, text: str) -> str:
        name = self.config.credential_env
        value = os.environ.get(name) if name else None
        return text.replace(value, "***") if value else text

    def _request(self, path: str, params=None) -> bytes:
        url = self.config.base_url.rstrip("/") + "/" + path.lstrip("/")
        if params:
            url += "?" + urllib.parse.urlencode(params)
        secret = self._secret()
        headers = {"Accept": "application/json"}
        if secret:
            headers[CREDENTIAL_HEADER] = secret
        delay = self.config.backoff
        for attempt in range(1, self.config.max_attempts + 1):
            self.limiter.wait()
            self.attempts += 1
            req = urllib.request.Request(url, headers=headers)
            try:
                with urllib.request.urlopen(req, timeout=self.config.timeout) as resp:
                    return resp.read()
            except urllib.error.HTTPError as exc:
                code = exc.code
                retry_after = exc.headers.get("Retry-After") if exc.headers else None
                exc.close()
                if code in (401, 403):
                    raise AuthFailure(f"{code} from {url}") from None
                if code == 404:
                    raise NotFound(f"404 from {url}") from None
                if code != 429 and code < 500:
                    raise ClientError(f"HTTP {code} from {url}") from None
                if attempt == self.config.max_attempts:
                    if code == 429:
                        raise RateLimited(f"still rate limited after {attempt} attempts: {url}") from None
                    raise ClientError(f"HTTP {code} from {url} after {attempt} attempts") from None
                wait = float(retry_after) if retry_after and retry_after.isdigit() else delay
                log.info("HTTP %d from %s, retry %d in %.2fs", code, url, attempt, wait)
                self.sleep(wait)
                delay *= 2
            except urllib.error.URLError as exc:
                raise ClientError(self._scrub(f"cannot reach {url}: {exc.reason}")) from None
        raise AssertionError("unreachable")

    def _json(self, path, params=None):
        return json.loads(self._request(path, params).decode("utf-8"))


class RepositoryClient(_Client):
    """APK repository: sample listing and downloads."""


class ScannerClient(_Client):
    """Multi-engine scanner: per-hash detection reports."""


# ---------------------------------------------------------------- listing

def read_index(path) -> list[SampleDescriptor]:
    path = Path(path)
    if not path.is_file():
        raise FixtureMissing(f"no fixture index at {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in INDEX_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise FixtureMissing(f"{path}: index lacks columns {missing}")
        return [_descriptor(row) for row in reader]


def _descriptor(row) -> SampleDescriptor:
    return SampleDescriptor(
        sha256=(row.get("hash") or row.get("sha256") or "").strip().lower(),
        verdict=row.get("verdict") or None,
        category=row.get("category") or None,
        filename=row.get("filename") or None,
        date=row.get("date") or None,
    )


def fetch_sample_list(client: RepositoryClient, sample_filter: SampleFilter | None = None) -> list[SampleDescriptor]:
    sample_filter = sample_filter or SampleFilter()
    if client.config.offline:
        found = read_index(client.fixture_dir / "index.csv")
    else:
        found, page = [], 1
        while page is not None:
            body = client._json("samples", {"page": page})
            found.extend(_descriptor(row) for row in body.get("samples", []))
            page = body.get("next_page")
    return [d for d in found if sample_filter.matches(d)]


# ---------------------------------------------------------------- download

def store_path(store_dir, sha256: str) -> Path:
    return Path(store_dir) / sha256[:2] / f"{sha256}.apk"


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def download_sample(client: RepositoryClient, descriptor: SampleDescriptor) -> Path:
    """Fetch into the content-addressed store; a stored, verified file is reused."""
    target = store_path(client.config.store_dir, descriptor.sha256)
    if target.exists() and _sha256_file(target) == descriptor.sha256:
        return target
    if client.config.offline:
        if not descriptor.filename:
            raise NotFound(f"{descriptor.sha256} has no fixture file")
        src = client.fixture_dir / descriptor.filename
        if not src.is_file():
            raise NotFound(f"fixture {descriptor.filename} for {descriptor.sha256} is missing")
        data = src.read_bytes()
    else:
        data = client._request(f"samples/{descriptor.sha256}/download")
    if hashlib.sha256(data).hexdigest() != descriptor.sha256:
        raise HashMismatch(f"downloaded bytes do not hash to {descriptor.sha256}; discarded")
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return target


def download_many(client: RepositoryClient, descriptors) -> list:
    """Parallel downloads under the client's shared rate limiter.

    Returns ``(descriptor, path or None, error or None)`` in input order.
    """

    def one(d):
        try:
            return replace(d, status="downloaded"), download_sample(client, d), None
        except ClientError as exc:
            return replace(d, status="failed"), None, exc

    with ThreadPoolExecutor(max_workers=client.config.workers) as pool:
        return list(pool.map(one, descriptors))


# ---------------------------------------------------------------- labeling

def parse_aliases(text: str) -> list[tuple[str, str]]:
    table = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in CATEGORIES:
            raise BadConfig(f"alias table line {n}: expected '<token> <category>', got {line!r}")
        table.append((parts[0].lower(), parts[1]))
    return table


def default_aliases() -> list[tuple[str, str]]:
    text = resources.files("apkbert").joinpath("data/category_aliases.txt").read_text(encoding="utf-8")
    return parse_aliases(text)


def map_family(family: str, aliases) -> str | None:
    tokens = set(re.split(r"[^0-9a-z]+", family.lower()))
    for alias, category in aliases:
        if alias in tokens:
            return category
    return None


def _report(client: ScannerClient, sha256: str) -> dict:
    if client.config.offline:
        path = client.fixture_dir / "reports" / f"{sha256}.json"
        if not path.is_file():
            raise UnknownHash(f"no scanner report for {sha256}")
        return json.loads(path.read_text(encoding="utf-8"))
    try:
        return client._json(f"reports/{sha256}")
    except NotFound:
        raise UnknownHash(f"no scanner report for {sha256}") from None


def label_sample(client: ScannerClient, sha256: str, aliases=None, min_engines: int = 1):
    """Returns ``(verdict, category or None)`` from a scanner report.

    Malware needs at least ``min_engines`` detections with a mappable family;
    the category is the most common mapped one, ties going to the alias
    table's earlier entry.
    """
    if not HASH_RE.fullmatch(sha256 or ""):
        raise UnknownHash(f"not a sha256 digest: {sha256!r}")
    aliases = default_aliases() if aliases is None else aliases
    families = [f for f in (_report(client, sha256).get("detections") or {}).values() if f]
    if not families:
        return "benign", None
    mapped = [(f, map_family(f, aliases)) for f in families]
    hits = [c for _, c in mapped if c is not None]
    if len(hits) < min_engines:
        unmapped = next((f for f, c in mapped if c is None), families[0])
        raise UnmappableCategory(unmapped)
    rank = {c: i for i, (_, c) in reversed(list(enumerate(aliases)))}
    best = min(set(hits), key=lambda c: (-hits.count(c), rank[c]))
    return "malware", best
