import hashlib
import http.server
import json
import logging
import threading

import pytest

from apkbert.clients import (
    ClientConfig,
    RateLimiter,
    RepositoryClient,
    SampleDescriptor,
    SampleFilter,
    ScannerClient,
    default_aliases,
    download_many,
    download_sample,
    fetch_sample_list,
    label_sample,
    map_family,
    parse_aliases,
    store_path,
)
from apkbert.errors import (
    AuthFailure,
    BadConfig,
    FixtureMissing,
    HashMismatch,
    NotFound,
    RateLimited,
    UnknownHash,
    UnmappableCategory,
)

SECRET = "s3cr3t-token-value-0123456789"
ENV = "APKBERT_TEST_KEY"


def _sha(data):
    return hashlib.sha256(data).hexdigest()


BLOBS = {name: f"apk bytes {name}".encode() for name in ("a", "b", "c")}


@pytest.fixture
def fixture_dir(tmp_path):
    d = tmp_path / "fx"
    (d / "reports").mkdir(parents=True)
    rows = [("a", "malware", "banker", "2021-03-01"), ("b", "benign", "", "2020-06-01"),
            ("c", "malware", "adware", "2022-01-15")]
    lines = ["hash,verdict,category,filename,date"]
    for name, verdict, cat, date in rows:
        (d / f"{name}.apk").write_bytes(BLOBS[name])
        lines.append(f"{_sha(BLOBS[name])},{verdict},{cat},{name}.apk,{date}")
    (d / "index.csv").write_text("\n".join(lines) + "\n")
    reports = {
        "a": {"EngineA": "Trojan.Banker.xyz", "EngineB": "Android.BankBot.1", "EngineC": None},
        "b": {"EngineA": None, "EngineB": None},
        "c": {"EngineA": "weirdfam"},
    }
    for name, det in reports.items():
        (d / "reports" / f"{_sha(BLOBS[name])}.json").write_text(json.dumps({"detections": det}))
    return d


def _offline(fixture_dir, tmp_path, cls=RepositoryClient, **kw):
    return cls(ClientConfig(offline=True, fixture_dir=str(fixture_dir), store_dir=str(tmp_path / "store"), **kw))


# ---------------------------------------------------------------- config & descriptors

def test_config_validation():
    with pytest.raises(BadConfig):
        ClientConfig(offline=True)
    with pytest.raises(BadConfig):
        ClientConfig(base_url="http://x", rate_limit=0)
    with pytest.raises(BadConfig):
        ClientConfig()


def test_descriptor_validation():
    with pytest.raises(ValueError):
        SampleDescriptor("ABC")
    with pytest.raises(ValueError):
        SampleDescriptor("0" * 64, status="lost")
    d = SampleDescriptor("0" * 64)
    assert not d.dataset_ready and SampleDescriptor("0" * 64, verdict="benign").dataset_ready


def test_filter_parse():
    f = SampleFilter.parse("verdict=malware, date_from=2021-01-01")
    assert f == SampleFilter(verdict="malware", date_from="2021-01-01")
    with pytest.raises(BadConfig):
        SampleFilter.parse("colour=red")


# ---------------------------------------------------------------- offline listing & download

def test_offline_listing_and_filters(fixture_dir, tmp_path):
    client = _offline(fixture_dir, tmp_path)
    assert len(fetch_sample_list(client)) == 3
    mal = fetch_sample_list(client, SampleFilter(verdict="malware"))
    assert {d.category for d in mal} == {"banker", "adware"}
    recent = fetch_sample_list(client, SampleFilter(date_from="2021-01-01", date_to="2021-12-31"))
    assert [d.sha256 for d in recent] == [_sha(BLOBS["a"])]


def test_missing_fixture_dir(tmp_path):
    client = RepositoryClient(ClientConfig(offline=True, fixture_dir=str(tmp_path / "nope")))
    with pytest.raises(FixtureMissing):
        fetch_sample_list(client)


def test_download_verifies_and_caches(fixture_dir, tmp_path, monkeypatch):
    client = _offline(fixture_dir, tmp_path)
    d = fetch_sample_list(client)[0]
    path = download_sample(client, d)
    assert path == store_path(tmp_path / "store", d.sha256)
    assert path.read_bytes() == BLOBS["a"]
    # second call must not touch the source
    (fixture_dir / "a.apk").unlink()
    assert download_sample(client, d) == path


def test_tampered_file_is_rejected(fixture_dir, tmp_path):
    client = _offline(fixture_dir, tmp_path)
    d = fetch_sample_list(client)[0]
    (fixture_dir / "a.apk").write_bytes(b"tampered")
    with pytest.raises(HashMismatch):
        download_sample(client, d)
    assert not store_path(tmp_path / "store", d.sha256).exists()
    assert not list((tmp_path / "store").rglob("*.part"))


def test_missing_file_not_found(fixture_dir, tmp_path):
    client = _offline(fixture_dir, tmp_path)
    d = SampleDescriptor("f" * 64, filename="ghost.apk")
    with pytest.raises(NotFound):
        download_sample(client, d)


def test_download_many_reports_each(fixture_dir, tmp_path):
    client = _offline(fixture_dir, tmp_path, workers=3)
    ds = fetch_sample_list(client) + [SampleDescriptor("e" * 64, filename="ghost.apk")]
    results = download_many(client, ds)
    assert [r[0].status for r in results] == ["downloaded"] * 3 + ["failed"]
    assert isinstance(results[-1][2], NotFound)


# ---------------------------------------------------------------- labeling

def test_alias_mapping():
    aliases = default_aliases()
    assert map_family("Trojan.Banker.xyz", aliases) == "banker"
    assert map_family("Android.SmsSend.A", aliases) == "sms-sender"
    assert map_family("Trojan.Generic", aliases) == "horse-trojan"
    assert map_family("weirdfam", aliases) is None
    with pytest.raises(BadConfig):
        parse_aliases("foo notacategory")


def test_label_sample(fixture_dir, tmp_path):
    client = _offline(fixture_dir, tmp_path, cls=ScannerClient)
    assert label_sample(client, _sha(BLOBS["a"])) == ("malware", "banker")
    assert label_sample(client, _sha(BLOBS["b"])) == ("benign", None)
    with pytest.raises(UnmappableCategory) as exc:
        label_sample(client, _sha(BLOBS["c"]))
    assert exc.value.family == "weirdfam"
    with pytest.raises(UnknownHash):
        label_sample(client, "d" * 64)
    with pytest.raises(UnknownHash):
        label_sample(client, "not-a-hash")


def test_label_threshold(fixture_dir, tmp_path):
    client = _offline(fixture_dir, tmp_path, cls=ScannerClient)
    with pytest.raises(UnmappableCategory):
        label_sample(client, _sha(BLOBS["a"]), min_engines=3)


# ---------------------------------------------------------------- live mode against a local server

class _Server:
    """Scripted HTTP server; each path maps to a list of (status, body) served in order."""

    def __init__(self, script):
        self.script = {k: list(v) for k, v in script.items()}
        self.headers_seen = []
        outer = self

        class Handler(http.server.BaseHTTPRequestHandler):
            def do_GET(self):
                outer.headers_seen.append(self.headers.get("x-apikey"))
                queue = outer.script.get(self.path) or [(404, b"")]
                status, body = queue.pop(0) if len(queue) > 1 else queue[0]
                self.send_response(status)
                if status == 429:
                    self.send_header("Retry-After", "0")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *a):
                pass

        self.httpd = http.server.HTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_port}"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


def _live(url, cls=RepositoryClient, **kw):
    sleeps = []
    cfg = ClientConfig(base_url=url, credential_env=ENV, rate_limit=1e6, **kw)
    return cls(cfg, sleep=sleeps.append), sleeps


def _page(samples, nxt):
    return json.dumps({"samples": samples, "next_page": nxt}).encode()


def test_live_retries_after_429(monkeypatch):
    monkeypatch.setenv(ENV, SECRET)
    body = _page([{"hash": "a" * 64, "verdict": "benign"}], None)
    with _Server({"/samples?page=1": [(429, b""), (429, b""), (200, body)]}) as srv:
        client, sleeps = _live(srv.url)
        found = fetch_sample_list(client)
    assert client.attempts == 3 and len(sleeps) == 2
    assert [d.sha256 for d in found] == ["a" * 64]
    assert srv.headers_seen == [SECRET] * 3


def test_live_gives_up_after_max_attempts(monkeypatch):
    monkeypatch.setenv(ENV, SECRET)
    with _Server({"/samples?page=1": [(429, b"")]}) as srv:
        client, _ = _live(srv.url, max_attempts=3)
        with pytest.raises(RateLimited):
            fetch_sample_list(client)
    assert client.attempts == 3


def test_live_backoff_doubles(monkeypatch):
    monkeypatch.setenv(ENV, SECRET)
    ok = _page([], None)
    with _Server({"/samples?page=1": [(503, b""), (503, b""), (503, b""), (200, ok)]}) as srv:
        client, sleeps = _live(srv.url, backoff=0.5)
        fetch_sample_list(client)
    assert sleeps == [0.5, 1.0, 2.0]


def test_live_pagination(monkeypatch):
    monkeypatch.setenv(ENV, SECRET)
    script = {
        "/samples?page=1": [(200, _page([{"hash": "1" * 64}], 2))],
        "/samples?page=2": [(200, _page([{"hash": "2" * 64, "verdict": "malware", "category": "spyware"}], None))],
    }
    with _Server(script) as srv:
        client, _ = _live(srv.url)
        found = fetch_sample_list(client)
    assert [d.sha256[0] for d in found] == ["1", "2"]


def test_live_auth_failure(monkeypatch):
    monkeypatch.setenv(ENV, SECRET)
    with _Server({"/samples?page=1": [(401, b"")]}) as srv:
        client, _ = _live(srv.url)
        with pytest.raises(AuthFailure):
            fetch_sample_list(client)
    assert client.attempts == 1


def test_live_missing_credential(monkeypatch):
    monkeypatch.delenv(ENV, raising=False)
    client, _ = _live("http://127.0.0.1:9")
    with pytest.raises(AuthFailure) as exc:
        fetch_sample_list(client)
    assert ENV in str(exc.value)


def test_live_download_and_report(monkeypatch, tmp_path):
    monkeypatch.setenv(ENV, SECRET)
    data = b"live apk"
    sha = _sha(data)
    report = json.dumps({"detections": {"E": "Android.Spy.Agent"}}).encode()
    with _Server({f"/samples/{sha}/download": [(200, data)], f"/reports/{sha}": [(200, report)]}) as srv:
        repo, _ = _live(srv.url, store_dir=str(tmp_path / "s"))
        path = download_sample(repo, SampleDescriptor(sha))
        scanner, _ = _live(srv.url, cls=ScannerClient)
        assert label_sample(scanner, sha) == ("malware", "spyware")
        with pytest.raises(UnknownHash):
            label_sample(scanner, "9" * 64)
    assert path.read_bytes() == data


def test_credential_never_leaks(monkeypatch, caplog, tmp_path):
    monkeypatch.setenv(ENV, SECRET)
    caplog.set_level(logging.DEBUG)
    with _Server({"/samples?page=1": [(429, b""), (401, b"")]}) as srv:
        client, _ = _live(srv.url)
        with pytest.raises(AuthFailure) as exc:
            fetch_sample_list(client)
    # unreachable host: the error text must be scrubbed too
    dead, _ = _live(f"http://{SECRET}.invalid")
    with pytest.raises(Exception) as exc2:
        fetch_sample_list(dead)
    for text in (caplog.text, str(exc.value), str(exc2.value), repr(client), repr(client.config)):
        assert SECRET not in text


# ---------------------------------------------------------------- rate limiting

def test_rate_limiter_spacing():
    now = [0.0]
    slept = []

    def sleep(s):
        slept.append(s)
        now[0] += s

    limiter = RateLimiter(60, clock=lambda: now[0], sleep=sleep)
    for _ in range(3):
        limiter.wait()
    assert slept == [1.0, 1.0]
    now[0] += 5
    limiter.wait()
    assert slept == [1.0, 1.0]
