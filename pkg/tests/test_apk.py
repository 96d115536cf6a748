import io
import json
import struct
import warnings
import zipfile
import zlib
from pathlib import Path
from xml.dom import minidom

import pytest
from hypothesis import given, settings, strategies as st

from apkbert.apk import decode_axml, extract_manifest, format_typed_value, open_apk, read_manifest
from apkbert.errors import (
    BadCentralDirectory,
    CorruptStringPool,
    DecompressionFailure,
    ManifestMissing,
    NotManifestData,
    TruncatedArchive,
    UnknownChunkType,
    UnsupportedCompression,
)
from axml_builder import build_axml

FIX = Path(__file__).parent / "fixtures"
AXML = sorted((FIX / "axml").glob("*.axml"))
ANDROID_NS = "http://schemas.android.com/apk/res/android"

TYPE_REFERENCE, TYPE_STRING = 0x01, 0x03


def _triples_from_xml(text):
    """(element, qualified attribute, value) for every attribute, document order."""
    doc = minidom.parseString(text.encode("utf-8"))
    out = []

    def walk(el):
        for k in range(el.attributes.length):
            a = el.attributes.item(k)
            if a.name == "xmlns" or a.name.startswith("xmlns:"):
                continue
            prefix = "android:" if a.namespaceURI == ANDROID_NS else ""
            out.append((el.tagName, prefix + a.localName, a.value))
        for c in el.childNodes:
            if c.nodeType == c.ELEMENT_NODE:
                walk(c)

    walk(doc.documentElement)
    return out


def _reference_triples(path):
    # the reference decoder renders references as @7F0D0000; our canonical form is @0x7f0d0000
    out = []
    for element, name, vtype, data, value in json.loads(path.read_text(encoding="utf-8")):
        if vtype == TYPE_REFERENCE:
            value = "@0x%08x" % data
        out.append((element, name, value))
    return out


def _decode_quiet(raw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UnknownChunkType)
        return decode_axml(raw)


@pytest.mark.parametrize("path", AXML, ids=lambda p: p.stem)
def test_axml_matches_reference_decoder(path):
    ref = _reference_triples(path.with_suffix(".ref.json"))
    doc = _decode_quiet(path.read_bytes())
    assert sorted(_triples_from_xml(doc.xml_text)) == sorted(ref)


def test_fixture_set_is_complete():
    assert len(AXML) == 6
    for p in AXML:
        assert p.with_suffix(".ref.json").exists()


@pytest.mark.parametrize("stem", ["simple", "unicode", "sms_trojan", "banker_text"])
def test_axml_preserves_source_attributes(stem):
    src = (FIX / "manifests" / f"{stem}.xml").read_text(encoding="utf-8")
    for utf8 in (False, True):
        doc = decode_axml(build_axml(src, utf8=utf8))
        assert sorted(_triples_from_xml(doc.xml_text)) == sorted(_triples_from_xml(src))


def test_utf8_and_utf16_pools_decode_identically():
    a = decode_axml((FIX / "axml" / "unicode.utf8.axml").read_bytes())
    b = decode_axml((FIX / "axml" / "unicode.utf16.axml").read_bytes())
    assert a.xml_text == b.xml_text


def test_unknown_chunk_warns_and_is_skipped():
    raw = (FIX / "axml" / "banker_text.unknown_chunk.axml").read_bytes()
    with pytest.warns(UnknownChunkType):
        doc = decode_axml(raw)
    assert "android.permission.RECEIVE_SMS" in doc.xml_text or "<manifest" in doc.xml_text


def test_blanked_names_fall_back_on_resource_ids():
    a = decode_axml((FIX / "axml" / "simple.blanked.axml").read_bytes())
    b = decode_axml((FIX / "axml" / "simple.utf16.axml").read_bytes())
    assert a.xml_text == b.xml_text


def test_decoded_text_is_well_formed_xml():
    for p in AXML:
        minidom.parseString(_decode_quiet(p.read_bytes()).xml_text.encode("utf-8"))


def test_plain_xml_passes_through():
    text = (FIX / "manifests" / "simple.xml").read_text(encoding="utf-8")
    doc = decode_axml(text.encode("utf-8"))
    assert doc.source_kind == "plain-xml"
    assert doc.xml_text == text
    doc = decode_axml(b"\xef\xbb\xbf  \n" + text.encode("utf-8"))
    assert "<manifest" in doc.xml_text


@pytest.mark.parametrize("raw", [b"", b"   ", b"\x00\x00\x00\x00", b"PK\x03\x04", b"< not a tag"])
def test_not_manifest_data(raw):
    with pytest.raises(NotManifestData):
        decode_axml(raw)


def test_corrupt_string_pool():
    raw = bytearray((FIX / "axml" / "simple.utf16.axml").read_bytes())
    # string count of the pool (header at offset 8) pushed far past the chunk
    struct.pack_into("<I", raw, 16, 100000)
    with pytest.raises(CorruptStringPool):
        decode_axml(bytes(raw))


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=300))
def test_decoder_fails_only_with_typed_errors(blob):
    from apkbert.errors import ApkBertError

    raw = b"\x03\x00\x08\x00" + struct.pack("<I", 8 + len(blob)) + blob
    try:
        _decode_quiet(raw)
    except ApkBertError:
        pass


@settings(max_examples=200, deadline=None)
@given(st.integers(0, len((FIX / "axml" / "sms_trojan.utf8.axml").read_bytes()) - 1))
def test_truncated_axml_fails_cleanly(cut):
    from apkbert.errors import ApkBertError

    raw = (FIX / "axml" / "sms_trojan.utf8.axml").read_bytes()[:cut]
    try:
        _decode_quiet(raw)
    except ApkBertError:
        pass


@pytest.mark.parametrize(
    "dtype,data,expected",
    [
        (0x12, 0xFFFFFFFF, "true"),
        (0x12, 0, "false"),
        (0x10, 21, "21"),
        (0x10, 0xFFFFFFFF, "-1"),
        (0x11, 0x10, "0x00000010"),
        (0x01, 0x7F0D0000, "@0x7f0d0000"),
        (0x02, 0x01010036, "?0x01010036"),
        (0x1C, 0xFF00FF00, "#ff00ff00"),
    ],
)
def test_format_typed_value(dtype, data, expected):
    assert format_typed_value(dtype, data) == expected


# ---------------------------------------------------------------- ZIP container

def _zip_listing(path):
    with zipfile.ZipFile(path) as zf:
        return {i.filename: zf.read(i.filename) for i in zf.infolist()}


@pytest.mark.parametrize("name", ["stored.apk", "deflated.apk"])
def test_zip_round_trip_matches_stdlib(name):
    path = FIX / "apk" / name
    expected = _zip_listing(path)
    archive = open_apk(path)
    assert sorted(archive.names) == sorted(expected)
    for n, data in expected.items():
        assert archive.read(n) == data
    assert extract_manifest(archive) == (FIX / "axml" / "sms_trojan.utf8.axml").read_bytes()


def test_open_apk_accepts_bytes_path_and_file():
    path = FIX / "apk" / "deflated.apk"
    raw = path.read_bytes()
    by_path = open_apk(path)
    assert open_apk(raw).names == by_path.names
    assert open_apk(str(path)).names == by_path.names
    with open(path, "rb") as fh:
        assert open_apk(fh).names == by_path.names
    import hashlib

    assert by_path.sha256 == hashlib.sha256(raw).hexdigest()


@settings(max_examples=60, deadline=None)
@given(
    st.dictionaries(
        st.text(st.characters(min_codepoint=0x21, max_codepoint=0x7E, exclude_characters="\\"), min_size=1, max_size=20),
        st.binary(max_size=2000),
        max_size=6,
    ),
    st.sampled_from([zipfile.ZIP_STORED, zipfile.ZIP_DEFLATED]),
)
def test_zip_round_trip_property(entries, method):
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=method) as zf:
        for n, data in entries.items():
            zf.writestr(n, data)
    archive = open_apk(buf.getvalue())
    assert sorted(archive.names) == sorted(entries)
    for n, data in entries.items():
        assert archive.read(n) == data


def test_zip_with_trailing_comment_and_prefix():
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr("AndroidManifest.xml", b"<manifest/>")
        zf.comment = b"signed " * 20
    archive = open_apk(buf.getvalue())
    assert archive.read("AndroidManifest.xml") == b"<manifest/>"


def test_empty_archive_has_no_manifest():
    empty = b"PK\x05\x06" + bytes(18)
    archive = open_apk(empty)
    assert archive.names == []
    with pytest.raises(ManifestMissing):
        extract_manifest(archive)


def test_no_manifest():
    with pytest.raises(ManifestMissing):
        read_manifest(FIX / "apk" / "no_manifest.apk")


def test_read_manifest_plain_and_binary():
    plain = read_manifest(FIX / "apk" / "plain_manifest.apk")
    assert plain.source_kind == "plain-xml"
    binary = read_manifest(FIX / "apk" / "deflated.apk")
    assert binary.source_kind == "binary-axml"
    assert binary.apk_hash == open_apk(FIX / "apk" / "deflated.apk").sha256
    assert "android.permission.SEND_SMS" in binary.xml_text


def test_random_bytes_are_rejected():
    import numpy as np

    junk = np.random.default_rng(0).integers(0, 256, 100, dtype=np.uint8).tobytes()
    with pytest.raises(BadCentralDirectory):
        open_apk(junk)


def test_truncated_archive():
    raw = (FIX / "apk" / "stored.apk").read_bytes()
    eocd = raw.rfind(b"PK\x05\x06")
    # drop everything before the central directory but keep the end record
    with pytest.raises((TruncatedArchive, BadCentralDirectory)):
        open_apk(raw[eocd - 40 :])


def test_unsupported_compression():
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr("AndroidManifest.xml", b"<manifest/>")
    raw = bytearray(buf.getvalue())
    cd = raw.rfind(b"PK\x01\x02")
    struct.pack_into("<H", raw, cd + 10, 12)  # bzip2
    with pytest.raises(UnsupportedCompression):
        open_apk(bytes(raw))


def test_crc_mismatch_detected():
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr("AndroidManifest.xml", b"<manifest package='x'/>")
    raw = bytearray(buf.getvalue())
    raw[raw.find(b"package")] ^= 0x20
    archive = open_apk(bytes(raw))
    with pytest.raises(DecompressionFailure):
        archive.read("AndroidManifest.xml")


def test_bad_deflate_stream():
    payload = zlib.compress(b"x" * 100)[2:-4]
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("AndroidManifest.xml", b"x" * 100)
    raw = bytearray(buf.getvalue())
    start = raw.find(payload)
    assert start > 0
    raw[start : start + 2] = b"\xff\xff"
    with pytest.raises(DecompressionFailure):
        open_apk(bytes(raw)).read("AndroidManifest.xml")


def test_duplicate_entries_rejected():
    buf = io.BytesIO()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with zipfile.ZipFile(buf, "w") as zf:
            zf.writestr("AndroidManifest.xml", b"<a/>")
            zf.writestr("AndroidManifest.xml", b"<b/>")
    with pytest.raises(BadCentralDirectory):
        open_apk(buf.getvalue())
