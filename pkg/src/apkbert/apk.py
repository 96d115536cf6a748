"""APK container reading and binary AndroidManifest.xml decoding.

An APK is a ZIP archive.  The entry table is read from the central
directory (located through the end-of-central-directory record), never by
scanning local headers.  Only stored (0) and deflate (8) entries are
supported.

The binary XML ("AXML") decoder walks the little-endian chunk stream:

    0x0003  file header
    0x0001  string pool (UTF-16 or UTF-8)
    0x0180  resource-id map
    0x0100 / 0x0101  start / end namespace
    0x0102 / 0x0103  start / end element
    0x0104  character data

Typed attribute values are rendered canonically: booleans ``true``/``false``,
decimal integers in base 10, hex integers ``0x%08x``, references
``@0x%08x``, theme attributes ``?0x%08x``, colours ``#%08x``.
"""

from __future__ import annotations

import hashlib
import logging
import re
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape, quoteattr

from .errors import (
    BadCentralDirectory,
    CorruptStringPool,
    DecompressionFailure,
    ManifestMissing,
    NotManifestData,
    TruncatedArchive,
    UnknownChunkType,
    UnsupportedCompression,
)

log = logging.getLogger(__name__)

MANIFEST_NAME = "AndroidManifest.xml"

EOCD_SIG = 0x06054B50
EOCD64_SIG = 0x06064B50
EOCD64_LOCATOR_SIG = 0x07064B50
CDIR_SIG = 0x02014B50
LOCAL_SIG = 0x04034B50
STORED, DEFLATED = 0, 8


@dataclass(frozen=True)
class ZipEntry:
    name: str
    offset: int
    compressed_size: int
    uncompressed_size: int
    method: int
    crc32: int
    flags: int = 0


@dataclass
class ApkArchive:
    data: bytes
    entries: dict[str, ZipEntry] = field(default_factory=dict)
    source: str | None = None

    @property
    def names(self) -> list[str]:
        return list(self.entries)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()

    def read(self, name: str) -> bytes:
        try:
            entry = self.entries[name]
        except KeyError:
            raise ManifestMissing(f"archive has no entry {name!r}") from None
        return _read_entry(self.data, entry)


@dataclass(frozen=True)
class ManifestDocument:
    apk_hash: str
    xml_text: str
    source_kind: str  # "binary-axml" or "plain-xml"


# ---------------------------------------------------------------- ZIP

def _find_eocd(data: bytes) -> int:
    # the record is 22 bytes plus an optional comment of up to 65535 bytes
    lo = max(0, len(data) - 22 - 0xFFFF)
    pos = data.rfind(struct.pack("<I", EOCD_SIG), lo)
    while pos != -1:
        if pos + 22 <= len(data):
            comment_len = struct.unpack_from("<H", data, pos + 20)[0]
            if pos + 22 + comment_len <= len(data):
                return pos
        pos = data.rfind(struct.pack("<I", EOCD_SIG), lo, pos)
    raise BadCentralDirectory("no end-of-central-directory record")


def _zip64_extra(extra: bytes, usize, csize, offset):
    pos = 0
    while pos + 4 <= len(extra):
        tag, size = struct.unpack_from("<HH", extra, pos)
        body = extra[pos + 4 : pos + 4 + size]
        if tag == 0x0001:
            vals = list(struct.unpack_from(f"<{len(body) // 8}Q", body))
            if usize == 0xFFFFFFFF and vals:
                usize = vals.pop(0)
            if csize == 0xFFFFFFFF and vals:
                csize = vals.pop(0)
            if offset == 0xFFFFFFFF and vals:
                offset = vals.pop(0)
            break
        pos += 4 + size
    return usize, csize, offset


def open_apk(source) -> ApkArchive:
    """Parse the central directory of a ZIP/APK given as bytes, a path, or a binary file."""
    label = None
    if isinstance(source, (bytes, bytearray, memoryview)):
        data = bytes(source)
    elif isinstance(source, (str, Path)):
        label = str(source)
        data = Path(source).read_bytes()
    else:
        data = source.read()
    if len(data) < 22:
        raise BadCentralDirectory("input too short to be a ZIP archive")
    eocd = _find_eocd(data)
    _, _, _, n_entries, cd_size, cd_offset, _ = struct.unpack_from("<HHHHIIH", data, eocd + 4)
    if 0xFFFF in (n_entries,) or 0xFFFFFFFF in (cd_size, cd_offset):
        loc = eocd - 20
        if loc < 0 or struct.unpack_from("<I", data, loc)[0] != EOCD64_LOCATOR_SIG:
            raise BadCentralDirectory("ZIP64 sizes without a ZIP64 locator")
        rec = struct.unpack_from("<Q", data, loc + 8)[0]
        if rec + 56 > len(data) or struct.unpack_from("<I", data, rec)[0] != EOCD64_SIG:
            raise TruncatedArchive("ZIP64 end record out of range")
        n_entries, cd_size, cd_offset = struct.unpack_from("<QQQ", data, rec + 32)
    if cd_offset + cd_size > len(data):
        raise TruncatedArchive(f"central directory [{cd_offset}, {cd_offset + cd_size}) beyond {len(data)} bytes")

    entries: dict[str, ZipEntry] = {}
    pos = cd_offset
    for i in range(n_entries):
        if pos + 46 > len(data):
            raise TruncatedArchive(f"central directory entry {i} is truncated")
        (sig, _, _, flags, method, _, _, crc, csize, usize,
         nlen, xlen, clen, _, _, _, offset) = struct.unpack_from("<IHHHHHHIIIHHHHHII", data, pos)
        if sig != CDIR_SIG:
            raise BadCentralDirectory(f"bad signature for central directory entry {i}")
        raw_name = data[pos + 46 : pos + 46 + nlen]
        extra = data[pos + 46 + nlen : pos + 46 + nlen + xlen]
        if pos + 46 + nlen + xlen + clen > len(data):
            raise TruncatedArchive(f"central directory entry {i} is truncated")
        name = raw_name.decode("utf-8" if flags & 0x800 else "cp437")
        usize, csize, offset = _zip64_extra(extra, usize, csize, offset)
        if method not in (STORED, DEFLATED):
            raise UnsupportedCompression(f"entry {name!r} uses compression method {method}")
        if offset + 30 > len(data):
            raise TruncatedArchive(f"local header of {name!r} lies beyond the end of input")
        if name in entries:
            raise BadCentralDirectory(f"duplicate entry {name!r}")
        entries[name] = ZipEntry(name, offset, csize, usize, method, crc, flags)
        pos += 46 + nlen + xlen + clen
    return ApkArchive(data=data, entries=entries, source=label)


def _read_entry(data: bytes, entry: ZipEntry) -> bytes:
    if struct.unpack_from("<I", data, entry.offset)[0] != LOCAL_SIG:
        raise BadCentralDirectory(f"no local header at offset {entry.offset} for {entry.name!r}")
    if entry.flags & 0x1:
        raise DecompressionFailure(f"{entry.name!r} is encrypted")
    nlen, xlen = struct.unpack_from("<HH", data, entry.offset + 26)
    start = entry.offset + 30 + nlen + xlen
    payload = data[start : start + entry.compressed_size]
    if len(payload) != entry.compressed_size:
        raise TruncatedArchive(f"payload of {entry.name!r} is truncated")
    if entry.method == STORED:
        out = payload
    else:
        try:
            d = zlib.decompressobj(-zlib.MAX_WBITS)
            out = d.decompress(payload) + d.flush()
        except zlib.error as exc:
            raise DecompressionFailure(f"{entry.name!r}: {exc}") from None
    if len(out) != entry.uncompressed_size:
        raise DecompressionFailure(f"{entry.name!r}: expected {entry.uncompressed_size} bytes, got {len(out)}")
    if zlib.crc32(out) != entry.crc32:
        raise DecompressionFailure(f"{entry.name!r}: CRC mismatch")
    return out


def extract_manifest(archive: ApkArchive) -> bytes:
    if MANIFEST_NAME not in archive.entries:
        raise ManifestMissing(f"no {MANIFEST_NAME} at archive root")
    return archive.read(MANIFEST_NAME)


# ---------------------------------------------------------------- AXML

RES_XML_TYPE = 0x0003
RES_STRING_POOL_TYPE = 0x0001
RES_XML_RESOURCE_MAP_TYPE = 0x0180
RES_XML_START_NAMESPACE_TYPE = 0x0100
RES_XML_END_NAMESPACE_TYPE = 0x0101
RES_XML_START_ELEMENT_TYPE = 0x0102
RES_XML_END_ELEMENT_TYPE = 0x0103
RES_XML_CDATA_TYPE = 0x0104

UTF8_FLAG = 1 << 8
NO_INDEX = 0xFFFFFFFF

TYPE_NULL = 0x00
TYPE_REFERENCE = 0x01
TYPE_ATTRIBUTE = 0x02
TYPE_STRING = 0x03
TYPE_FLOAT = 0x04
TYPE_DIMENSION = 0x05
TYPE_FRACTION = 0x06
TYPE_DYNAMIC_REFERENCE = 0x07
TYPE_INT_DEC = 0x10
TYPE_INT_HEX = 0x11
TYPE_INT_BOOLEAN = 0x12
TYPE_FIRST_COLOR = 0x1C
TYPE_LAST_COLOR = 0x1F

_DIMENSION_UNITS = ("px", "dip", "sp", "pt", "in", "mm")
_FRACTION_UNITS = ("%", "%p")
_RADIX_MULT = (1.0 / (1 << 0), 1.0 / (1 << 7), 1.0 / (1 << 15), 1.0 / (1 << 23))

# framework attribute ids for manifests whose attribute-name strings were blanked
ANDROID_ATTR_IDS = {
    0x01010000: "theme",
    0x01010001: "label",
    0x01010002: "icon",
    0x01010003: "name",
    0x01010006: "permission",
    0x0101000F: "debuggable",
    0x01010010: "exported",
    0x0101001E: "process",
    0x01010018: "authorities",
    0x0101020C: "minSdkVersion",
    0x01010270: "targetSdkVersion",
    0x0101021B: "versionCode",
    0x0101021C: "versionName",
    0x01010280: "allowBackup",
}
ANDROID_NS = "http://schemas.android.com/apk/res/android"


def _complex(data: int) -> float:
    mantissa = (data & 0xFFFFFF00)
    if mantissa & 0x80000000:
        mantissa -= 1 << 32
    return mantissa * _RADIX_MULT[(data >> 4) & 0x3]


def format_typed_value(data_type: int, data: int, string=lambda i: "") -> str:
    if data_type == TYPE_STRING:
        return string(data)
    if data_type == TYPE_NULL:
        return ""
    if data_type in (TYPE_REFERENCE, TYPE_DYNAMIC_REFERENCE):
        return f"@0x{data:08x}"
    if data_type == TYPE_ATTRIBUTE:
        return f"?0x{data:08x}"
    if data_type == TYPE_INT_BOOLEAN:
        return "true" if data else "false"
    if data_type == TYPE_INT_DEC:
        return str(data - (1 << 32) if data & 0x80000000 else data)
    if data_type == TYPE_INT_HEX:
        return f"0x{data:08x}"
    if data_type == TYPE_FLOAT:
        return repr(struct.unpack("<f", struct.pack("<I", data))[0])
    if data_type == TYPE_DIMENSION:
        return f"{_complex(data)!r}{_DIMENSION_UNITS[data & 0xF] if (data & 0xF) < 6 else ''}"
    if data_type == TYPE_FRACTION:
        return f"{_complex(data) * 100!r}{_FRACTION_UNITS[data & 0xF] if (data & 0xF) < 2 else ''}"
    if TYPE_FIRST_COLOR <= data_type <= TYPE_LAST_COLOR:
        return f"#{data:08x}"
    return f"<0x{data:x}, type 0x{data_type:02x}>"


class StringPool:
    def __init__(self, buf: bytes, start: int, header_size: int, size: int):
        try:
            count, style_count, flags, strings_start, _ = struct.unpack_from("<IIIII", buf, start + 8)
        except struct.error:
            raise CorruptStringPool("string pool header truncated") from None
        end = start + size
        if start + header_size + 4 * (count + style_count) > end or end > len(buf):
            raise CorruptStringPool("string pool offset table exceeds chunk")
        self._buf = buf
        self._end = end
        self._base = start + strings_start
        self._utf8 = bool(flags & UTF8_FLAG)
        self._offsets = struct.unpack_from(f"<{count}I", buf, start + header_size)
        self._cache: dict[int, str] = {}

    def __len__(self):
        return len(self._offsets)

    def get(self, idx: int) -> str:
        if idx == NO_INDEX:
            return ""
        if idx >= len(self._offsets):
            raise CorruptStringPool(f"string index {idx} out of range ({len(self._offsets)} strings)")
        if idx not in self._cache:
            self._cache[idx] = self._decode(self._base + self._offsets[idx])
        return self._cache[idx]

    def _decode(self, pos: int) -> str:
        buf = self._buf
        try:
            if self._utf8:
                _, pos = self._len8(pos)
                nbytes, pos = self._len8(pos)
                raw = buf[pos : pos + nbytes]
                if pos + nbytes > self._end:
                    raise CorruptStringPool("UTF-8 string runs past the pool")
                return raw.decode("utf-8", errors="replace")
            n = struct.unpack_from("<H", buf, pos)[0]
            pos += 2
            if n & 0x8000:
                n = ((n & 0x7FFF) << 16) | struct.unpack_from("<H", buf, pos)[0]
                pos += 2
            if pos + 2 * n > self._end:
                raise CorruptStringPool("UTF-16 string runs past the pool")
            return buf[pos : pos + 2 * n].decode("utf-16-le", errors="replace")
        except (struct.error, IndexError):
            raise CorruptStringPool(f"string at offset {pos} is truncated") from None

    def _len8(self, pos):
        n = self._buf[pos]
        pos += 1
        if n & 0x80:
            n = ((n & 0x7F) << 8) | self._buf[pos]
            pos += 1
        return n, pos


@dataclass
class _Element:
    name: str
    attrs: list = field(default_factory=list)  # (qualified name, value)
    children: list = field(default_factory=list)
    text: str = ""
    nsdecls: list = field(default_factory=list)  # (prefix, uri)


_ELEMENT_TAG = re.compile(r"<[A-Za-z_][\w.:-]*")


def _looks_textual(raw: bytes) -> bool:
    head = raw.lstrip(b"\xef\xbb\xbf").lstrip()
    return head.startswith(b"<")


def decode_axml(raw: bytes, apk_hash: str | None = None) -> ManifestDocument:
    """Decode a manifest (binary or plain XML) into indented XML text."""
    if not raw:
        raise NotManifestData("empty manifest data")
    digest = apk_hash or hashlib.sha256(raw).hexdigest()
    if _looks_textual(raw):
        text = raw.decode("utf-8-sig", errors="replace")
        if not _ELEMENT_TAG.search(text):
            raise NotManifestData("text contains no element tag")
        return ManifestDocument(digest, text, "plain-xml")
    if len(raw) < 8 or struct.unpack_from("<H", raw, 0)[0] != RES_XML_TYPE:
        raise NotManifestData("neither XML text nor an AXML file chunk")
    root = _parse_axml(raw)
    return ManifestDocument(digest, _serialise(root), "binary-axml")


def _parse_axml(buf: bytes) -> _Element:
    _, header_size, total = struct.unpack_from("<HHI", buf, 0)
    end = min(total, len(buf)) if total >= 8 else len(buf)
    pos = header_size if header_size >= 8 else 8
    pool = None
    res_ids: tuple = ()
    ns_prefix: dict[str, str] = {}
    pending_ns: list = []
    stack: list[_Element] = []
    root = None

    while pos + 8 <= end:
        ctype, hsize, csize = struct.unpack_from("<HHI", buf, pos)
        if csize < 8 or pos + csize > end:
            log.warning("chunk 0x%04x at %d has bad size %d; stopping", ctype, pos, csize)
            break
        if ctype == RES_STRING_POOL_TYPE:
            pool = StringPool(buf, pos, hsize, csize)
        elif ctype == RES_XML_RESOURCE_MAP_TYPE:
            res_ids = struct.unpack_from(f"<{(csize - hsize) // 4}I", buf, pos + hsize)
        elif ctype in (RES_XML_START_NAMESPACE_TYPE, RES_XML_END_NAMESPACE_TYPE,
                       RES_XML_START_ELEMENT_TYPE, RES_XML_END_ELEMENT_TYPE, RES_XML_CDATA_TYPE):
            if pool is None:
                raise CorruptStringPool("XML node before the string pool")
            body = pos + hsize
            if ctype == RES_XML_START_NAMESPACE_TYPE:
                prefix_i, uri_i = struct.unpack_from("<II", buf, body)
                prefix, uri = pool.get(prefix_i), pool.get(uri_i)
                ns_prefix[uri] = prefix
                pending_ns.append((prefix, uri))
            elif ctype == RES_XML_START_ELEMENT_TYPE:
                el = _start_element(buf, body, pool, res_ids, ns_prefix)
                el.nsdecls, pending_ns = pending_ns, []
                if stack:
                    stack[-1].children.append(el)
                elif root is None:
                    root = el
                stack.append(el)
            elif ctype == RES_XML_END_ELEMENT_TYPE:
                if stack:
                    stack.pop()
            elif ctype == RES_XML_CDATA_TYPE:
                text_i = struct.unpack_from("<I", buf, body)[0]
                if stack:
                    stack[-1].text += pool.get(text_i)
        else:
            warnings.warn(f"skipping unknown AXML chunk type 0x{ctype:04x} at offset {pos}", UnknownChunkType)
        pos += csize

    if root is None:
        raise NotManifestData("AXML stream contains no elements")
    return root


def _start_element(buf, body, pool: StringPool, res_ids, ns_prefix) -> _Element:
    ns_i, name_i, attr_start, attr_size, attr_count = struct.unpack_from("<IIHHH", buf, body)
    el = _Element(name=pool.get(name_i))
    if attr_size < 20:
        attr_size = 20
    for k in range(attr_count):
        a = body + attr_start + k * attr_size
        a_ns, a_name, a_raw, _, _, dtype, data = struct.unpack_from("<IIIHBBI", buf, a)
        name = pool.get(a_name)
        uri = pool.get(a_ns)
        if not name and a_name < len(res_ids):
            name = ANDROID_ATTR_IDS.get(res_ids[a_name], f"attr_0x{res_ids[a_name]:08x}")
            uri = uri or ANDROID_NS
        prefix = ns_prefix.get(uri, "") if uri else ""
        if uri and not prefix:
            prefix = "android" if uri == ANDROID_NS else "ns"
        qname = f"{prefix}:{name}" if prefix else name
        if dtype == TYPE_STRING or (a_raw != NO_INDEX and dtype == TYPE_NULL):
            value = pool.get(a_raw if a_raw != NO_INDEX else data)
        else:
            value = format_typed_value(dtype, data, pool.get)
        el.attrs.append((qname, value))
    return el


def _serialise(root: _Element) -> str:
    lines = ['<?xml version="1.0" encoding="utf-8"?>']

    def emit(el: _Element, depth: int):
        pad = "  " * depth
        parts = [f'xmlns:{p}={quoteattr(u)}' if p else f"xmlns={quoteattr(u)}" for p, u in el.nsdecls]
        parts += [f"{k}={quoteattr(v)}" for k, v in el.attrs]
        open_tag = f"<{el.name}" + ("".join(" " + p for p in parts))
        if not el.children and not el.text:
            lines.append(pad + open_tag + "/>")
            return
        if not el.children:
            lines.append(f"{pad}{open_tag}>{escape(el.text)}</{el.name}>")
            return
        lines.append(pad + open_tag + ">")
        if el.text.strip():
            lines.append(pad + "  " + escape(el.text.strip()))
        for child in el.children:
            emit(child, depth + 1)
        lines.append(f"{pad}</{el.name}>")

    emit(root, 0)
    return "\n".join(lines) + "\n"


def read_manifest(source) -> ManifestDocument:
    """Open an APK, extract its manifest and decode it; identity is the APK's SHA-256."""
    archive = open_apk(source)
    return decode_axml(extract_manifest(archive), apk_hash=archive.sha256)
