"""Canonical binary and JSON encodings for the frozen domain dataclasses.

Binary layout (big-endian, byte exact):

* ``bool``          1 byte, 0x00 or 0x01
* ``int``           8 bytes, signed two's complement
* ``float``         8 bytes, IEEE-754 double
* ``str``           u32 length + UTF-8
* ``bytes``         u32 length + raw bytes
* fixed bytes       raw (``Address`` 20, ``HashDigest`` 32), no prefix
* ``IntEnum``       1 byte
* ``tuple[T, ...]`` u32 count + items; ``tuple[A, B]`` items in order
* ``dict[K, V]``    u32 count + (key, value) pairs sorted by encoded key
* ``frozenset[T]``  u32 count + items sorted by encoding
* union             1 byte tag (index of the member type) + member
* dataclass         fields in declaration order, no names, no framing

The JSON form mirrors the same structure with hex strings for bytes and
enum names, and is used for logs and golden files.
"""
from __future__ import annotations

import dataclasses
import enum
import struct
import sys
import types
import typing
from functools import lru_cache
from typing import Any, Callable

from .crypto import FixedBytes, HashDigest, hash_bytes


class DecodeError(ValueError):
    pass


class EncodeError(ValueError):
    pass


_I64 = struct.Struct(">q")
_F64 = struct.Struct(">d")
_U32 = struct.Struct(">I")


class _Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise DecodeError(f"truncated input: need {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk


def _is_union(tp) -> bool:
    origin = typing.get_origin(tp)
    return origin is typing.Union or origin is types.UnionType


@lru_cache(maxsize=None)
def _fields(cls) -> tuple[tuple[str, Any], ...]:
    module = sys.modules[cls.__module__]
    hints = typing.get_type_hints(cls, vars(module))
    return tuple((f.name, hints[f.name]) for f in dataclasses.fields(cls))


def _union_tag(args: tuple, value) -> int:
    vt = type(value)
    for i, arg in enumerate(args):
        if vt is arg:
            return i
    for i, arg in enumerate(args):
        if isinstance(arg, type) and arg is not bool and isinstance(value, arg):
            return i
    raise EncodeError(f"{vt.__name__} is not a member of {args}")


# -- binary -----------------------------------------------------------------

@lru_cache(maxsize=None)
def _encoder(tp) -> Callable[[Any, bytearray], None]:
    if tp is bool:
        return lambda v, out: out.append(1 if v else 0)
    if tp is int:
        def enc_int(v, out):
            try:
                out += _I64.pack(v)
            except struct.error as exc:
                raise EncodeError(f"integer {v} out of 64-bit range") from exc
        return enc_int
    if tp is float:
        return lambda v, out: out.extend(_F64.pack(v))
    if tp is str:
        def enc_str(v, out):
            raw = v.encode("utf-8")
            out += _U32.pack(len(raw))
            out += raw
        return enc_str
    if isinstance(tp, type) and issubclass(tp, FixedBytes):
        def enc_fixed(v, out):
            if len(v) != tp.SIZE:
                raise EncodeError(f"{tp.__name__} must be {tp.SIZE} bytes")
            out += v
        return enc_fixed
    if tp is bytes:
        def enc_bytes(v, out):
            out += _U32.pack(len(v))
            out += v
        return enc_bytes
    if tp is type(None):
        return lambda v, out: None
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        return lambda v, out: out.append(int(v.value))
    if dataclasses.is_dataclass(tp):
        parts = [(name, _encoder(ftp)) for name, ftp in _fields(tp)]

        def enc_dc(v, out):
            for name, enc in parts:
                enc(getattr(v, name), out)
        return enc_dc
    if _is_union(tp):
        args = typing.get_args(tp)
        encs = [_encoder(a) for a in args]

        def enc_union(v, out):
            tag = _union_tag(args, v)
            out.append(tag)
            encs[tag](v, out)
        return enc_union
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is tuple:
        if len(args) == 2 and args[1] is Ellipsis:
            item = _encoder(args[0])

            def enc_seq(v, out):
                out += _U32.pack(len(v))
                for x in v:
                    item(x, out)
            return enc_seq
        items = [_encoder(a) for a in args]

        def enc_fixed_tuple(v, out):
            if len(v) != len(items):
                raise EncodeError(f"expected {len(items)}-tuple")
            for enc, x in zip(items, v):
                enc(x, out)
        return enc_fixed_tuple
    if origin is frozenset:
        item = _encoder(args[0])

        def enc_set(v, out):
            chunks = []
            for x in v:
                buf = bytearray()
                item(x, buf)
                chunks.append(bytes(buf))
            chunks.sort()
            out += _U32.pack(len(chunks))
            for c in chunks:
                out += c
        return enc_set
    if origin is dict:
        kenc, venc = _encoder(args[0]), _encoder(args[1])

        def enc_map(v, out):
            pairs = []
            for k, x in v.items():
                kb, vb = bytearray(), bytearray()
                kenc(k, kb)
                venc(x, vb)
                pairs.append((bytes(kb), bytes(vb)))
            pairs.sort()
            out += _U32.pack(len(pairs))
            for kb, vb in pairs:
                out += kb
                out += vb
        return enc_map
    raise TypeError(f"no canonical encoding for {tp!r}")


@lru_cache(maxsize=None)
def _decoder(tp) -> Callable[[_Reader], Any]:
    if tp is bool:
        def dec_bool(r):
            b = r.take(1)[0]
            if b > 1:
                raise DecodeError(f"bad bool byte {b}")
            return b == 1
        return dec_bool
    if tp is int:
        return lambda r: _I64.unpack(r.take(8))[0]
    if tp is float:
        return lambda r: _F64.unpack(r.take(8))[0]
    if tp is str:
        def dec_str(r):
            n = _U32.unpack(r.take(4))[0]
            try:
                return r.take(n).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise DecodeError("invalid UTF-8") from exc
        return dec_str
    if isinstance(tp, type) and issubclass(tp, FixedBytes):
        return lambda r: tp(r.take(tp.SIZE))
    if tp is bytes:
        return lambda r: r.take(_U32.unpack(r.take(4))[0])
    if tp is type(None):
        return lambda r: None
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        def dec_enum(r):
            b = r.take(1)[0]
            try:
                return tp(b)
            except ValueError as exc:
                raise DecodeError(f"bad {tp.__name__} value {b}") from exc
        return dec_enum
    if dataclasses.is_dataclass(tp):
        parts = [(name, _decoder(ftp)) for name, ftp in _fields(tp)]

        def dec_dc(r):
            kwargs = {name: dec(r) for name, dec in parts}
            try:
                return tp(**kwargs)
            except (ValueError, TypeError) as exc:
                raise DecodeError(f"invalid {tp.__name__}: {exc}") from exc
        return dec_dc
    if _is_union(tp):
        decs = [_decoder(a) for a in typing.get_args(tp)]

        def dec_union(r):
            tag = r.take(1)[0]
            if tag >= len(decs):
                raise DecodeError(f"bad union tag {tag}")
            return decs[tag](r)
        return dec_union
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is tuple:
        if len(args) == 2 and args[1] is Ellipsis:
            item = _decoder(args[0])

            def dec_seq(r):
                n = _U32.unpack(r.take(4))[0]
                if n > len(r.data) - r.pos:
                    raise DecodeError("sequence length exceeds input")
                return tuple(item(r) for _ in range(n))
            return dec_seq
        items = [_decoder(a) for a in args]
        return lambda r: tuple(d(r) for d in items)
    if origin is frozenset:
        item = _decoder(args[0])

        def dec_set(r):
            n = _U32.unpack(r.take(4))[0]
            if n > len(r.data) - r.pos:
                raise DecodeError("set length exceeds input")
            return frozenset(item(r) for _ in range(n))
        return dec_set
    if origin is dict:
        kdec, vdec = _decoder(args[0]), _decoder(args[1])

        def dec_map(r):
            n = _U32.unpack(r.take(4))[0]
            if n > len(r.data) - r.pos:
                raise DecodeError("map length exceeds input")
            out = {}
            for _ in range(n):
                k = kdec(r)
                out[k] = vdec(r)
            return out
        return dec_map
    raise TypeError(f"no canonical decoding for {tp!r}")


def encode(obj, tp=None) -> bytes:
    out = bytearray()
    _encoder(tp if tp is not None else type(obj))(obj, out)
    return bytes(out)


def decode(tp, data: bytes):
    r = _Reader(bytes(data))
    value = _decoder(tp)(r)
    if r.pos != len(r.data):
        raise DecodeError(f"{len(r.data) - r.pos} trailing bytes")
    return value


def digest(obj, tp=None) -> HashDigest:
    return hash_bytes(encode(obj, tp))


# -- JSON -------------------------------------------------------------------

def _type_name(tp) -> str:
    return getattr(tp, "__name__", None) or repr(tp)


@lru_cache(maxsize=None)
def _jsonifier(tp) -> Callable[[Any], Any]:
    if tp in (bool, int, float, str) or tp is type(None):
        return lambda v: v
    if isinstance(tp, type) and issubclass(tp, (bytes, FixedBytes)):
        return lambda v: bytes(v).hex()
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        return lambda v: v.name
    if dataclasses.is_dataclass(tp):
        parts = [(name, _jsonifier(ftp)) for name, ftp in _fields(tp)]
        return lambda v: {name: f(getattr(v, name)) for name, f in parts}
    if _is_union(tp):
        args = typing.get_args(tp)
        fs = [_jsonifier(a) for a in args]
        if len(args) == 2 and type(None) in args:
            inner = fs[0] if args[1] is type(None) else fs[1]
            return lambda v: None if v is None else inner(v)

        def json_union(v):
            tag = _union_tag(args, v)
            return {"type": _type_name(args[tag]), "value": fs[tag](v)}
        return json_union
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is tuple:
        if len(args) == 2 and args[1] is Ellipsis:
            item = _jsonifier(args[0])
            return lambda v: [item(x) for x in v]
        items = [_jsonifier(a) for a in args]
        return lambda v: [f(x) for f, x in zip(items, v)]
    if origin is frozenset:
        item = _jsonifier(args[0])
        enc = _encoder(args[0])

        def json_set(v):
            def key(x):
                buf = bytearray()
                enc(x, buf)
                return bytes(buf)
            return [item(x) for x in sorted(v, key=key)]
        return json_set
    if origin is dict:
        kf, vf = _jsonifier(args[0]), _jsonifier(args[1])
        kenc = _encoder(args[0])

        def json_map(v):
            def key(item):
                buf = bytearray()
                kenc(item[0], buf)
                return bytes(buf)
            return [[kf(k), vf(x)] for k, x in sorted(v.items(), key=key)]
        return json_map
    raise TypeError(f"no JSON form for {tp!r}")


@lru_cache(maxsize=None)
def _dejsonifier(tp) -> Callable[[Any], Any]:
    def expect(kind, v):
        if not isinstance(v, kind) or (kind is int and isinstance(v, bool)):
            raise DecodeError(f"expected {getattr(kind, '__name__', kind)}, got {v!r}")
        return v

    if tp is bool:
        return lambda v: expect(bool, v)
    if tp is int:
        return lambda v: expect(int, v)
    if tp is float:
        return lambda v: float(expect((int, float), v))
    if tp is str:
        return lambda v: expect(str, v)
    if tp is type(None):
        def none(v):
            if v is not None:
                raise DecodeError(f"expected null, got {v!r}")
        return none
    if isinstance(tp, type) and issubclass(tp, (bytes, FixedBytes)):
        def from_hex(v):
            try:
                return tp(bytes.fromhex(expect(str, v)))
            except ValueError as exc:
                raise DecodeError(str(exc)) from exc
        return from_hex
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        def from_name(v):
            try:
                return tp[expect(str, v)]
            except KeyError as exc:
                raise DecodeError(f"unknown {tp.__name__} {v!r}") from exc
        return from_name
    if dataclasses.is_dataclass(tp):
        parts = [(name, _dejsonifier(ftp)) for name, ftp in _fields(tp)]
        names = {name for name, _ in parts}

        def from_obj(v):
            expect(dict, v)
            extra = set(v) - names
            if extra:
                raise DecodeError(f"unknown fields for {tp.__name__}: {sorted(extra)}")
            try:
                return tp(**{name: f(v[name]) for name, f in parts})
            except KeyError as exc:
                raise DecodeError(f"missing field {exc} for {tp.__name__}") from exc
            except (ValueError, TypeError) as exc:
                raise DecodeError(f"invalid {tp.__name__}: {exc}") from exc
        return from_obj
    if _is_union(tp):
        args = typing.get_args(tp)
        fs = [_dejsonifier(a) for a in args]
        if len(args) == 2 and type(None) in args:
            inner = fs[0] if args[1] is type(None) else fs[1]
            return lambda v: None if v is None else inner(v)
        by_name = {_type_name(a): f for a, f in zip(args, fs)}

        def from_union(v):
            expect(dict, v)
            f = by_name.get(v.get("type"))
            if f is None:
                raise DecodeError(f"bad union member {v.get('type')!r}")
            return f(v.get("value"))
        return from_union
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is tuple:
        if len(args) == 2 and args[1] is Ellipsis:
            item = _dejsonifier(args[0])
            return lambda v: tuple(item(x) for x in expect(list, v))
        items = [_dejsonifier(a) for a in args]

        def from_fixed(v):
            if len(expect(list, v)) != len(items):
                raise DecodeError(f"expected {len(items)} items")
            return tuple(f(x) for f, x in zip(items, v))
        return from_fixed
    if origin is frozenset:
        item = _dejsonifier(args[0])
        return lambda v: frozenset(item(x) for x in expect(list, v))
    if origin is dict:
        kf, vf = _dejsonifier(args[0]), _dejsonifier(args[1])
        return lambda v: {kf(k): vf(x) for k, x in expect(list, v)}
    raise TypeError(f"no JSON form for {tp!r}")


def to_json(obj, tp=None):
    return _jsonifier(tp if tp is not None else type(obj))(obj)


def from_json(tp, data):
    return _dejsonifier(tp)(data)
