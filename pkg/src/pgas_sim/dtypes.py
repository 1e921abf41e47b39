"""Element types carried on the wire and their scalar codecs."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Dict

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class ElementType:
    name: str
    code: int
    width: int
    np_dtype: np.dtype
    is_float: bool = False
    signed: bool = False


def _et(name, code, width, np_name, is_float=False, signed=False):
    return ElementType(name, code, width, np.dtype(np_name), is_float, signed)


I8 = _et("i8", 0, 1, "<i1", signed=True)
I16 = _et("i16", 1, 2, "<i2", signed=True)
I32 = _et("i32", 2, 4, "<i4", signed=True)
I64 = _et("i64", 3, 8, "<i8", signed=True)
U8 = _et("u8", 4, 1, "<u1")
U16 = _et("u16", 5, 2, "<u2")
U32 = _et("u32", 6, 4, "<u4")
U64 = _et("u64", 7, 8, "<u8")
F32 = _et("f32", 8, 4, "<f4", is_float=True, signed=True)
F64 = _et("f64", 9, 8, "<f8", is_float=True, signed=True)

ALL_TYPES = (I8, I16, I32, I64, U8, U16, U32, U64, F32, F64)
INT_TYPES = (I8, I16, I32, I64, U8, U16, U32, U64)
FLOAT_TYPES = (F32, F64)

BY_CODE: Dict[int, ElementType] = {t.code: t for t in ALL_TYPES}
BY_NAME: Dict[str, ElementType] = {t.name: t for t in ALL_TYPES}

_RAW = {1: struct.Struct("<B"), 2: struct.Struct("<H"),
        4: struct.Struct("<I"), 8: struct.Struct("<Q")}


def to_bits(value, elem: ElementType) -> int:
    """Encode a python scalar as the unsigned bit pattern of elem's width."""
    if elem.is_float:
        packed = struct.pack("<f" if elem.width == 4 else "<d", float(value))
        return _RAW[elem.width].unpack(packed)[0]
    mask = (1 << (elem.width * 8)) - 1
    return int(value) & mask


def from_bits(bits: int, elem: ElementType):
    """Decode an unsigned bit pattern back to a python scalar."""
    raw = _RAW[elem.width].pack(bits & ((1 << (elem.width * 8)) - 1))
    if elem.is_float:
        return struct.unpack("<f" if elem.width == 4 else "<d", raw)[0]
    if elem.signed:
        return int.from_bytes(raw, "little", signed=True)
    return bits & ((1 << (elem.width * 8)) - 1)


def check_elem(elem: ElementType):
    if elem.code not in BY_CODE:
        raise ContractViolation(f"unknown element type {elem!r}")
