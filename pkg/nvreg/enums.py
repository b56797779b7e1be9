from enum import Enum
from typing import Any, List, Type


class Spin(Enum):
    A = 'A'
    B = 'B'

    @property
    def partner(self) -> 'Spin':
        return Spin.B if self == Spin.A else Spin.A


class Observable(Enum):
    """DEER observables: line shift for B flips 0->-1, 0->+1 and -1->+1"""

    DNU1 = 'dnu1'
    DNU2 = 'dnu2'
    DNU_SUM = 'dnu_sum'


class PulseMode(Enum):
    IDEAL = 'ideal'
    RABI = 'rabi'


class Normalization(Enum):
    NONE = 'none'
    SPIN_FLIP = 'spin_flip'


def enum_member_from_value(enum_class: Type[Enum], value: Any) -> Any:
    for member in enum_class:
        if member.value == value:
            return member
    raise LookupError(f'Value not found in {enum_class.__name__}: {value}')


def enum_member_from_name(enum_class: Type[Enum], name: str) -> Any:
    for member in enum_class:
        if member.name == name:
            return member
    raise LookupError(f'Name not found in {enum_class.__name__}: {name}')


def enum_member_lookup(enum_class: Type[Enum], key: Any) -> Any:
    """Resolve a member, its value or its (case-insensitive) name"""
    if isinstance(key, enum_class):
        return key
    try:
        return enum_member_from_value(enum_class, key)
    except LookupError:
        pass
    if isinstance(key, str):
        try:
            return enum_member_from_name(enum_class, key.strip().upper())
        except LookupError:
            pass
    expected = enum_values_list(enum_class)
    raise LookupError(f'Cannot resolve {key!r} in {enum_class.__name__}; expected one of {expected}')


def enum_values_list(enum_class: Type[Enum]) -> List[str]:
    return [str(i.value) for i in enum_class]
