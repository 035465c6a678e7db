"""Chemical domain types: elements, canvas, bag, state, action.

All types are immutable value objects. Positions are stored in read-only
numpy arrays so a canvas can be shared between rollout workers freely.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from molbuild.errors import ElementNotInBag, InvalidFocal, ParseError

SYMBOLS = (
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar",
)
ATOMIC_NUMBERS = {s: i + 1 for i, s in enumerate(SYMBOLS)}
DEFAULT_E_MAX = 10


@dataclass(frozen=True, order=True)
class Element:
    atomic_number: int

    def __post_init__(self):
        if not 1 <= self.atomic_number <= len(SYMBOLS):
            raise ValueError(f"unsupported atomic number {self.atomic_number}")

    @property
    def symbol(self) -> str:
        return SYMBOLS[self.atomic_number - 1]

    @classmethod
    def from_symbol(cls, symbol: str) -> Element:
        return cls(atomic_number_of(symbol))

    def __str__(self) -> str:
        return self.symbol


def atomic_number_of(symbol: str) -> int:
    """Atomic number for a symbol, case-insensitive (``"h"`` is hydrogen)."""
    key = symbol.strip().capitalize()
    try:
        return ATOMIC_NUMBERS[key]
    except KeyError:
        raise ParseError(f"unknown element symbol {symbol!r}") from None


def _as_z(element) -> int:
    if isinstance(element, Element):
        return element.atomic_number
    if isinstance(element, str):
        return atomic_number_of(element)
    return int(element)


class Canvas:
    """Ordered atoms (atomic number, Cartesian position in Angstrom).

    Index 0 is the first atom placed (or the first atom of the initial canvas).
    """

    __slots__ = ("numbers", "positions")

    def __init__(self, numbers: Iterable = (), positions=None):
        numbers = tuple(_as_z(z) for z in numbers)
        if positions is None:
            positions = np.zeros((0, 3))
        pos = np.array(positions, dtype=np.float64).reshape(-1, 3)
        if pos.shape[0] != len(numbers):
            raise ValueError("numbers and positions differ in length")
        if not np.all(np.isfinite(pos)):
            raise ValueError("canvas positions must be finite")
        pos.flags.writeable = False
        object.__setattr__(self, "numbers", numbers)
        object.__setattr__(self, "positions", pos)

    def __setattr__(self, name, value):
        raise AttributeError("Canvas is immutable")

    @classmethod
    def from_atoms(cls, atoms: Iterable[tuple]) -> Canvas:
        atoms = list(atoms)
        return cls([a[0] for a in atoms], [a[1] for a in atoms] or None)

    def __len__(self) -> int:
        return len(self.numbers)

    def __iter__(self) -> Iterator[tuple[Element, np.ndarray]]:
        return iter(self.atoms)

    @property
    def atoms(self) -> list[tuple[Element, np.ndarray]]:
        return [(Element(z), p) for z, p in zip(self.numbers, self.positions)]

    @property
    def symbols(self) -> list[str]:
        return [SYMBOLS[z - 1] for z in self.numbers]

    def append(self, element, position) -> Canvas:
        pos = np.vstack([self.positions, np.asarray(position, dtype=np.float64).reshape(1, 3)])
        return Canvas(self.numbers + (_as_z(element),), pos)

    def transformed(self, rotation: np.ndarray, translation=(0.0, 0.0, 0.0)) -> Canvas:
        return Canvas(self.numbers, self.positions @ np.asarray(rotation).T + np.asarray(translation))

    def permuted(self, order: Sequence[int]) -> Canvas:
        order = list(order)
        return Canvas([self.numbers[i] for i in order], self.positions[order])

    def centered(self) -> Canvas:
        if len(self) == 0:
            return self
        return Canvas(self.numbers, self.positions - self.positions.mean(axis=0))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Canvas):
            return NotImplemented
        return self.numbers == other.numbers and np.array_equal(self.positions, other.positions)

    def __hash__(self):
        return hash((self.numbers, self.positions.tobytes()))

    def __repr__(self) -> str:
        atoms = ", ".join(f"{s}@{tuple(np.round(p, 3))}" for s, p in zip(self.symbols, self.positions))
        return f"Canvas([{atoms}])"


_FORMULA_TOKEN = re.compile(r"([A-Z][a-z]?)(\d*)")


class Bag:
    """Multiset of elements still to be placed. Equality is by counts."""

    __slots__ = ("_counts",)

    def __init__(self, counts: dict | Iterable[tuple] = ()):
        items = counts.items() if isinstance(counts, dict) else counts
        merged: dict[int, int] = {}
        for element, m in items:
            m = int(m)
            if m < 0:
                raise ValueError("bag multiplicities must be non-negative")
            z = _as_z(element)
            merged[z] = merged.get(z, 0) + m
        object.__setattr__(self, "_counts", tuple(sorted((z, m) for z, m in merged.items() if m > 0)))

    def __setattr__(self, name, value):
        raise AttributeError("Bag is immutable")

    @classmethod
    def from_formula(cls, formula: str) -> Bag:
        return bag_from_formula(formula)

    @classmethod
    def from_vector(cls, vector) -> Bag:
        return cls({z + 1: int(m) for z, m in enumerate(vector)})

    @property
    def counts(self) -> dict[Element, int]:
        return {Element(z): m for z, m in self._counts}

    def count(self, element) -> int:
        z = _as_z(element)
        for zz, m in self._counts:
            if zz == z:
                return m
        return 0

    def __contains__(self, element) -> bool:
        return self.count(element) > 0

    @property
    def total(self) -> int:
        return sum(m for _, m in self._counts)

    def __len__(self) -> int:
        return self.total

    @property
    def numbers(self) -> list[int]:
        """Atomic numbers in the bag, repeated by multiplicity."""
        return [z for z, m in self._counts for _ in range(m)]

    def vector(self, e_max: int = DEFAULT_E_MAX) -> np.ndarray:
        v = np.zeros(e_max)
        for z, m in self._counts:
            if z > e_max:
                raise ValueError(f"element Z={z} exceeds e_max={e_max}")
            v[z - 1] = m
        return v

    def remove(self, element) -> Bag:
        z = _as_z(element)
        if self.count(z) < 1:
            raise ElementNotInBag(f"{SYMBOLS[z - 1]} is not in bag {self.formula or '{}'}")
        return Bag([(zz, m - (zz == z)) for zz, m in self._counts])

    def add(self, other: Bag) -> Bag:
        return Bag(list(self._counts) + list(other._counts))

    @property
    def formula(self) -> str:
        """Hill-ordered formula (C, H first when carbon is present)."""
        counts = {SYMBOLS[z - 1]: m for z, m in self._counts}
        if "C" in counts:
            order = ["C"] + (["H"] if "H" in counts else []) + sorted(k for k in counts if k not in ("C", "H"))
        else:
            order = sorted(counts)
        return "".join(s + (str(counts[s]) if counts[s] > 1 else "") for s in order)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Bag):
            return NotImplemented
        return self._counts == other._counts

    def __hash__(self):
        return hash(self._counts)

    def __repr__(self) -> str:
        inner = ", ".join(f"{SYMBOLS[z - 1]}:{m}" for z, m in self._counts)
        return f"Bag({{{inner}}})"


def bag_from_formula(formula: str) -> Bag:
    """Parse a formula such as ``"C2H2O2"`` into a bag.

    Symbols may repeat (``"CH3OH"`` gives four hydrogens); a count of zero
    or an unknown symbol raises :class:`ParseError`.
    """
    text = formula.strip()
    if not text:
        raise ParseError("empty formula")
    pos = 0
    counts: dict[int, int] = {}
    for match in _FORMULA_TOKEN.finditer(text):
        if match.start() != pos:
            raise ParseError(f"cannot parse {text[pos:match.start()]!r} in formula {formula!r}")
        symbol, digits = match.groups()
        if symbol not in ATOMIC_NUMBERS:
            raise ParseError(f"unknown element symbol {symbol!r} in formula {formula!r}")
        m = int(digits) if digits else 1
        if m == 0:
            raise ParseError(f"zero count for {symbol} in formula {formula!r}")
        z = ATOMIC_NUMBERS[symbol]
        counts[z] = counts.get(z, 0) + m
        pos = match.end()
    if pos != len(text):
        raise ParseError(f"trailing characters {text[pos:]!r} in formula {formula!r}")
    return Bag(counts)


@dataclass(frozen=True)
class State:
    canvas: Canvas
    bag: Bag

    @property
    def terminal(self) -> bool:
        return self.bag.total == 0


@dataclass(frozen=True)
class Action:
    """Focal atom, element and internal coordinates of the next atom.

    ``angle`` and ``abs_dihedral`` are ignored while the canvas holds fewer
    than two or three atoms; ``kappa`` is the dihedral sign (+1 or -1).
    """

    focal: int
    element: int
    distance: float = 0.0
    angle: float = 0.0
    abs_dihedral: float = 0.0
    kappa: int = 1

    def __post_init__(self):
        object.__setattr__(self, "element", _as_z(self.element))


def transition(state: State, action: Action, position) -> State:
    """Place ``action.element`` at ``position``; inputs are left untouched."""
    n = len(state.canvas)
    if n > 0 and not 0 <= action.focal < n:
        raise InvalidFocal(f"focal index {action.focal} outside canvas of {n} atoms")
    bag = state.bag.remove(action.element)
    position = np.asarray(position, dtype=np.float64)
    if position.shape != (3,) or not np.all(np.isfinite(position)):
        raise ValueError("resolved position must be a finite 3-vector")
    return State(state.canvas.append(action.element, position), bag)
