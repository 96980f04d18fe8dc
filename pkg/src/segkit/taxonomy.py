"""Registry of the 104 segmented structures.

The table lives in ``data/structures.csv`` (one row per structure, rows in
canonical ID order) and is loaded once into an immutable :class:`StructureRegistry`.
"""
from __future__ import annotations

import csv
import difflib
import io
import unicodedata
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping

GROUPS = ("organ", "bone", "muscle", "vessel", "other")
N_STRUCTURES = 104
N_PARTS = 5

# Alternate spellings found in the cutoff table.
_ALIASES = {
    "iliac vena left": "iliac vein left",
    "iliac vena right": "iliac vein right",
}


class UnknownStructureError(KeyError):
    def __init__(self, key, suggestions: list[str]):
        self.key = key
        self.suggestions = suggestions
        msg = f"unknown structure {key!r}"
        if suggestions:
            msg += "; did you mean: " + ", ".join(suggestions)
        super().__init__(msg)

    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class Structure:
    id: int
    name: str
    group: str
    part: int
    cutoff_ml: float
    btcv: bool

    @property
    def slug(self) -> str:
        """Filesystem/column friendly name, e.g. ``rib_left_1``."""
        return normalize_name(self.name).replace(" ", "_")


def normalize_name(name: str) -> str:
    """Case-fold, strip accents and treat ``_`` and spaces alike."""
    ascii_name = unicodedata.normalize("NFKD", name).encode("ascii", "ignore").decode()
    key = " ".join(ascii_name.replace("_", " ").lower().split())
    return _ALIASES.get(key, key)


class StructureRegistry:
    """Read-only lookup over the structure table."""

    def __init__(self, entries: Iterable[Structure]):
        entries = tuple(sorted(entries, key=lambda s: s.id))
        by_id = {}
        by_name = {}
        for s in entries:
            if s.id in by_id:
                raise ValueError(f"duplicate structure id {s.id}")
            key = normalize_name(s.name)
            if key in by_name:
                raise ValueError(f"duplicate structure name {s.name!r}")
            if s.group not in GROUPS:
                raise ValueError(f"bad group {s.group!r} for {s.name!r}")
            if not 1 <= s.part <= N_PARTS:
                raise ValueError(f"bad part {s.part} for {s.name!r}")
            if s.cutoff_ml < 0:
                raise ValueError(f"negative cutoff for {s.name!r}")
            by_id[s.id] = s
            by_name[key] = s
        self._entries = entries
        self._by_id: Mapping[int, Structure] = MappingProxyType(by_id)
        self._by_name: Mapping[str, Structure] = MappingProxyType(by_name)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[Structure]:
        return iter(self._entries)

    def __contains__(self, key) -> bool:
        try:
            self.lookup(key)
        except UnknownStructureError:
            return False
        return True

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(s.id for s in self._entries)

    @property
    def max_id(self) -> int:
        return max(self._by_id)

    def lookup(self, key: int | str) -> Structure:
        """Return the entry for an integer ID or a (loosely spelled) name."""
        if isinstance(key, (int,)) and not isinstance(key, bool):
            try:
                return self._by_id[key]
            except KeyError:
                raise UnknownStructureError(key, []) from None
        if isinstance(key, str):
            norm = normalize_name(key)
            if norm in self._by_name:
                return self._by_name[norm]
            if norm.isdigit():
                return self.lookup(int(norm))
            close = difflib.get_close_matches(norm, list(self._by_name), n=3, cutoff=0.6)
            raise UnknownStructureError(key, [self._by_name[c].name for c in close])
        raise UnknownStructureError(key, [])

    def part_ids(self, part: int) -> tuple[int, ...]:
        return tuple(s.id for s in self._entries if s.part == part)

    def group_ids(self, group: str) -> tuple[int, ...]:
        return tuple(s.id for s in self._entries if s.group == group)

    def btcv_subset(self) -> frozenset[int]:
        return frozenset(s.id for s in self._entries if s.btcv)

    def select(self, subset: str = "all") -> tuple[Structure, ...]:
        """Entries for a named subset: ``all`` or ``btcv``."""
        if subset == "all":
            return self._entries
        if subset == "btcv":
            return tuple(s for s in self._entries if s.btcv)
        raise ValueError(f"unknown subset {subset!r} (expected 'all' or 'btcv')")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "name", "group", "part", "cutoff_ml", "btcv"])
        for s in self._entries:
            cutoff = int(s.cutoff_ml) if float(s.cutoff_ml).is_integer() else s.cutoff_ml
            w.writerow([s.id, s.name, s.group, s.part, cutoff, int(s.btcv)])
        return buf.getvalue()


def parse_registry_csv(text: str) -> StructureRegistry:
    rows = csv.DictReader(io.StringIO(text))
    return StructureRegistry(
        Structure(
            id=int(r["id"]),
            name=r["name"],
            group=r["group"],
            part=int(r["part"]),
            cutoff_ml=float(r["cutoff_ml"]),
            btcv=r["btcv"].strip() in ("1", "true", "True"),
        )
        for r in rows
    )


@lru_cache(maxsize=None)
def default_registry() -> StructureRegistry:
    text = resources.files("segkit").joinpath("data/structures.csv").read_text(encoding="utf-8")
    reg = parse_registry_csv(text)
    if len(reg) != N_STRUCTURES:
        raise RuntimeError(f"structure table has {len(reg)} rows, expected {N_STRUCTURES}")
    return reg


def lookup(key: int | str) -> Structure:
    return default_registry().lookup(key)


def btcv_subset() -> frozenset[int]:
    return default_registry().btcv_subset()
