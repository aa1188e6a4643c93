"""Per-level token vocabularies over hierarchical grid keys.

Each level maps observed cell keys to dense ids assigned in first-seen order
after the two specials (SOS=0, PAD=1). The vocabulary is closed: tokenizing a
key that was never observed raises instead of falling back to an UNK token.
The flat count (distinct finest-scale cells) is kept for compression
reporting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .grid import GridSpec, encode_point, finest_cell

SOS_ID = 0
PAD_ID = 1
NUM_SPECIALS = 2


class OutOfVocabularyError(KeyError):
    """A grid key at some level was never seen when the vocabulary was built."""

    def __init__(self, level: int, key):
        self.level = level
        self.key = key
        super().__init__(f"unseen key {key!r} at level {level}")


@dataclass(frozen=True)
class TokenizedLocation:
    """Per-level token ids for one point, plus the raw keys they came from."""

    ids: tuple[int, ...]
    raw_keys: tuple


class Vocabulary:
    """Immutable per-level key -> id maps (build once via `build_vocab`)."""

    def __init__(self, spec: GridSpec, level_maps: list[dict], flat_count: int):
        self.spec = spec
        self._maps = level_maps
        self.flat_count = flat_count

    @property
    def levels(self) -> int:
        return self.spec.levels

    def size(self, level: int) -> int:
        """Token count at a level, specials included."""
        return len(self._maps[level - 1]) + NUM_SPECIALS

    def sizes(self) -> list[int]:
        return [self.size(h) for h in range(1, self.levels + 1)]

    def total_size(self) -> int:
        """Sum of observed per-level counts, specials excluded."""
        return sum(len(m) for m in self._maps)

    def id_for(self, level: int, key) -> int:
        try:
            return self._maps[level - 1][key]
        except KeyError:
            raise OutOfVocabularyError(level, key) from None

    def sos_tuple(self) -> tuple[int, ...]:
        return tuple(SOS_ID for _ in range(self.levels))

    def to_json(self) -> dict:
        levels = []
        for level_map in self._maps:
            entries = [[list(k) if isinstance(k, tuple) else k, i] for k, i in level_map.items()]
            levels.append({"specials": {"sos": SOS_ID, "pad": PAD_ID}, "entries": entries})
        return {
            "scales": list(self.spec.scales),
            "origin": list(self.spec.origin),
            "levels": levels,
            "flat_count": self.flat_count,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Vocabulary":
        spec = GridSpec(tuple(doc["scales"]), tuple(doc["origin"]))
        maps = []
        for h, lev in enumerate(doc["levels"], start=1):
            m = {}
            for key, tid in lev["entries"]:
                m[tuple(key) if isinstance(key, list) else key] = tid
            expected = set(range(NUM_SPECIALS, NUM_SPECIALS + len(m)))
            if set(m.values()) != expected:
                raise ValueError(f"level {h} ids are not dense after specials")
            maps.append(m)
        return cls(spec, maps, int(doc["flat_count"]))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))


def build_vocab(points, spec: GridSpec) -> Vocabulary:
    """Scan (x, y) points in projected meters and register every key seen.

    Ids follow first-seen order starting at 2 (after SOS=0, PAD=1), so the
    same corpus in the same order reproduces the same ids exactly.
    """
    maps: list[dict] = [{} for _ in range(spec.levels)]
    flat_cells = set()
    empty = True
    for x, y in points:
        empty = False
        for level_map, key in zip(maps, encode_point(x, y, spec)):
            if key not in level_map:
                level_map[key] = NUM_SPECIALS + len(level_map)
        flat_cells.add(finest_cell(x, y, spec))
    if empty:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(spec, maps, len(flat_cells))


def tokenize(x: float, y: float, vocab: Vocabulary) -> TokenizedLocation:
    """Encode a projected point and map each level's key to its token id."""
    keys = encode_point(x, y, vocab.spec)
    ids = tuple(vocab.id_for(h, key) for h, key in enumerate(keys, start=1))
    return TokenizedLocation(ids=ids, raw_keys=tuple(keys))
