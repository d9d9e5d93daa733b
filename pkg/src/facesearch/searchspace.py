"""Discretized joint search space over the nine searched hyper-parameters.

The space is an ordered list of value grids, one grid per parameter, in the
generation order data cleaning -> loss design -> architecture:

    tau_intra, tau_inter, m1, m2, m3, s_p, s_n, depth_ratio, width_ratio

A candidate is addressed by a token sequence, one index per grid.  Grids are
stored as explicit value tuples (not min/max/step triples) so serialized
spaces are bit-exact across platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

PARAM_NAMES = (
    "tau_intra",
    "tau_inter",
    "m1",
    "m2",
    "m3",
    "s_p",
    "s_n",
    "depth_ratio",
    "width_ratio",
)

SCHEMA_VERSION = 1

# Tolerance for matching a combination value back to a grid entry.
GRID_MATCH_ATOL = 1e-9


@dataclass(frozen=True)
class Combination:
    """One joint assignment of all nine searched hyper-parameters."""

    tau_intra: float
    tau_inter: float
    m1: float
    m2: float
    m3: float
    s_p: float
    s_n: float
    depth_ratio: float
    width_ratio: float

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, float]) -> "Combination":
        return cls(**{name: float(d[name]) for name in PARAM_NAMES})


@dataclass(frozen=True)
class SearchSpace:
    """Ordered per-parameter value grids; token i indexes ``grids[i]``."""

    grids: tuple[tuple[float, ...], ...]

    def __post_init__(self) -> None:
        if len(self.grids) != len(PARAM_NAMES):
            raise ValueError(f"expected {len(PARAM_NAMES)} grids, got {len(self.grids)}")
        for name, grid in zip(PARAM_NAMES, self.grids):
            if len(grid) == 0:
                raise ValueError(f"grid for {name} is empty")
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ValueError(f"grid for {name} is not strictly increasing")

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(g) for g in self.grids)

    def cardinality(self) -> int:
        total = 1
        for g in self.grids:
            total *= len(g)
        return total

    def decode(self, tokens: list[int] | tuple[int, ...]) -> Combination:
        """Map a token sequence to the combination it addresses."""
        if len(tokens) != len(self.grids):
            raise ValueError(f"expected {len(self.grids)} tokens, got {len(tokens)}")
        values = []
        for name, grid, tok in zip(PARAM_NAMES, self.grids, tokens):
            tok = int(tok)
            if not 0 <= tok < len(grid):
                raise ValueError(f"token {tok} out of range for {name} (size {len(grid)})")
            values.append(grid[tok])
        return Combination(*values)

    def encode(self, combination: Combination) -> tuple[int, ...]:
        """Inverse of :meth:`decode`; every field must sit on its grid."""
        tokens = []
        for name, grid in zip(PARAM_NAMES, self.grids):
            value = getattr(combination, name)
            hit = [i for i, g in enumerate(grid) if abs(g - value) <= GRID_MATCH_ATOL]
            if not hit:
                raise ValueError(f"value {value!r} for {name} is not on the grid")
            tokens.append(hit[0])
        return tuple(tokens)

    def to_json(self) -> str:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "grids": {name: list(grid) for name, grid in zip(PARAM_NAMES, self.grids)},
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SearchSpace":
        payload = json.loads(text)
        version = payload.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported search-space schema version: {version!r}")
        grids = payload["grids"]
        missing = [n for n in PARAM_NAMES if n not in grids]
        if missing:
            raise ValueError(f"search-space json missing grids: {missing}")
        return cls(tuple(tuple(float(v) for v in grids[n]) for n in PARAM_NAMES))


def _stepped(lo: float, hi: float, step: float) -> tuple[float, ...]:
    # round() clears the accumulated binary error so grid values compare
    # equal to their decimal literals
    n = int(round((hi - lo) / step)) + 1
    return tuple(round(lo + i * step, 10) for i in range(n))


def default_space() -> SearchSpace:
    """Default grids; ratio grids carry two extra known-good points."""
    ratio = _stepped(0.50, 2.00, 0.125)
    return SearchSpace(
        (
            _stepped(0.10, 0.50, 0.02),
            _stepped(0.50, 0.90, 0.02),
            _stepped(0.90, 1.30, 0.05),
            _stepped(0.00, 0.50, 0.02),
            _stepped(0.00, 0.40, 0.05),
            (16.0, 24.0, 32.0, 40.0, 48.0, 64.0),
            (16.0, 24.0, 32.0, 40.0, 48.0, 64.0),
            tuple(sorted(ratio + (1.22, 1.47))),
            tuple(sorted(ratio + (0.84, 0.91))),
        )
    )
