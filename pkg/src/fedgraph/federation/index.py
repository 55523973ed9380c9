"""Server-assigned mapping from public node ID to shared weight-matrix row."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

from ..errors import DataError


@dataclass(frozen=True)
class GlobalIndex:
    """Bijection node ID -> row in 0..N-1; the same ID always shares one row
    no matter how many parties hold it. Rows follow sorted ID order, so a
    single client's rows coincide with its local node order."""

    id_to_row: Mapping[str, int]

    def __post_init__(self) -> None:
        rows = sorted(self.id_to_row.values())
        if rows != list(range(len(rows))):
            raise DataError("row indices must be a bijection onto 0..N-1")

    @classmethod
    def build(cls, node_id_sets: Iterable[Iterable[str]]) -> "GlobalIndex":
        union: set[str] = set()
        for ids in node_id_sets:
            union |= set(ids)
        if not union:
            raise DataError("no node IDs registered")
        return cls(id_to_row={node: row for row, node in enumerate(sorted(union))})

    @property
    def n_rows(self) -> int:
        return len(self.id_to_row)

    def __getitem__(self, node_id: str) -> int:
        return self.id_to_row[node_id]

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.id_to_row

    def __len__(self) -> int:
        return len(self.id_to_row)

    def __iter__(self) -> Iterator[str]:
        return iter(self.id_to_row)

    def rows_for(self, node_ids: Iterable[str]) -> list[int]:
        return [self.id_to_row[n] for n in node_ids]
