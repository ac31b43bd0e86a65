"""Disjoint-set forest over arbitrary hashable keys.

Keys are interned to dense integer slots so the hot loops work on plain
lists. Union by size, path halving on find.
"""

from __future__ import annotations

from typing import Generic, Hashable, Iterable, Iterator, TypeVar

K = TypeVar("K", bound=Hashable)


class DisjointSet(Generic[K]):
    __slots__ = ("_index", "_keys", "_parent", "_size")

    def __init__(self, keys: Iterable[K] = ()):
        self._index: dict[K, int] = {}
        self._keys: list[K] = []
        self._parent: list[int] = []
        self._size: list[int] = []
        for k in keys:
            self.add(k)

    def __len__(self) -> int:
        return len(self._keys)

    def __contains__(self, key) -> bool:
        return key in self._index

    def __iter__(self) -> Iterator[K]:
        return iter(self._keys)

    def add(self, key: K) -> int:
        i = self._index.get(key)
        if i is None:
            i = len(self._keys)
            self._index[key] = i
            self._keys.append(key)
            self._parent.append(i)
            self._size.append(1)
        return i

    def _find(self, i: int) -> int:
        parent = self._parent
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def find(self, key: K) -> K:
        return self._keys[self._find(self._index[key])]

    def _union(self, a: int, b: int) -> int:
        ra, rb = self._find(a), self._find(b)
        if ra == rb:
            return ra
        size = self._size
        if size[ra] < size[rb]:
            ra, rb = rb, ra
        self._parent[rb] = ra
        size[ra] += size[rb]
        return ra

    def union(self, a: K, b: K) -> K:
        return self._keys[self._union(self.add(a), self.add(b))]

    def union_all(self, keys: Iterable[K]) -> None:
        """Merge every key in ``keys`` into one set (adding unseen keys)."""
        it = iter(keys)
        try:
            first = self.add(next(it))
        except StopIteration:
            return
        for k in it:
            first = self._union(first, self.add(k))

    def connected(self, a: K, b: K) -> bool:
        return self._find(self._index[a]) == self._find(self._index[b])

    def set_size(self, key: K) -> int:
        return self._size[self._find(self._index[key])]

    def groups(self) -> list[list[K]]:
        """All sets, each listed in key-insertion order."""
        by_root: dict[int, list[K]] = {}
        find = self._find
        for i, k in enumerate(self._keys):
            by_root.setdefault(find(i), []).append(k)
        return list(by_root.values())
