"""Bucket ordering and the partition-locking policy.

Training visits buckets so that (except for the very first bucket) every
bucket shares at least one partition with a previously trained one; that
anchor keeps all partitions aligned in one embedding space.  The sequential
traversal realizing this is the inside-out order: expanding shells
k = 0..P-1, where shell k contains the buckets with max(src, dst) == k,
emitted as (k,0),(0,k),(k,1),(1,k),...,(k,k-1),(k-1,k),(k,k).  Consecutive
buckets inside a shell differ by one partition, minimizing swaps.

For concurrent training the same constraints become a locking policy:
a bucket is grantable when its partitions are not locked by another worker
and it shares a partition with the initialized (previously trained) set
(the sole exception being the first grant ever).  A worker may briefly hold
its previous bucket while being granted the next one so it can hand the old
partitions off before releasing -- grants never overlap across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

Bucket = tuple[int, int]

RETRY_HINT_S = 1.0  # advisory wait when no bucket is grantable


def inside_out_order(n_src: int, n_dst: int | None = None) -> list[Bucket]:
    """Deterministic bucket order over an (n_src x n_dst) grid.

    With a square grid this is the shell order described above; rectangular
    grids (unpartitioned side) degenerate to the natural column/row walk.
    """
    if n_dst is None:
        n_dst = n_src
    if n_src < 1 or n_dst < 1:
        raise ValueError("grid dimensions must be >= 1")
    order: list[Bucket] = []
    for k in range(max(n_src, n_dst)):
        for m in range(k):
            if k < n_src and m < n_dst:
                order.append((k, m))
            if m < n_src and k < n_dst:
                order.append((m, k))
        if k < n_src and k < n_dst:
            order.append((k, k))
    return order


def bucket_parts(b: Bucket) -> set[int]:
    return {b[0], b[1]}


@dataclass
class SchedulerState:
    """Lock-server brain; all mutation happens behind one exclusive boundary."""

    n_src: int
    n_dst: int
    order: list[Bucket] = field(init=False)
    completed: set[Bucket] = field(default_factory=set)
    granted: dict[Bucket, int] = field(default_factory=dict)  # bucket -> rank
    initialized: set[int] = field(default_factory=set)
    epoch: int = 0

    def __post_init__(self):
        self.order = inside_out_order(self.n_src, self.n_dst)

    @property
    def num_buckets(self) -> int:
        return len(self.order)

    def locked_parts(self, exclude_rank: int | None = None) -> set[int]:
        parts: set[int] = set()
        for b, rank in self.granted.items():
            if exclude_rank is not None and rank == exclude_rank:
                continue
            parts |= bucket_parts(b)
        return parts

    def epoch_complete(self) -> bool:
        return len(self.completed) == self.num_buckets

    def acquire(self, rank: int, held: set[int] | None = None) -> Bucket | None:
        """Grant a bucket to `rank`, preferring reuse of its held partitions.

        Preference order: both partitions held, one held, any.  A bucket is
        eligible when it is uncompleted, ungranted, does not intersect other
        ranks' locks, and shares a partition with the initialized set.  The
        one exception: when nothing is initialized and nothing is in flight
        (cold start, or every earlier grant was abandoned untrained), an
        unanchored bucket may be granted so training can begin.  Returns
        None when nothing is eligible; retry after RETRY_HINT_S.
        """
        held = held or set()
        others = self.locked_parts(exclude_rank=rank)
        cold_start = not self.initialized and not self.granted
        best: Bucket | None = None
        best_overlap = -1
        for b in self.order:
            if b in self.completed or b in self.granted:
                continue
            parts = bucket_parts(b)
            if parts & others:
                continue
            if not cold_start and not (parts & self.initialized):
                continue
            overlap = len(parts & held)
            if overlap > best_overlap:
                best, best_overlap = b, overlap
                if overlap == 2:
                    break
        if best is not None:
            self.granted[best] = rank
        return best

    def release(self, bucket: Bucket, trained: bool = True) -> None:
        """Unlock a granted bucket; when trained, mark complete and initialized."""
        self.granted.pop(bucket, None)
        if trained:
            self.completed.add(bucket)
            self.initialized |= bucket_parts(bucket)

    def reset_epoch(self) -> None:
        """New epoch: completed buckets reset, initialized partitions persist."""
        self.completed.clear()
        self.epoch += 1
