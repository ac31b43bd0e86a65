"""Dash PrivateSend / CoinJoin shape detection."""

from __future__ import annotations

from collections import Counter
from typing import Iterable

from .ledger import DASH, LedgerTx

# 0.01, 0.1, 1 and 10 DASH in duffs
DEFAULT_DENOMINATIONS = frozenset(DASH.coins(d) for d in ("0.01", "0.1", "1", "10"))


def detect_coinjoin(tx: LedgerTx, denominations: Iterable[int] = DEFAULT_DENOMINATIONS) -> bool:
    """True for a mixing-shaped tx.

    Needs at least three inputs and outputs that all carry one standard
    denomination, except for at most a single odd output (which soaks up
    the fee). Input order and output order do not matter.
    """
    if len(tx.vin) < 3 or not tx.vout:
        return False
    denoms = frozenset(denominations)
    counts = Counter(o.value for o in tx.vout)
    standard = [v for v in counts if v in denoms]
    if len(standard) != 1:
        return False
    return len(tx.vout) - counts[standard[0]] <= 1
