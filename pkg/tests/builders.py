"""Tiny hand-built transactions for unit tests."""

from __future__ import annotations

from chaintrace.ledger import (
    DEFAULT_CHAINS, JoinSplit, Ledger, LedgerTx, TxIn, TxOut, get_chain,
)

ZEC = DEFAULT_CHAINS["ZEC"]
BTC = DEFAULT_CHAINS["BTC"]
DASH = DEFAULT_CHAINS["DASH"]
COIN = 10**8
T0 = 1_500_000_000


def ts(h: int, interval: int = 150) -> int:
    return T0 + interval * h


def coinbase(txid: str, h: int, outs, chain=ZEC) -> LedgerTx:
    return LedgerTx(txid, chain, h, ts(h), True, (), tuple(TxOut(a, v) for a, v in outs))


def spend(txid: str, h: int, ins, outs, chain=BTC) -> LedgerTx:
    """``ins`` are (src_txid, idx, addr, value)."""
    return LedgerTx(txid, chain, h, ts(h), False, tuple(TxIn(*i) for i in ins),
                    tuple(TxOut(a, v) for a, v in outs))


def deposit(txid: str, h: int, addr: str, value: int, src=None) -> LedgerTx:
    """t-to-z paying ``value`` into the pool from ``addr``; inputs cover value exactly."""
    src = src or (f"cb_{txid}", 0)
    return LedgerTx(txid, ZEC, h, ts(h), False, (TxIn(src[0], src[1], addr, value),), (),
                    (JoinSplit(zin=(TxOut(addr, value),)),))


def withdrawal(txid: str, h: int, outs, fee: int = 0) -> LedgerTx:
    zout = tuple(TxOut(a, v) for a, v in outs)
    if fee:
        zout += (TxOut(None, fee),)
    return LedgerTx(txid, ZEC, h, ts(h), False, (), tuple(TxOut(a, v) for a, v in outs),
                    (JoinSplit(zout=zout),))


def ledger(txs, chain=ZEC) -> Ledger:
    return Ledger(get_chain(chain.symbol), sorted(txs, key=lambda t: t.height))
