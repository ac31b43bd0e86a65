"""Synthetic worlds with ground truth, and precision/recall scoring.

A world is planned first and built second. Planning decides every
transaction (height, inputs, outputs) and assigns its txid, so later
transactions can reference earlier outputs; building sorts each chain's
plan by (height, plan order), prepends one coinbase per block, and runs the
result through normal ledger validation.

Transparent spends are funded by dedicated outputs of a genesis allocation
at height 0, one output per planned spend, so no transaction needs change
and every value is exactly what the plan says.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional

import orjson

from .cluster import TagCategory, TagMap
from .errors import InputError
from .evidence import LinkEvidence, LinkKind, read_evidence, write_evidence
from .ledger import (
    AccountXfer, Address, ChainId, JoinSplit, Ledger, LedgerTx, TxIn, TxOut,
    get_chain, load_chain_dir, write_chain_dir,
)
from .xchain import (
    DEFAULT_WINDOWS, XRT_TOL, DictOracle, ShiftRecord, ShiftStatus, Status,
    load_oracle, load_shifts, save_oracle, save_shifts, within,
)

log = logging.getLogger(__name__)

T0 = 1483228800  # 2017-01-01T00:00:00Z
BLOCK_INTERVAL = {"BTC": 600, "BCH": 600, "LTC": 150, "DOGE": 60, "ZEC": 150, "DASH": 150, "ETH": 60, "ETC": 60}
USD_PRICE = {"BTC": 1000, "BCH": 300, "LTC": 5, "DOGE": Fraction(1, 500), "ZEC": 50, "DASH": 80, "ETH": 10, "ETC": 2}


def substream(seed: int, label: str) -> random.Random:
    """Independent RNG per label; adding a label never shifts another's draws."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


# -- planning ---------------------------------------------------------------------------

@dataclass(eq=False)
class _Alloc:
    addr: str
    value: int


@dataclass
class _Spec:
    txid: str
    height: int
    seq: int
    vin: list = field(default_factory=list)  # _Alloc or TxIn
    vout: list = field(default_factory=list)
    joinsplits: list = field(default_factory=list)
    xfer: Optional[AccountXfer] = None


class ChainPlan:
    """Planned transactions for one chain, built into a validated Ledger."""

    def __init__(self, chain: ChainId, seed: int, interval: int, t0: int = T0):
        self.chain = chain
        self.sym = chain.symbol
        self.seed = seed
        self.interval = interval
        self.t0 = t0
        self.fee = 10 ** max(chain.decimals - 4, 0)
        self.specs: list[_Spec] = []
        self.coinbase_outs: dict[int, list[TxOut]] = {}
        self.horizon = 0
        self.cb_height: dict[str, int] = {}
        self._n = 0

    # heights and time
    def ts(self, h: int) -> int:
        return self.t0 + h * self.interval

    def closest(self, t: int) -> int:
        """Same answer Ledger.closest_block gives once every block exists (ties go low)."""
        d = t - self.t0
        if d <= 0:
            return 0
        return (2 * d + self.interval - 1) // (2 * self.interval)

    def need(self, h: int) -> None:
        self.horizon = max(self.horizon, h)

    def txid(self, tag: str = "") -> str:
        self._n += 1
        return hashlib.sha256(f"{self.seed}:{self.sym}:{self._n}:{tag}".encode()).hexdigest()

    def coinbase_txid(self, h: int) -> str:
        txid = hashlib.sha256(f"{self.seed}:{self.sym}:coinbase:{h}".encode()).hexdigest()
        self.cb_height[txid] = h
        return txid

    # planning primitives
    def alloc(self, addr: str, value: int) -> _Alloc:
        return _Alloc(addr, value)

    def add(self, height: int, vin=(), vout=(), joinsplits=(), xfer=None) -> str:
        if height < 0:
            raise InputError("negative height in plan")
        spec = _Spec(self.txid(), height, len(self.specs), list(vin), list(vout), list(joinsplits), xfer)
        self.specs.append(spec)
        self.need(height)
        return spec.txid

    def pay(self, height: int, frm: str, outs: list[tuple[str, int]]) -> str:
        """Transparent payment funded by one dedicated genesis coin."""
        if not self.chain.is_utxo:
            (to, v), = outs
            return self.add(height, xfer=AccountXfer(frm, to, v, self.fee))
        total = sum(v for _, v in outs) + self.fee
        return self.add(height, vin=[self.alloc(frm, total)], vout=[TxOut(a, v) for a, v in outs])

    def pay_multi(self, height: int, frms: list[str], values: list[int], outs: list[tuple[str, int]]) -> str:
        """Co-spend one dedicated coin from each of ``frms``; fee comes out of the last."""
        vin = [self.alloc(a, v) for a, v in zip(frms, values)]
        return self.add(height, vin=vin, vout=[TxOut(a, v) for a, v in outs])

    def deposit(self, height: int, frm: str, value: int, spend: list[TxIn] | None = None) -> str:
        """t-to-z of exactly ``value`` from ``frm``, no transparent change."""
        if spend is None:
            vin = [self.alloc(frm, value + self.fee)]
        else:
            vin = list(spend)
            if sum(i.value for i in vin) != value + self.fee:
                raise InputError("deposit inputs do not cover value + fee")
        return self.add(height, vin=vin, joinsplits=[JoinSplit((TxOut(frm, value),), ())])

    def withdraw(self, height: int, outs: list[tuple[str, int]]) -> str:
        """z-to-t paying ``outs``; the fee is the unassigned zOut entry."""
        zout = tuple(TxOut(a, v) for a, v in outs) + (TxOut(None, self.fee),)
        return self.add(height, vout=[TxOut(a, v) for a, v in outs], joinsplits=[JoinSplit((), zout)])

    def pool_outflow(self) -> int:
        return sum(z.value for s in self.specs for js in s.joinsplits for z in js.zout)

    def pool_inflow(self) -> int:
        return sum(z.value for s in self.specs for js in s.joinsplits for z in js.zin)

    # building
    def build(self) -> Ledger:
        chain, sym = self.chain, self.sym
        genesis: list[LedgerTx] = []
        coin_of: dict[int, tuple[str, int]] = {}
        requests = [i for s in self.specs for i in s.vin if isinstance(i, _Alloc)]
        chunk = 2000
        outs_all = [TxOut(i.addr, i.value) for i in requests]
        gen_outs = list(self.coinbase_outs.get(0, [TxOut(f"{sym.lower()}_miner", 1)]))
        for k in range(0, max(len(outs_all), 1), chunk):
            part = outs_all[k:k + chunk]
            txid = self.coinbase_txid(0) if k == 0 else hashlib.sha256(f"{self.seed}:{sym}:genesis:{k}".encode()).hexdigest()
            base = gen_outs if k == 0 else []
            vout = tuple(base) + tuple(part)
            for j, _ in enumerate(part):
                coin_of[k + j] = (txid, len(base) + j)
            if chain.is_utxo:
                genesis.append(LedgerTx(txid, chain, 0, self.ts(0), True, (), vout))
            elif k == 0:
                genesis.append(LedgerTx(txid, chain, 0, self.ts(0), True))
        req_index = {id(i): n for n, i in enumerate(requests)}

        by_height: dict[int, list[_Spec]] = defaultdict(list)
        for s in self.specs:
            by_height[s.height].append(s)
        txs: list[LedgerTx] = list(genesis)
        for h in range(0, self.horizon + 1):
            if h > 0:
                outs = self.coinbase_outs.get(h)
                if outs is None:
                    outs = [TxOut(f"{sym.lower()}_miner", 10 ** chain.decimals)] if chain.is_utxo else []
                txs.append(LedgerTx(self.coinbase_txid(h), chain, h, self.ts(h), True, (), tuple(outs)))
            for s in sorted(by_height.get(h, ()), key=lambda s: s.seq):
                vin = []
                for i in s.vin:
                    if isinstance(i, TxIn):
                        vin.append(i)
                    else:
                        txid, idx = coin_of[req_index[id(i)]]
                        vin.append(TxIn(txid, idx, i.addr, i.value))
                txs.append(LedgerTx(s.txid, chain, h, self.ts(h), False, tuple(vin), tuple(s.vout),
                                    tuple(s.joinsplits), s.xfer))
        return Ledger(chain, txs)


# -- world -----------------------------------------------------------------------------------

@dataclass
class GenParams:
    chains: tuple = ("BTC", "LTC", "ZEC", "DASH", "ETH")
    n_entities: int = 40
    n_shifts: int = 200
    shift_gap: int = 60  # mean seconds between base shifts
    collision_rate: float = 0.0
    oracle_coverage: float = 1.0
    stale_oracle_rate: float = 0.5  # share of collision decoys answered with a stale record
    rate_jitter: float = 0.3  # share of payouts whose realised rate is off the snapshot by 3%
    uturn_rate: float = 0.0
    xrt_share: float = 0.5  # of injected U-turns, those inside the round-trip tolerance
    uturn_tiers: tuple = (Fraction(1, 3), Fraction(1, 3), Fraction(1, 3))  # BASIC-only, ADDR, UTXO
    bot_bursts: int = 0
    bot_decoys: int = 0
    pool_shares: Optional[tuple] = None  # target value shares of the three pool/shift interactions
    noise_txs: int = 100  # per chain
    founder_schedule: bool = False
    founder_withdrawals: int = 0
    founder_near_misses: int = 16
    miner_payouts: int = 0
    miner_fanout: tuple = (101, 160)
    miner_decoys: int = 0
    round_trips: int = 0
    duplicate_values: int = 0
    fm_share: Optional[float] = None
    zec_blocks: int = 0
    value_decimals: int = 4

    def validate(self) -> None:
        rates = ("collision_rate", "oracle_coverage", "stale_oracle_rate", "rate_jitter",
                 "uturn_rate", "xrt_share")
        for name in rates:
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise InputError(f"{name}={v} not in [0, 1]", "INVALID_PARAMS")
        if self.fm_share is not None and not 0 < self.fm_share < 1:
            raise InputError("fm_share must be in (0, 1)", "INVALID_PARAMS")
        ints = ("n_entities", "n_shifts", "bot_bursts", "noise_txs", "founder_withdrawals",
                "miner_payouts", "round_trips", "duplicate_values", "zec_blocks", "bot_decoys",
                "miner_decoys", "founder_near_misses")
        for name in ints:
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be >= 0", "INVALID_PARAMS")
        if self.n_entities < 1:
            raise InputError("need at least one entity", "INVALID_PARAMS")
        if self.shift_gap < 1:
            raise InputError("shift_gap must be >= 1", "INVALID_PARAMS")
        for c in self.chains:
            if c not in BLOCK_INTERVAL:
                raise InputError(f"no synthetic profile for chain {c}", "INVALID_PARAMS")
        if self.n_shifts and len(self.chains) < 2:
            raise InputError("shifts need two chains", "INVALID_PARAMS")
        needs_zec = (self.founder_schedule or self.founder_withdrawals or self.miner_payouts
                     or self.round_trips or self.pool_shares)
        if needs_zec and "ZEC" not in self.chains:
            raise InputError("pool features need the ZEC chain", "INVALID_PARAMS")
        if len(self.uturn_tiers) != 3 or sum(Fraction(x) for x in self.uturn_tiers) != 1:
            raise InputError("uturn_tiers must be three shares summing to 1", "INVALID_PARAMS")

    def to_json(self) -> dict:
        d = asdict(self)
        d["uturn_tiers"] = [str(Fraction(x)) for x in self.uturn_tiers]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "GenParams":
        d = dict(d)
        for k in ("chains", "miner_fanout"):
            if k in d:
                d[k] = tuple(d[k])
        if "uturn_tiers" in d:
            d["uturn_tiers"] = tuple(Fraction(x) for x in d["uturn_tiers"])
        if d.get("pool_shares") is not None:
            d["pool_shares"] = tuple(d["pool_shares"])
        return cls(**d)


@dataclass
class SyntheticWorld:
    seed: int
    params: GenParams
    entities: dict[str, dict[str, list[str]]]
    ledgers: dict[str, Ledger]
    shifts: list[ShiftRecord]
    oracle: DictOracle
    truth: list[LinkEvidence]
    tags: TagMap = field(default_factory=TagMap)
    tx_owner: dict[str, str] = field(default_factory=dict)  # "SYM:txid" -> entity
    extra: dict = field(default_factory=dict)

    def truth_of(self, *kinds: LinkKind) -> list[LinkEvidence]:
        ks = {LinkKind(k) for k in kinds}
        return [t for t in self.truth if t.kind in ks]


class _World:
    """Mutable planning state shared by the section planners."""

    def __init__(self, p: GenParams, seed: int):
        self.p, self.seed = p, seed
        self.plans = {c: ChainPlan(get_chain(c), seed, BLOCK_INTERVAL[c]) for c in p.chains}
        self.entities: dict[str, dict[str, list[str]]] = {}
        self.tx_owner: dict[str, str] = {}
        self.tags = TagMap()
        self.extra: dict = {}
        self.truth_specs: list = []  # resolved against built ledgers at the end
        self.shifts: list[ShiftRecord] = []
        self.oracle: dict[Address, ShiftStatus] = {}
        names = [f"e{e:04d}" for e in range(p.n_entities)]
        self.entities = {name: {} for name in names}
        for c in p.chains:
            rng = substream(seed, f"entities:{c}")
            for name in names:
                self.entities[name][c] = [f"{c.lower()}_{name}_{k}" for k in range(rng.randint(1, 4))]
        self._addr_n = 0

    def fresh(self, chain: str, tag: str) -> str:
        self._addr_n += 1
        return f"{chain.lower()}_{tag}{self._addr_n:06d}"

    def owner(self, chain: str, txid: str, ent: str) -> None:
        self.tx_owner[f"{chain}:{txid}"] = ent


def _value(rng: random.Random, chain: ChainId, lo_usd, hi_usd, min_dec: int = 4) -> int:
    """Random amount worth between lo and hi USD, with at least ``min_dec`` decimals."""
    price = Fraction(USD_PRICE[chain.symbol])
    unit = 10 ** chain.decimals
    lo = int(Fraction(lo_usd) / price * unit) + 1
    hi = int(Fraction(hi_usd) / price * unit)
    step = 10 ** max(chain.decimals - min_dec, 0)
    while True:
        v = rng.randint(lo, hi)
        if v % step:
            return v


# -- section: transparent noise ---------------------------------------------------------------

def _plan_noise(w: _World, horizon: dict[str, int]) -> None:
    names = sorted(w.entities)
    for c in w.p.chains:
        _plan_chain_noise(w, c, names, horizon[c])


def _plan_chain_noise(w: _World, c: str, names: list[str], horizon: int) -> None:
    rng = substream(w.seed, f"noise:{c}")
    plan = w.plans[c]
    for _ in range(w.p.noise_txs):
        ent = rng.choice(names)
        addrs = w.entities[ent][c]
        h = rng.randint(1, max(horizon, 1))
        dest_ent = rng.choice(names)
        to = rng.choice(w.entities[dest_ent][c])
        if plan.chain.is_utxo:
            k = rng.randint(1, len(addrs))
            frms = rng.sample(addrs, k)
            vals = [_value(rng, plan.chain, 1, 500) for _ in frms]
            total = sum(vals) - plan.fee
            split = rng.randint(1, total - 1) if rng.random() < 0.5 else total
            outs = [(to, split)] + ([(rng.choice(addrs), total - split)] if split < total else [])
            txid = plan.pay_multi(h, frms, vals, outs)
        else:
            txid = plan.pay(h, rng.choice(addrs), [(to, _value(rng, plan.chain, 1, 500))])
        w.owner(c, txid, ent)


# -- section: shifts ----------------------------------------------------------------------------

@dataclass
class _Leg:
    shift: ShiftRecord
    entity: str
    sender: str
    deposit_addr: str
    withdraw: str
    out_coin: int
    dep_h: int
    pay_h: int
    dep_txid: str = ""
    pay_txid: str = ""
    pay_idx: int = 0
    zkind: int = 0  # 1/2/3 pool interaction type, 0 none


def _rate(a: str, b: str) -> Fraction:
    return Fraction(USD_PRICE[a]) / Fraction(USD_PRICE[b])


def _out_coin(plan_in: ChainPlan, plan_out: ChainPlan, amt: int, rate: Fraction) -> int:
    scale = Fraction(10) ** (plan_out.chain.decimals - plan_in.chain.decimals)
    return int(Fraction(amt) * rate * scale) - plan_out.fee


def _plan_shifts(w: _World) -> list[_Leg]:
    p = w.p
    if not p.n_shifts:
        return []
    rng = substream(w.seed, "shifts")
    coll_u = substream(w.seed, "collision-u")
    decoy_rng = substream(w.seed, "collision-decoy")
    jitter_rng = substream(w.seed, "jitter")
    names = sorted(w.entities)
    chains = list(p.chains)
    snapshot_rates = {(a, b): _rate(a, b) for a in chains for b in chains if a != b}
    w.extra["rates"] = {f"{a}-{b}": str(r) for (a, b), r in snapshot_rates.items()}
    w.extra["fees"] = {c: w.plans[c].fee for c in chains}
    legs: list[_Leg] = []
    t = T0 + 3600

    def make(sid, cur_in, cur_out, amt, t_s, ent, sender, withdraw, force_dep_h=None, jitter=None):
        pin, pout = w.plans[cur_in], w.plans[cur_out]
        b, a = DEFAULT_WINDOWS[cur_in]
        anchor = pin.closest(t_s)
        if force_dep_h is None:
            dep_h = anchor + rng.randint(-min(b, anchor), a)
        else:
            dep_h = force_dep_h
        rate = snapshot_rates[(cur_in, cur_out)]
        if jitter is None:
            jitter = jitter_rng.random() < p.rate_jitter
        if jitter:
            rate = rate * Fraction(103, 100)
        out = _out_coin(pin, pout, amt, rate)
        _, a_out = DEFAULT_WINDOWS[cur_out]
        pay_h = pout.closest(t_s) + rng.randint(0, a_out)
        s = ShiftRecord(sid, cur_in, cur_out, amt, t_s)
        return _Leg(s, ent, sender, w.fresh(cur_in, "ss"), withdraw, out, dep_h, pay_h)

    n_base = p.n_shifts
    for i in range(n_base):
        t += rng.randint(1, 2 * p.shift_gap)
        cur_in, cur_out = rng.sample(chains, 2)
        ent = rng.choice(names)
        amt = _value(rng, w.plans[cur_in].chain, 20, 2000, p.value_decimals)
        legs.append(make(f"s{i:06d}", cur_in, cur_out, amt, t, ent,
                         rng.choice(w.entities[ent][cur_in]), rng.choice(w.entities[ent][cur_out])))

    # trading-bot bursts: same pair, near-equal value, inside five minutes
    bots = []
    bot_rng = substream(w.seed, "bots")
    for kind, count in (("bot", p.bot_bursts), ("botdecoy", p.bot_decoys)):
        for j in range(count):
            size = bot_rng.randint(15, 20) if kind == "bot" else 14
            cur_in, cur_out = bot_rng.sample(chains, 2)
            ent = bot_rng.choice(names)
            base = _value(bot_rng, w.plans[cur_in].chain, 50, 500, p.value_decimals)
            # keep unrelated shifts out of the burst's value band so decoys stay at 14
            while any(l.shift.pair == (cur_in, cur_out) and abs(l.shift.amt - base) * 25 <= base
                      for l in legs):
                base = _value(bot_rng, w.plans[cur_in].chain, 50, 500, p.value_decimals)
            t_b = bot_rng.randint(T0 + 3600, max(t, T0 + 7200))
            ids = []
            for k in range(size):
                amt = base + bot_rng.randint(0, base // 400)
                sid = f"{kind}{j:04d}_{k:02d}"
                ids.append(sid)
                legs.append(make(sid, cur_in, cur_out, amt, t_b + bot_rng.randint(0, 240), ent,
                                 bot_rng.choice(w.entities[ent][cur_in]),
                                 bot_rng.choice(w.entities[ent][cur_out])))
            if kind == "bot":
                bots.append(sorted(ids))
    w.extra["bots"] = bots

    # U-turns / round trips: reverse shift shortly after, funded three ways
    ut_rng = substream(w.seed, "uturns")
    uturns = []
    tier_cut = [Fraction(p.uturn_tiers[0]), Fraction(p.uturn_tiers[0]) + Fraction(p.uturn_tiers[1])]
    for i in range(n_base):
        if ut_rng.random() >= p.uturn_rate:
            continue
        l1 = legs[i]
        x, y = l1.shift.cur_in, l1.shift.cur_out
        py = w.plans[y]
        r = Fraction(ut_rng.random())
        tier = 0 if r < tier_cut[0] else 1 if r < tier_cut[1] else 2
        if tier == 2 and not py.chain.is_utxo:
            tier = 1
        want_xrt = ut_rng.random() < p.xrt_share
        if tier == 2:
            amt2 = l1.out_coin - py.fee
            if not within(amt2, l1.out_coin, XRT_TOL * Fraction(4, 5)) or amt2 <= 0:
                tier = 1
        if tier != 2:
            d = Fraction(ut_rng.randint(5, 400), 100000) if want_xrt else Fraction(ut_rng.randint(600, 950), 100000)
            amt2 = int(l1.out_coin * (1 - d))
        is_xrt = within(amt2, l1.out_coin, XRT_TOL * Fraction(4, 5)) if tier == 2 else want_xrt
        b, a = DEFAULT_WINDOWS[y]
        dep_h = None
        for dt in (ut_rng.randint(300, 1500), 1500, 1700):
            t2 = l1.shift.t + dt
            anchor = py.closest(t2)
            lo, hi = max(anchor - b, l1.pay_h), anchor + a
            if lo <= hi:
                dep_h = ut_rng.randint(lo, hi)
                break
        if dep_h is None or amt2 <= 0:
            continue
        ent = l1.entity
        if tier == 0:
            sender = w.fresh(y, "ut")
        else:
            sender = l1.withdraw
        final = l1.sender if ut_rng.random() < 0.5 else rng.choice(w.entities[ent][x])
        leg2 = make(f"u{i:06d}", y, x, amt2, t2, ent, sender, final, force_dep_h=dep_h)
        legs.append(leg2)
        uturns.append((len(legs) - 1, i, tier, is_xrt))
    w.extra["n_uturns"] = len(uturns)

    # pool/shift interaction types on ZEC
    zkinds = {}
    if p.pool_shares is not None:
        received = [k for k in range(len(legs)) if legs[k].shift.cur_out == "ZEC"]
        sent = [k for k in range(len(legs)) if legs[k].shift.cur_in == "ZEC"]
        busy = {u[0] for u in uturns} | {u[1] for u in uturns}
        tot_r = sum(legs[k].out_coin for k in received)
        tot_s = sum(legs[k].shift.amt for k in sent)

        def pick(pool, values, target):
            chosen, acc = [], 0
            for k in sorted(pool, key=lambda k: (-values(k), k)):
                if k in busy or k in zkinds:
                    continue
                if acc + values(k) <= target:
                    chosen.append(k)
                    acc += values(k)
            return chosen

        s1, s2, s3 = (Fraction(str(x)) for x in p.pool_shares)
        for k in pick(received, lambda k: legs[k].out_coin, s1 * tot_r):
            zkinds[k] = 1
        for k in pick(received, lambda k: legs[k].out_coin, s2 * tot_r):
            zkinds[k] = 2
        for k in pick(sent, lambda k: legs[k].shift.amt, s3 * tot_s):
            zkinds[k] = 3

    # execute the plan for every leg, in leg order
    zplan = w.plans.get("ZEC")
    forced = {k2: k1 for k2, k1, tier, _ in uturns if tier == 2}
    for k, leg in enumerate(legs):
        s = leg.shift
        pin, pout = w.plans[s.cur_in], w.plans[s.cur_out]
        leg.zkind = zkinds.get(k, 0)
        if leg.zkind == 3:
            leg.dep_txid = zplan.withdraw(leg.dep_h, [(leg.deposit_addr, s.amt)])
        elif k in forced:
            # spends the first leg's payout output; planned after it, so it sorts later
            l1 = legs[forced[k]]
            leg.dep_txid = pin.add(leg.dep_h, vin=[TxIn(l1.pay_txid, l1.pay_idx, l1.withdraw, l1.out_coin)],
                                   vout=[TxOut(leg.deposit_addr, s.amt)])
        else:
            leg.dep_txid = pin.pay(leg.dep_h, leg.sender, [(leg.deposit_addr, s.amt)])
        w.owner(s.cur_in, leg.dep_txid, leg.entity)
        hot = f"{s.cur_out.lower()}_shapeshift_hot"
        if leg.zkind == 1:
            leg.withdraw = "zs" + hashlib.sha256(f"{w.seed}:zaddr:{k}".encode()).hexdigest()[:40]
            leg.pay_txid = zplan.deposit(leg.pay_h, hot, leg.out_coin)
        else:
            leg.pay_txid = pout.pay(leg.pay_h, hot, [(leg.withdraw, leg.out_coin)])
        leg.pay_idx = 0
        pout.need(leg.pay_h)
        if leg.zkind == 2:
            nxt = min(leg.pay_h + substream(w.seed, f"z2:{k}").randint(1, 20), leg.pay_h + 30)
            zplan.deposit(nxt, leg.withdraw, leg.out_coin - zplan.fee,
                          spend=[TxIn(leg.pay_txid, 0, leg.withdraw, leg.out_coin)])

    # collision decoys and oracle
    for k, leg in enumerate(legs):
        s = leg.shift
        u = coll_u.random()
        if u < p.collision_rate:
            pin = w.plans[s.cur_in]
            b, a = DEFAULT_WINDOWS[s.cur_in]
            anchor = pin.closest(s.t)
            h = anchor + decoy_rng.randint(-min(b, anchor), a)
            daddr = w.fresh(s.cur_in, "decoy")
            pin.pay(h, w.fresh(s.cur_in, "dsrc"), [(daddr, s.amt)])
            if decoy_rng.random() < p.stale_oracle_rate:
                w.oracle[Address(s.cur_in, daddr)] = ShiftStatus(
                    Status.COMPLETE, Address(s.cur_in, daddr), Address(s.cur_out, w.fresh(s.cur_out, "old")),
                    s.amt + decoy_rng.randint(1, 10**6), s.cur_in, 1, s.cur_out, "0" * 64,
                )
        if substream_u(w.seed, "coverage", k) < p.oracle_coverage:
            w.oracle[Address(s.cur_in, leg.deposit_addr)] = ShiftStatus(
                Status.COMPLETE, Address(s.cur_in, leg.deposit_addr), Address(s.cur_out, leg.withdraw),
                s.amt, s.cur_in, leg.out_coin, s.cur_out, leg.pay_txid,
            )
            leg_covered = True
        else:
            leg_covered = False
        w.extra.setdefault("covered", []).append(leg_covered)
    w.shifts = sorted((l.shift for l in legs), key=lambda s: (s.t, s.id))
    w.extra["uturn_pairs"] = [(legs[a].shift.id, legs[b].shift.id, tier, x) for a, b, tier, x in uturns]
    w.extra["_legs"] = legs
    w.extra["_uturns"] = uturns
    return legs


def substream_u(seed: int, label: str, k: int) -> float:
    digest = hashlib.sha256(f"{seed}:{label}:{k}".encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


# -- section: shielded pool -----------------------------------------------------------------

FOUNDER_REWARD = 250_000_000  # 2.5 ZEC
MINER_REWARD = 1_000_000_000  # 10 ZEC
FOUNDER_CAP_BLOCKS = 17_709  # 44,272.5 / 2.5


def _plan_pool(w: _World) -> None:
    p = w.p
    if "ZEC" not in w.plans:
        return
    z = w.plans["ZEC"]
    rng = substream(w.seed, "pool")
    fee = z.fee
    truth = w.truth_specs
    names = sorted(w.entities)

    needed = p.zec_blocks
    if p.founder_withdrawals:
        needed = max(needed, p.founder_withdrawals * 9 + 400)
    if p.round_trips or p.miner_payouts:
        needed = max(needed, 1200)
    horizon = max(needed, z.horizon)
    z.need(horizon)

    # coinbase: 10 to a miner (pools take most blocks), 2.5 to the active founder address
    pools = [("Flypool", "zec_pool_flypool"), ("F2Pool", "zec_pool_f2pool"), ("Nanopool", "zec_pool_nanopool")]
    for label, addr in pools:
        w.tags.add(Address("ZEC", addr), label, TagCategory.POOL)
    founders = [f"zec_founder_{i:02d}" for i in range(horizon // FOUNDER_CAP_BLOCKS + 1)]
    w.extra["founder_addresses"] = founders
    w.extra["pool_addresses"] = [a for _, a in pools]
    pool_cb: dict[str, list[TxIn]] = defaultdict(list)
    founder_cb: dict[str, list[TxIn]] = defaultdict(list)
    for h in range(1, horizon + 1):
        miner = pools[h % len(pools)][1] if h % 5 else "zec_solo_miner"
        f = founders[(h - 1) // FOUNDER_CAP_BLOCKS]
        cb = z.coinbase_txid(h)
        z.coinbase_outs[h] = [TxOut(miner, MINER_REWARD), TxOut(f, FOUNDER_REWARD)]
        if miner != "zec_solo_miner":
            pool_cb[miner].append(TxIn(cb, 0, miner, MINER_REWARD))
        founder_cb[f].append(TxIn(cb, 1, f, FOUNDER_REWARD))

    # pools shield their rewards in batches of 50 coinbase outputs
    for addr, coins in pool_cb.items():
        for k in range(0, len(coins) - 49, 50):
            batch = coins[k:k + 50]
            h = _cb_height(z, batch[-1])
            z.deposit(h, addr, sum(c.value for c in batch) - fee, spend=batch)

    # founders: bursts of 249.9999 deposits, 100 coinbase outputs each, 6-10 blocks apart
    if p.founder_schedule or p.founder_withdrawals:
        for f, coins in founder_cb.items():
            # wait until a burst's worth of rewards has accrued, then shield it in steps
            k = 0
            while True:
                burst = rng.randint(5, 20)
                if k + 100 * burst > len(coins):
                    burst = (len(coins) - k) // 100
                if burst == 0:
                    break
                h = _cb_height(z, coins[k + 100 * burst - 1])
                for _ in range(burst):
                    z.deposit(h, f, 100 * FOUNDER_REWARD - fee, spend=coins[k:k + 100])
                    k += 100
                    h += _founder_gap(rng)
            rest = coins[k:]
            if rest and _cb_height(z, rest[-1]) < horizon:
                z.deposit(min(horizon, _cb_height(z, rest[-1]) + 1), f,
                          sum(c.value for c in rest) - fee, spend=rest)

    reserve_txid = None
    # founder withdrawals of 250.0001, in steps 6-10 blocks apart
    fw_value = 25_000_010_000
    fw_addrs = [f"zec_fwd_{i:03d}" for i in range(max(1, p.founder_withdrawals // 26))]
    h = 2
    for i in range(p.founder_withdrawals):
        h += _founder_gap(rng)
        h = min(h, horizon)
        to = fw_addrs[i % len(fw_addrs)]
        txid = z.withdraw(h, [(to, fw_value)])
        truth.append(("founder", txid, (to,), fw_value))
    for i in range(p.founder_near_misses if p.founder_withdrawals else 0):
        v = fw_value + rng.choice([-2, -1, 1, 2, 10_000, -10_000, -20_000])
        z.withdraw(rng.randint(2, horizon), [(w.fresh("ZEC", "nm"), v)])

    # mining-pool payouts: > min_outputs recipients, pool address among them
    for i in range(p.miner_payouts + p.miner_decoys):
        decoy = i >= p.miner_payouts
        label, paddr = pools[i % len(pools)]
        n_out = rng.randint(*p.miner_fanout)
        if decoy:
            n_out = rng.choice([100, 99, 60])
        recips = [w.fresh("ZEC", "miner") for _ in range(n_out - 1)]
        with_pool = not decoy or rng.random() < 0.5
        if with_pool:
            recips.append(paddr)
        else:
            recips.append(w.fresh("ZEC", "miner"))
        outs = [(a, rng.randint(1_000_000, 50_000_000)) for a in recips]
        h = rng.randint(2, horizon)
        txid = z.withdraw(h, outs)
        if not decoy:
            truth.append(("miner", txid, tuple(a for a, _ in outs), sum(v for _, v in outs), paddr))

    # unique-value round trips through the pool, most of them within 10 blocks
    used: set[int] = set()
    rt = []
    for i in range(p.round_trips):
        ent = rng.choice(names)
        v = _unique_value(rng, used)
        src = rng.choice(w.entities[ent]["ZEC"])
        dst = rng.choice(w.entities[ent]["ZEC"])
        gap = rng.randint(0, 10) if rng.random() < 0.7 else rng.randint(11, 200)
        hd = rng.randint(2, max(2, horizon - gap))
        dep = z.deposit(hd, src, v)
        wd = z.withdraw(hd + gap, [(dst, v)])
        w.owner("ZEC", dep, ent)
        w.owner("ZEC", wd, ent)
        rt.append((dep, wd, gap))
        truth.append(("h5", dep, wd, v, src, dst))
    for i in range(p.duplicate_values):
        v = _unique_value(rng, used)
        for _ in range(2):
            hd = rng.randint(2, horizon - 5)
            z.deposit(hd, rng.choice(w.entities[rng.choice(names)]["ZEC"]), v)
        wd_h = rng.randint(hd, horizon)
        z.withdraw(wd_h, [(w.fresh("ZEC", "dup"), v)])
    w.extra["round_trips"] = rt

    # other withdrawals, sized so founders + miners hold ``fm_share`` of withdrawn value
    if p.fm_share is not None:
        fm = sum(t[3] for t in truth if t[0] in ("founder", "miner"))
        existing = sum(z_.value for s in z.specs for js in s.joinsplits if not js.zin
                       for z_ in js.zout if z_.addr is not None)
        need = int(Fraction(fm) / Fraction(str(p.fm_share))) - existing
        if need < 0:
            raise InputError("fm_share unreachable with the requested pattern counts", "INVALID_PARAMS")
        chunks = need // (1000 * 10**8) + 1
        for c in range(chunks):
            v = need // chunks + (need % chunks if c == chunks - 1 else 0)
            if v > 0:
                z.withdraw(rng.randint(2, horizon), [(w.fresh("ZEC", "oth"), v)])

    # pool liquidity: one reserve deposit at height 0 covering every planned outflow
    outflow = z.pool_outflow()
    if outflow:
        reserve = outflow + 10**8 + 12_345  # odd tail keeps the value unique
        reserve_txid = z.deposit(0, "zec_reserve", reserve)
        z.specs.insert(0, z.specs.pop())
        for n, s in enumerate(z.specs):
            s.seq = n
    w.extra["reserve_txid"] = reserve_txid


def _cb_height(z: ChainPlan, txin: TxIn) -> int:
    return z.cb_height[txin.src_txid]


def _founder_gap(rng: random.Random) -> int:
    return rng.randint(6, 10) if rng.random() < 0.85 else rng.choice([1, 2, 3, 4, 5, 11, 12, 15, 20])


def _unique_value(rng: random.Random, used: set[int]) -> int:
    while True:
        v = rng.randint(10**6, 5 * 10**10)
        if v % 10_000 and v not in used:
            used.add(v)
            return v


# -- assembling -------------------------------------------------------------------------------

def generate(params: GenParams | None = None, seed: int = 0) -> SyntheticWorld:
    """Deterministic world for ``(params, seed)``."""
    p = params or GenParams()
    p.validate()
    w = _World(p, seed)
    legs = _plan_shifts(w)
    # horizon per chain from the shift stream, then pool activity may extend ZEC
    for c, plan in w.plans.items():
        b_a = max(DEFAULT_WINDOWS.get(c, (0, 0)))
        last_t = max((s.t for s in w.shifts), default=T0 + 3600)
        plan.need(plan.closest(last_t) + b_a + 31)
    if "ZEC" in w.plans:
        _plan_pool(w)
    horizons = {c: plan.horizon for c, plan in w.plans.items()}
    _plan_noise(w, horizons)
    ledgers = {c: plan.build() for c, plan in w.plans.items()}
    truth = _resolve_truth(w, legs, ledgers)
    return SyntheticWorld(
        seed=seed, params=p, entities=w.entities, ledgers=ledgers, shifts=w.shifts,
        oracle=DictOracle(w.oracle), truth=truth, tags=w.tags, tx_owner=w.tx_owner,
        extra={k: v for k, v in w.extra.items() if not k.startswith("_")},
    )


def _resolve_truth(w: _World, legs: list[_Leg], ledgers: dict[str, Ledger]) -> list[LinkEvidence]:
    out: list[LinkEvidence] = []

    def ins(sym: str, txid: str) -> tuple[Address, ...]:
        return tuple(Address(sym, a) for a in ledgers[sym].get(txid).input_addresses())

    covered = w.extra.get("covered", [])
    for k, leg in enumerate(legs):
        s = leg.shift
        if k < len(covered) and not covered[k]:
            continue
        out.append(LinkEvidence(
            LinkKind.PASS_THROUGH, src_txids=(leg.dep_txid,), src_addrs=ins(s.cur_in, leg.dep_txid),
            dst_txids=(leg.pay_txid,), dst_addrs=(Address(s.cur_out, leg.withdraw),),
            value=s.amt, unit=s.cur_in,
        ))
    for k2, k1, tier, is_xrt in w.extra.get("_uturns", []):
        if covered and not (covered[k1] and covered[k2]):
            continue
        l1, l2 = legs[k1], legs[k2]
        y, x = l1.shift.cur_out, l1.shift.cur_in
        base = dict(src_txids=(l1.pay_txid,), src_addrs=(Address(y, l1.withdraw),),
                    dst_txids=(l2.dep_txid,), dst_addrs=ins(y, l2.dep_txid),
                    value=l2.shift.amt, unit=y)
        out.append(LinkEvidence(LinkKind.UTURN_BASIC, **base))
        if tier >= 1:
            out.append(LinkEvidence(LinkKind.UTURN_ADDR, **base))
        if tier == 2:
            out.append(LinkEvidence(LinkKind.UTURN_UTXO, **base))
        if is_xrt:
            out.append(LinkEvidence(
                LinkKind.XRT, src_txids=(l1.dep_txid,), src_addrs=ins(x, l1.dep_txid),
                dst_txids=(l2.pay_txid,), dst_addrs=(Address(x, l2.withdraw),),
                value=l1.shift.amt, unit=x,
                meta={"same_address": Address(x, l2.withdraw) in ins(x, l1.dep_txid)},
            ))
    for t in w.truth_specs:
        if t[0] == "founder":
            _, txid, dst, v = t
            out.append(LinkEvidence(LinkKind.FOUNDER_VALUE, dst_txids=(txid,),
                                    dst_addrs=tuple(Address("ZEC", a) for a in dst), value=v, unit="ZEC"))
        elif t[0] == "miner":
            _, txid, dst, v, paddr = t
            out.append(LinkEvidence(LinkKind.MINER_PAYOUT, src_addrs=(Address("ZEC", paddr),),
                                    dst_txids=(txid,), dst_addrs=tuple(dict.fromkeys(Address("ZEC", a) for a in dst)),
                                    value=v, unit="ZEC"))
        elif t[0] == "h5":
            _, dep, wd, v, src, dst = t
            out.append(LinkEvidence(LinkKind.ROUND_TRIP_UNIQUE, src_txids=(dep,), src_addrs=(Address("ZEC", src),),
                                    dst_txids=(wd,), dst_addrs=(Address("ZEC", dst),), value=v, unit="ZEC"))
    return out


# -- scoring ----------------------------------------------------------------------------------

@dataclass
class Score:
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    zero_pred: bool
    per_kind: dict[str, dict]

    def to_json(self) -> dict:
        return asdict(self)


def _prf(pred: set, truth: set) -> dict:
    tp = len(pred & truth)
    return {
        "precision": tp / len(pred) if pred else 1.0,
        "recall": tp / len(truth) if truth else 1.0,
        "tp": tp, "fp": len(pred - truth), "fn": len(truth - pred),
        "zero_pred": not pred,
    }


def score(predicted: Iterable[LinkEvidence], truth: SyntheticWorld | Iterable[LinkEvidence],
          kinds: Iterable[LinkKind | str] | None = None) -> Score:
    """Exact set comparison on canonical endpoints.

    Only ``kinds`` are compared; by default the kinds that were predicted,
    or the truth's kinds when nothing was predicted. No predictions give
    precision 1.0 with ``zero_pred`` set.
    """
    predicted = list(predicted)
    truth_links = truth.truth if isinstance(truth, SyntheticWorld) else list(truth)
    if kinds is None:
        ks = {LinkKind(l.kind) for l in predicted} or {LinkKind(l.kind) for l in truth_links}
    else:
        ks = {LinkKind(k) for k in kinds}
    per_kind = {}
    all_p, all_t = set(), set()
    for k in sorted(ks, key=lambda k: k.value):
        p = {l.key() for l in predicted if l.kind == k}
        t = {l.key() for l in truth_links if l.kind == k}
        per_kind[k.value] = _prf(p, t)
        all_p |= p
        all_t |= t
    tot = _prf(all_p, all_t)
    return Score(tot["precision"], tot["recall"], tot["tp"], tot["fp"], tot["fn"], tot["zero_pred"], per_kind)


# -- bundles ----------------------------------------------------------------------------------

def write_world(world: SyntheticWorld, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_chain_dir(d, world.ledgers)
    save_shifts(world.shifts, d / "shifts.csv")
    save_oracle(world.oracle, d / "oracle.csv")
    write_evidence(world.truth, d / "truth.jsonl")
    world.tags.save_csv(d / "tags.csv")
    meta = {
        "seed": world.seed, "params": world.params.to_json(), "entities": world.entities,
        "tx_owner": world.tx_owner, "extra": world.extra,
    }
    (d / "world.json").write_bytes(orjson.dumps(meta, option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2,
                                                default=str))


def load_world(directory: str | Path) -> SyntheticWorld:
    d = Path(directory)
    if not (d / "world.json").exists():
        raise InputError(f"{d} is not a world bundle (no world.json)", "MISSING_FILE")
    meta = json.loads((d / "world.json").read_text())
    return SyntheticWorld(
        seed=meta["seed"], params=GenParams.from_json(meta["params"]), entities=meta["entities"],
        ledgers=load_chain_dir(d), shifts=load_shifts(d / "shifts.csv") if (d / "shifts.csv").exists() else [],
        oracle=load_oracle(d / "oracle.csv") if (d / "oracle.csv").exists() else DictOracle(),
        truth=read_evidence(d / "truth.jsonl") if (d / "truth.jsonl").exists() else [],
        tags=TagMap.load_csv(d / "tags.csv") if (d / "tags.csv").exists() else TagMap(),
        tx_owner=meta.get("tx_owner", {}), extra=meta.get("extra", {}),
    )


# -- small standalone generators ----------------------------------------------------------------

def random_utxo_ledger(rng: random.Random, n_txs: int, chain: str = "BTC", n_addrs: int | None = None,
                       max_inputs: int = 4) -> Ledger:
    """Valid random UTXO ledger: coinbases mint, other txs co-spend 1..max_inputs
    unspent outputs (from any owners) and pay 1..3 random addresses."""
    c = get_chain(chain)
    n_addrs = n_addrs or max(2, n_txs // 2)
    addrs = [f"a{i}" for i in range(n_addrs)]
    unspent: list[tuple[str, int, str, int]] = []
    txs: list[LedgerTx] = []
    h = 0
    for n in range(n_txs):
        if n and rng.random() < 0.3:
            h += 1
        txid = f"{n:08x}"
        ts = T0 + 600 * h
        if len(unspent) < 2 or rng.random() < 0.15:
            v = rng.randint(10**6, 10**9)
            txs.append(LedgerTx(txid, c, h, ts, True, (), (TxOut(rng.choice(addrs), v),)))
            unspent.append((txid, 0, txs[-1].vout[0].addr, v))
            continue
        k = min(len(unspent), rng.randint(1, max_inputs))
        picks = [unspent.pop(rng.randrange(len(unspent))) for _ in range(k)]
        vin = tuple(TxIn(t, i, a, v) for t, i, a, v in picks)
        total = sum(v for *_, v in picks)
        fee = min(total // 100, 1000)
        budget = total - fee
        n_out = rng.randint(1, 3) if budget >= 3 else 1
        cuts = sorted(rng.sample(range(1, budget), n_out - 1)) if n_out > 1 else []
        vals = [b - a for a, b in zip([0] + cuts, cuts + [budget])]
        vout = tuple(TxOut(rng.choice(addrs), v) for v in vals)
        txs.append(LedgerTx(txid, c, h, ts, False, vin, vout))
        unspent.extend((txid, j, o.addr, o.value) for j, o in enumerate(vout))
    return Ledger(c, txs)


def random_zcash_ledger(rng: random.Random, n_events: int, value_alphabet: int = 40) -> Ledger:
    """Random deposits and withdrawals. Some values come from a small shared
    alphabet (so they repeat), others are fresh and planted as deposit /
    withdrawal pairs at random gaps, in either order. A reserve deposit at
    height 0 keeps the pool solvent."""
    z = get_chain("ZEC")
    alphabet = [rng.randint(10**6, 10**9) for _ in range(value_alphabet)]
    plan = ChainPlan(z, rng.randint(0, 2**31), 150)
    horizon = max(10, n_events // 2)
    for _ in range(n_events):
        addr = f"t{rng.randrange(50)}"
        if rng.random() < 0.4:
            v = rng.randint(10**9, 10**11)
            h = rng.randint(1, horizon)
            gap = rng.choice((0, 1, 5, 10, 11, 29, 30, 31, 60, 99, 100, 101, 150)) + rng.randint(0, 2)
            if rng.random() < 0.15:
                gap = -gap
            plan.deposit(h, addr, v)
            plan.withdraw(max(0, h + gap), [(f"t{rng.randrange(50)}", v)])
        elif rng.random() < 0.5:
            plan.deposit(rng.randint(1, horizon), addr, rng.choice(alphabet))
        else:
            plan.withdraw(rng.randint(1, horizon), [(addr, rng.choice(alphabet))])
    out = plan.pool_outflow()
    if out:
        plan.deposit(0, "reserve", out + 7)
        plan.specs.insert(0, plan.specs.pop())
        for n, s in enumerate(plan.specs):
            s.seq = n
    return plan.build()


def coinjoin_suite(seed: int = 0) -> list[tuple[LedgerTx, bool, str]]:
    """25 mixing-shaped and 25 near-miss Dash transactions, each with a note."""
    rng = substream(seed, "coinjoin")
    dash = get_chain("DASH")
    denoms = [dash.coins(d) for d in ("0.01", "0.1", "1", "10")]
    out: list[tuple[LedgerTx, bool, str]] = []

    def tx(n_in: int, outs: list[int], label: str, expect: bool) -> None:
        n = len(out)
        vin = tuple(TxIn(f"src{n:03d}{k}", 0, f"d{n}_{k}", outs and max(outs) or 1) for k in range(n_in))
        vout = tuple(TxOut(f"o{n}_{k}", v) for k, v in enumerate(outs))
        t = LedgerTx(f"cj{n:03d}", dash, n, T0 + n, False, vin, vout)
        out.append((t, expect, label))

    for i in range(25):
        d = denoms[i % 4]
        n_in = rng.randint(3, 8)
        n_std = rng.randint(3, 10)
        outs = [d] * n_std
        variant = i % 3
        if variant == 1:
            outs.append(rng.randint(1, d - 1) + 7)  # one odd output
        elif variant == 2:
            outs.insert(rng.randrange(len(outs)), d + rng.randint(1, 999))
        rng.shuffle(outs)
        tx(n_in, outs, ["uniform", "uniform+odd", "odd-in-middle"][variant], True)
    for i in range(25):
        d = denoms[i % 4]
        kind = i % 5
        if kind == 0:  # only two inputs
            tx(2, [d] * 4, "two-inputs", False)
        elif kind == 1:  # two odd outputs
            tx(4, [d] * 4 + [d + 1, d + 2], "two-odd", False)
        elif kind == 2:  # two standard denominations mixed
            tx(5, [d] * 3 + [denoms[(i + 1) % 4]] * 3, "two-denoms", False)
        elif kind == 3:  # no standard denomination at all
            tx(4, [d + 3] * 5, "non-standard", False)
        else:  # off by one duff
            tx(3, [d - 1] * 4, "off-by-one", False)
    return out


TSB_SPAM = 260  # receipts given to the history-cap decoy


@dataclass
class TsbWorld:
    ledger: Ledger
    injected: list[frozenset[str]]
    decoys: list[tuple[frozenset[str], str]]  # (members, violated criterion)
    exclude: TagMap


def tsb_world(seed: int = 0) -> TsbWorld:
    """Month-bucketed ZEC ledger with 10 suspect clusters and 10 decoys,
    each decoy failing exactly one criterion."""
    rng = substream(seed, "tsb")
    aug = 1501545600  # 2017-08-01
    z = ChainPlan(get_chain("ZEC"), seed, 3600, t0=aug)
    coin = 10**8
    amounts = [100 * coin, 200 * coin, 400 * coin, 500 * coin]
    exclude = TagMap()
    injected, decoys = [], []

    def cluster(name: str, size: int) -> list[str]:
        members = [f"tsb_{name}_{k}" for k in range(size)]
        if size > 1:
            # one co-spend ties the members together under the multi-input rule
            z.pay_multi(rng.randint(1, 20), members, [coin + k for k in range(size)],
                        [(f"tsb_sink_{name}", size * coin - z.fee + size * (size - 1) // 2)])
        return members

    def deposits(members: list[str], values: list[int], lo: int = 30, hi: int = 700) -> None:
        for v in values:
            z.deposit(rng.randint(lo, hi), rng.choice(members), v)

    for i in range(10):
        a = amounts[i % 4]
        members = cluster(f"inj{i}", rng.randint(2, 4))
        total = a + rng.randint(-coin // 2, coin // 2)
        if i % 2 == 0:
            vals = [total]
        else:
            # a near-amount deposit plus a small top-up landing on the monthly total
            near = a - rng.randint(coin, 4 * coin)
            vals = [near, total - near]
        deposits(members, vals)
        injected.append(frozenset(members))

    violations = ["tx_tol", "cluster_tol", "pool_recipient", "history", "excluded"]
    for i in range(10):
        kind = violations[i % 5]
        a = amounts[i % 4]
        members = cluster(f"dec{i}", rng.randint(2, 3))
        if kind == "tx_tol":
            # every deposit more than 5 ZEC from any requested amount; total still matches
            vals = [a // 2 + 20 * coin, a // 2 - 20 * coin]
            if a == 200 * coin:
                vals = [a // 2 + 30 * coin, a // 2 - 30 * coin]
        elif kind == "cluster_tol":
            vals = [a + 2 * coin, 3 * coin // 2]  # near on the tx, total off by 3.5
        else:
            vals = [a + coin // 4]
        deposits(members, vals)
        if kind == "pool_recipient":
            z.withdraw(rng.randint(30, 700), [(members[-1], 3 * coin + 12345)])
        elif kind == "history":
            src = f"tsb_spam_{i}"
            for k in range(TSB_SPAM):
                z.pay(rng.randint(1, 700), src, [(members[0], 1000 + k)])
        elif kind == "excluded":
            exclude.add(Address("ZEC", members[0]), "Miner", TagCategory.MINER)
        decoys.append((frozenset(members), kind))

    out = z.pool_outflow()
    if out:
        z.deposit(0, "tsb_reserve", out + 999)
        z.specs.insert(0, z.specs.pop())
        for n, s in enumerate(z.specs):
            s.seq = n
    z.need(720)
    return TsbWorld(z.build(), injected, decoys, exclude)


def matrix_scenario(rng: random.Random, n_users: int, buy_rate: float = 0.3, invalid_rate: float = 0.0) -> list[dict]:
    """Register/buy schedule; referrers skew to early users, buys follow level order.

    With ``invalid_rate`` > 0 some calls are deliberately rejectable
    (duplicate registration, skipped level).
    """
    calls: list[dict] = []
    users: list[str] = []
    levels: dict[str, dict[str, int]] = {}
    for i in range(n_users):
        u = f"u{i}"
        ref = None
        if users and rng.random() < 0.9:
            ref = users[int(len(users) * rng.random() ** 2)]
        calls.append({"op": "register", "user": u, "ref": ref})
        users.append(u)
        levels[u] = {"X3": 1, "X4": 1}
        while rng.random() < buy_rate:
            b = rng.choice(users)
            m = rng.choice(("X3", "X4"))
            if levels[b][m] < 12:
                levels[b][m] += 1
                calls.append({"op": "buy", "user": b, "matrix": m, "level": levels[b][m]})
        if invalid_rate and rng.random() < invalid_rate:
            b = rng.choice(users)
            if rng.random() < 0.5:
                calls.append({"op": "register", "user": b, "ref": None})
            else:
                calls.append({"op": "buy", "user": b, "matrix": "X3", "level": min(12, levels[b]["X3"] + 2)})
    return calls


def write_scale_ledger(path: str | Path, n_txs: int, seed: int = 0, chain: str = "BTC",
                       n_addrs: int | None = None) -> Path:
    """Stream a valid ``n_txs`` UTXO ledger to JSONL without holding it in memory
    (only the unspent set is kept). Writes the chain manifest next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    c = get_chain(chain)
    (path.with_suffix(".json")).write_text(json.dumps(c.manifest(), indent=2))
    rng = random.Random(seed)
    n_addrs = n_addrs or max(2, n_txs // 3)
    unspent: list[tuple[str, int, int, int]] = []  # txid, idx, addr id, value
    fmt = c.format_units
    dumps = orjson.dumps
    h = 0
    with open(path, "wb") as fh:
        for n in range(n_txs):
            if n and n % 2000 == 0:
                h += 1
            txid = f"{n:016x}"
            ts = T0 + 600 * h
            if len(unspent) < 4 or rng.random() < 0.1:
                a, v = rng.randrange(n_addrs), rng.randint(10**6, 10**9)
                rec = {"txid": txid, "height": h, "ts": ts, "coinbase": True,
                       "vout": [{"addr": f"a{a}", "value": fmt(v)}]}
                unspent.append((txid, 0, a, v))
            else:
                k = 1 + (rng.random() < 0.4) + (rng.random() < 0.2)
                vin, total = [], 0
                for _ in range(k):
                    j = rng.randrange(len(unspent))
                    unspent[j], unspent[-1] = unspent[-1], unspent[j]
                    t, i, a, v = unspent.pop()
                    vin.append({"src_txid": t, "src_idx": i, "addr": f"a{a}", "value": fmt(v)})
                    total += v
                fee = min(total // 100, 1000)
                a1, a2 = rng.randrange(n_addrs), rng.randrange(n_addrs)
                v1 = (total - fee) // 2
                v2 = total - fee - v1
                rec = {"txid": txid, "height": h, "ts": ts, "coinbase": False, "vin": vin,
                       "vout": [{"addr": f"a{a1}", "value": fmt(v1)}, {"addr": f"a{a2}", "value": fmt(v2)}]}
                unspent.append((txid, 0, a1, v1))
                unspent.append((txid, 1, a2, v2))
            fh.write(dumps(rec))
            fh.write(b"\n")
    return path
