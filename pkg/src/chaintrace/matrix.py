"""X3/X4 matrix pyramid contract as a deterministic state machine.

Amounts are wei. Every state-changing call forwards all of its value to
users in the same step, so the contract itself never holds a balance.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol

import orjson

from .errors import InvariantViolation, MatrixError
from .ledger import ETH

log = logging.getLogger(__name__)

LEVELS = 12
BASE_PRICE = ETH.coins("0.025")
REGISTRATION = 2 * BASE_PRICE
DEFAULT_GAS = ETH.coins("0.00883")


class Matrix(str, enum.Enum):
    X3 = "X3"
    X4 = "X4"

    @property
    def capacity(self) -> int:
        return 3 if self is Matrix.X3 else 6


class Reason(str, enum.Enum):
    DIRECT = "DIRECT"
    SKIP_BLOCKED = "SKIP_BLOCKED"
    SPILLOVER = "SPILLOVER"
    FALLBACK = "FALLBACK"


class FillPolicy(str, enum.Enum):
    # the payment that fills a slot goes to its holder, then the slot may block
    PAY_THEN_BLOCK = "pay-then-block"
    # the filling payment is passed on: the holder re-enters its upline's slot
    REINVEST = "reinvest"


def slot_price(level: int) -> int:
    if not 1 <= level <= LEVELS:
        raise MatrixError(f"level {level} outside 1..{LEVELS}", "LEVEL_RANGE")
    return BASE_PRICE << (level - 1)


@dataclass(slots=True)
class SlotState:
    level: int
    blocked: bool = False
    reinvest_count: int = 0
    referrals: list = field(default_factory=list)
    slot_referrer: Optional[str] = None
    closed_part: Optional[str] = None  # X4 only, left to the routing strategy
    placements: int = 0

    @property
    def active(self) -> bool:
        return True  # a SlotState only exists for purchased levels

    def to_json(self) -> dict:
        return {
            "level": self.level, "blocked": self.blocked, "reinvest": self.reinvest_count,
            "referrals": list(self.referrals), "slot_referrer": self.slot_referrer,
            "closed_part": self.closed_part, "placements": self.placements,
        }


@dataclass(slots=True)
class MatrixUser:
    id: str
    upline: Optional[str]
    x3: list = field(default_factory=list)  # SlotState per purchased level, prefix 1..k
    x4: list = field(default_factory=list)
    partners_count: int = 0
    paid_in: int = 0
    paid_out: int = 0
    gas_paid: int = 0
    seq: int = 0  # registration order

    def slots(self, m: Matrix) -> list:
        return self.x3 if m is Matrix.X3 else self.x4

    def level(self, m: Matrix) -> int:
        return len(self.slots(m))

    def slot(self, m: Matrix, level: int) -> Optional[SlotState]:
        s = self.slots(m)
        return s[level - 1] if level <= len(s) else None

    @property
    def net(self) -> int:
        return self.paid_out - self.paid_in - self.gas_paid

    def to_json(self) -> dict:
        return {
            "id": self.id, "upline": self.upline, "partners": self.partners_count,
            # wei totals pass 2**63 quickly, keep them out of JSON integers
            "paid_in": str(self.paid_in), "paid_out": str(self.paid_out), "gas": str(self.gas_paid),
            "x3": [s.to_json() for s in self.x3], "x4": [s.to_json() for s in self.x4],
        }


@dataclass(frozen=True, slots=True)
class Payment:
    seq: int
    call: int
    payer: str
    payee: str
    matrix: Matrix
    level: int
    amount: int
    reason: Reason


class RoutingStrategy(Protocol):
    def __call__(self, world: "MatrixWorld", origin: str, m: Matrix, level: int) -> tuple[str, Reason]: ...


def upline_walk(world: "MatrixWorld", origin: str, m: Matrix, level: int) -> tuple[str, Reason]:
    """First upline holding an active, unblocked slot at ``level``; the owner ends the walk."""
    users = world.users
    direct = users[origin].upline
    cur = direct
    saw_blocked = False
    while True:
        if cur == world.owner:
            break
        u = users[cur]
        s = u.slot(m, level)
        if s is not None and not s.blocked:
            break
        saw_blocked |= s is not None
        cur = u.upline
    if cur == direct:
        return cur, Reason.DIRECT
    if saw_blocked:
        return cur, Reason.SKIP_BLOCKED if m is Matrix.X3 else Reason.SPILLOVER
    return cur, Reason.FALLBACK


class MatrixWorld:
    def __init__(self, owner: str = "owner", gas_fee: int = DEFAULT_GAS,
                 policy: FillPolicy | str = FillPolicy.PAY_THEN_BLOCK,
                 x4_strategy: RoutingStrategy = upline_walk):
        self.owner = owner
        self.gas_fee = gas_fee
        self.policy = FillPolicy(policy)
        self.x4_strategy = x4_strategy
        self.users: dict[str, MatrixUser] = {}
        self.events: list[Payment] = []
        self.calls = 0
        o = MatrixUser(owner, None, seq=0)
        for lvl in range(1, LEVELS + 1):
            o.x3.append(SlotState(lvl))
            o.x4.append(SlotState(lvl))
        self.users[owner] = o
        # observers see (payment, slot blocked at payment time)
        self.observers: list[Callable[[Payment, bool], None]] = []

    def __repr__(self) -> str:
        return f"MatrixWorld({len(self.users)} users, {len(self.events)} payments)"

    # -- calls ---------------------------------------------------------------------------
    def register(self, user: str, referrer: Optional[str] = None, payment: int = REGISTRATION) -> list[Payment]:
        if user in self.users:
            raise MatrixError(f"{user} already registered", "ALREADY_REGISTERED")
        if payment != REGISTRATION:
            raise MatrixError(f"registration needs exactly {REGISTRATION} wei, got {payment}", "BAD_AMOUNT")
        if referrer is None:
            referrer = self.owner
        elif referrer not in self.users:
            raise MatrixError(f"referrer {referrer} not registered", "NOT_REGISTERED")
        u = MatrixUser(user, referrer, seq=len(self.users))
        u.x3.append(SlotState(1, slot_referrer=referrer))
        u.x4.append(SlotState(1, slot_referrer=referrer))
        self.users[user] = u
        start = len(self.events)
        self.calls += 1
        u.gas_paid += self.gas_fee
        self._pay_in(u, payment)
        self._route(user, Matrix.X3, 1, BASE_PRICE)
        self._route(user, Matrix.X4, 1, BASE_PRICE)
        return self._close_call(start, payment)

    def buy_new_level(self, user: str, matrix: Matrix | str, level: int) -> list[Payment]:
        m = Matrix(matrix)
        u = self.users.get(user)
        if u is None:
            raise MatrixError(f"{user} not registered", "NOT_REGISTERED")
        price = slot_price(level)
        have = u.level(m)
        if level <= have:
            raise MatrixError(f"{user} already has {m.value} level {level}", "ALREADY_ACTIVE")
        if level != have + 1:
            raise MatrixError(f"{user} must buy {m.value} level {have + 1} before {level}", "NON_SEQUENTIAL_LEVEL")
        slots = u.slots(m)
        slots.append(SlotState(level))
        slots[level - 2].blocked = False
        start = len(self.events)
        self.calls += 1
        u.gas_paid += self.gas_fee
        self._pay_in(u, price)
        self._route(user, m, level, price)
        return self._close_call(start, price)

    def fallback(self, user: str, payment: int = REGISTRATION) -> list[Payment]:
        """Plain value transfer to the contract: registers under the owner."""
        return self.register(user, None, payment)

    # -- internals -------------------------------------------------------------------------
    @staticmethod
    def _pay_in(u: MatrixUser, amount: int) -> None:
        u.paid_in += amount

    def _route(self, origin: str, m: Matrix, level: int, amount: int) -> None:
        payer = origin
        while True:
            if m is Matrix.X3:
                payee, reason = upline_walk(self, origin, m, level)
            else:
                payee, reason = self.x4_strategy(self, origin, m, level)
            pu = self.users[payee]
            slot = pu.slot(m, level)
            if slot is None or (slot.blocked and payee != self.owner):
                raise InvariantViolation(f"routing picked unusable slot {payee}/{m.value}{level}")
            self.users[origin].slots(m)[level - 1].slot_referrer = payee
            slot.referrals.append(origin)
            slot.placements += 1
            if m is Matrix.X3:
                pu.partners_count += 1
            full = len(slot.referrals) >= m.capacity
            if full:
                slot.reinvest_count += 1
                slot.referrals.clear()
            if full and self.policy is FillPolicy.REINVEST and payee != self.owner:
                # holder re-enters its upline's slot and the value moves on with it
                self._maybe_block(pu, m, level, slot)
                origin = payee
                continue
            self._emit(payer, payee, m, level, amount, reason, slot.blocked)
            if full:
                self._maybe_block(pu, m, level, slot)
            return

    def _maybe_block(self, u: MatrixUser, m: Matrix, level: int, slot: SlotState) -> None:
        if u.id == self.owner or level == LEVELS or u.level(m) > level:
            return
        slot.blocked = True

    def _emit(self, payer: str, payee: str, m: Matrix, level: int, amount: int,
              reason: Reason, blocked: bool) -> None:
        p = Payment(len(self.events), self.calls, payer, payee, m, level, amount, reason)
        self.users[payee].paid_out += amount
        self.events.append(p)
        for obs in self.observers:
            obs(p, blocked)

    def _close_call(self, start: int, paid: int) -> list[Payment]:
        out = self.events[start:]
        if sum(p.amount for p in out) != paid:
            raise InvariantViolation(f"call {self.calls} retained {paid - sum(p.amount for p in out)} wei")
        return out

    # -- views ----------------------------------------------------------------------------------
    @property
    def retained(self) -> int:
        return sum(u.paid_in for u in self.users.values()) - sum(u.paid_out for u in self.users.values())

    def state_json(self) -> dict:
        return {
            "owner": self.owner, "gas": str(self.gas_fee), "policy": self.policy.value,
            "users": [self.users[k].to_json() for k in sorted(self.users)],
            "events": len(self.events), "calls": self.calls,
        }

    def state_hash(self) -> str:
        h = hashlib.sha256(orjson.dumps(self.state_json(), option=orjson.OPT_SORT_KEYS))
        for p in self.events:
            h.update(f"{p.seq},{p.payer},{p.payee},{p.matrix.value},{p.level},{p.amount},{p.reason.value};".encode())
        return h.hexdigest()

    def check_invariants(self) -> None:
        if self.retained != 0:
            raise InvariantViolation(f"contract retains {self.retained} wei")
        for u in self.users.values():
            for m in Matrix:
                for i, s in enumerate(u.slots(m), 1):
                    if s.level != i:
                        raise InvariantViolation(f"{u.id} {m.value} levels not a prefix")
                    if len(s.referrals) >= m.capacity:
                        raise InvariantViolation(f"{u.id} {m.value}{i} over capacity")
                    if s.blocked and u.id == self.owner:
                        raise InvariantViolation("owner slot blocked")
                    if s.placements != m.capacity * s.reinvest_count + len(s.referrals):
                        raise InvariantViolation(f"{u.id} {m.value}{i} placement count mismatch")
            if u.partners_count != sum(s.placements for s in u.x3):
                raise InvariantViolation(f"{u.id} partnersCount mismatch")


def new_world(owner: str = "owner", gas_fee: int = DEFAULT_GAS, **kw) -> MatrixWorld:
    return MatrixWorld(owner, gas_fee, **kw)


def route_payment(world: MatrixWorld, origin: str, matrix: Matrix | str, level: int) -> tuple[str, Reason]:
    """Who would be paid right now for ``origin``'s slot at ``level`` (read-only)."""
    m = Matrix(matrix)
    if m is Matrix.X3:
        return upline_walk(world, origin, m, level)
    return world.x4_strategy(world, origin, m, level)


# -- scenarios and export -----------------------------------------------------------------------

def run_scenario(world: MatrixWorld, calls: Iterable[dict], strict: bool = True) -> dict:
    """Apply scenario calls; with ``strict=False`` rejected calls are counted, not raised."""
    applied = rejected = 0
    reasons: dict[str, int] = {}
    for c in calls:
        op = c.get("op")
        try:
            if op == "register":
                world.register(c["user"], c.get("ref"), int(c.get("payment", REGISTRATION)))
            elif op == "buy":
                world.buy_new_level(c["user"], c["matrix"], int(c["level"]))
            else:
                raise MatrixError(f"unknown op {op!r}", "BAD_OP")
            applied += 1
        except MatrixError as exc:
            if strict:
                raise
            rejected += 1
            reasons[exc.code] = reasons.get(exc.code, 0) + 1
        except KeyError as exc:
            raise MatrixError(f"scenario call {c} missing {exc}", "BAD_OP") from None
    return {"applied": applied, "rejected": rejected, "rejections": reasons}


def load_scenario(path: str | Path) -> list[dict]:
    out = []
    with open(path, "rb") as fh:
        for n, raw in enumerate(fh, 1):
            if raw.strip():
                try:
                    out.append(orjson.loads(raw))
                except orjson.JSONDecodeError as exc:
                    raise MatrixError(f"{path}:{n}: {exc}", "MALFORMED_RECORD") from None
    return out


def write_event_log(world: MatrixWorld, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seq", "payer", "payee", "matrix", "level", "amount", "reason"])
        for p in world.events:
            w.writerow([p.seq, p.payer, p.payee, p.matrix.value, p.level, ETH.format_units(p.amount), p.reason.value])


HIST_EDGES_ETH = ("-10", "-1", "-0.1", "0", "0.1", "1", "10")


def profit_report(world: MatrixWorld, top_k: Iterable[int] = (1, 10, 100), include_owner: bool = False) -> dict:
    """Per-user net (paid out - paid in - gas), a log-spaced histogram in ETH,
    share of positive profit taken by the top k earners and the spillover rate."""
    users = [u for u in world.users.values() if include_owner or u.id != world.owner]
    nets = sorted((u.net for u in users), reverse=True)
    edges = [ETH.coins(e.lstrip("-")) * (-1 if e.startswith("-") else 1) for e in HIST_EDGES_ETH]
    labels = [f"<{HIST_EDGES_ETH[0]}"] + [
        f"[{a},{b})" for a, b in zip(HIST_EDGES_ETH, HIST_EDGES_ETH[1:])
    ] + [f">={HIST_EDGES_ETH[-1]}"]
    hist = dict.fromkeys(labels, 0)
    for n in nets:
        i = sum(1 for e in edges if n >= e)
        hist[labels[i]] += 1
    positive = sum(n for n in nets if n > 0)
    spill = sum(1 for p in world.events if p.reason is Reason.SPILLOVER)
    owner = world.users[world.owner]
    return {
        "users": len(users),
        "profitable": sum(1 for n in nets if n > 0),
        "profitable_share": (sum(1 for n in nets if n > 0) / len(nets)) if nets else 0.0,
        "owner_net": ETH.format_units(owner.net),
        "histogram": hist,
        "top_k_share": {
            str(k): (sum(n for n in nets[:k] if n > 0) / positive if positive else 0.0) for k in top_k
        },
        "spillover_events": spill,
        "calls": world.calls,
        "spillover_fraction": spill / world.calls if world.calls else 0.0,
        "sum_net_ex_gas": str(sum(u.paid_out - u.paid_in for u in world.users.values())),
        "nets": {u.id: ETH.format_units(u.net) for u in sorted(users, key=lambda u: u.seq)},
    }


def dump_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))
