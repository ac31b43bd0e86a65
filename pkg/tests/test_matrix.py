import random

import pytest
from hypothesis import given, settings, strategies as st

from chaintrace.errors import MatrixError
from chaintrace.ledger import ETH
from chaintrace.matrix import (
    BASE_PRICE, DEFAULT_GAS, LEVELS, REGISTRATION, FillPolicy, Matrix, Reason, load_scenario,
    new_world, profit_report, route_payment, run_scenario, slot_price, write_event_log,
)
from chaintrace.synth import matrix_scenario

X3, X4 = Matrix.X3, Matrix.X4


# -- constants ----------------------------------------------------------------------------

def test_slot_prices():
    assert slot_price(1) == ETH.coins("0.025")
    assert slot_price(12) == ETH.coins("51.2")
    assert sum(slot_price(l) for l in range(1, LEVELS + 1)) == ETH.coins("102.375")
    assert REGISTRATION == ETH.coins("0.05")


@pytest.mark.parametrize("level", [0, 13, -1])
def test_slot_price_range(level):
    with pytest.raises(MatrixError) as ei:
        slot_price(level)
    assert ei.value.code == "LEVEL_RANGE"


def test_capacities():
    assert (X3.capacity, X4.capacity) == (3, 6)


def test_new_world_owner_holds_everything():
    w = new_world()
    o = w.users["owner"]
    assert o.level(X3) == o.level(X4) == LEVELS
    assert not any(s.blocked for s in o.x3 + o.x4)
    assert o.paid_in == o.gas_paid == 0 and w.events == []
    assert w.gas_fee == DEFAULT_GAS == ETH.coins("0.00883")


def test_same_calls_same_hash():
    calls = matrix_scenario(random.Random(4), 40)
    a, b = new_world(), new_world()
    run_scenario(a, calls)
    run_scenario(b, calls)
    assert a.state_hash() == b.state_hash()


# -- registration -------------------------------------------------------------------------------

def test_register_under_owner_pays_owner_twice():
    w = new_world()
    ev = w.register("a")
    assert [(p.payee, p.matrix, p.amount, p.reason) for p in ev] == [
        ("owner", X3, BASE_PRICE, Reason.DIRECT), ("owner", X4, BASE_PRICE, Reason.DIRECT)]
    assert w.users["owner"].paid_out == REGISTRATION
    assert w.users["a"].gas_paid == DEFAULT_GAS


def test_missing_referrer_means_owner_upline():
    w = new_world()
    w.register("a")
    w.fallback("b")
    assert w.users["a"].upline == w.users["b"].upline == "owner"


@pytest.mark.parametrize("call,code", [
    (lambda w: w.register("a"), "ALREADY_REGISTERED"),
    (lambda w: w.register("z", payment=REGISTRATION + 1), "BAD_AMOUNT"),
    (lambda w: w.register("z", "ghost"), "NOT_REGISTERED"),
    (lambda w: w.buy_new_level("ghost", "X3", 2), "NOT_REGISTERED"),
    (lambda w: w.buy_new_level("a", "X3", 1), "ALREADY_ACTIVE"),
    (lambda w: w.buy_new_level("a", "X3", 3), "NON_SEQUENTIAL_LEVEL"),
    (lambda w: w.buy_new_level("a", "X4", 13), "LEVEL_RANGE"),
])
def test_rejections(call, code):
    w = new_world()
    w.register("a")
    before = w.state_hash()
    with pytest.raises(MatrixError) as ei:
        call(w)
    assert ei.value.code == code
    assert w.state_hash() == before


def three_under_a(policy):
    w = new_world(policy=policy)
    w.register("A")
    for u in "BCD":
        w.register(u, "A")
    return w


def test_three_registrations_reinvest_trace():
    # hand trace: B and C pay A on X3; D fills A's slot, A re-enters under the owner,
    # so D's X3 half lands on the owner and A's level-1 X3 slot blocks
    w = three_under_a(FillPolicy.REINVEST)
    x3 = [(p.payer, p.payee) for p in w.events if p.matrix is X3]
    assert x3 == [("A", "owner"), ("B", "A"), ("C", "A"), ("D", "owner")]
    s = w.users["A"].x3[0]
    assert s.blocked and s.reinvest_count == 1 and s.referrals == []
    assert w.users["owner"].x3[0].referrals == ["A", "A"]
    # X4 is at 3 of 6 and stays open
    assert [p.payee for p in w.events if p.matrix is X4][1:] == ["A"] * 3
    assert not w.users["A"].x4[0].blocked
    w.check_invariants()


def test_three_registrations_pay_then_block():
    w = three_under_a(FillPolicy.PAY_THEN_BLOCK)
    x3 = [(p.payer, p.payee) for p in w.events if p.matrix is X3]
    assert x3[1:] == [("B", "A"), ("C", "A"), ("D", "A")]
    assert w.users["A"].x3[0].blocked
    assert w.users["A"].paid_out == 3 * BASE_PRICE + 3 * BASE_PRICE
    w.register("E", "A")
    last = [p for p in w.events if p.matrix is X3][-1]
    assert (last.payee, last.reason) == ("owner", Reason.SKIP_BLOCKED)
    w.check_invariants()


def test_buy_unblocks_previous_level_for_good():
    w = three_under_a(FillPolicy.PAY_THEN_BLOCK)
    assert w.users["A"].x3[0].blocked
    w.buy_new_level("A", X3, 2)
    assert not w.users["A"].x3[0].blocked
    for u in ("E", "F", "G", "H"):
        w.register(u, "A")
    assert not w.users["A"].x3[0].blocked
    assert w.users["A"].x3[0].reinvest_count == 2


def test_level_twelve_never_blocks():
    w = new_world()
    w.register("A")
    for l in range(2, LEVELS + 1):
        w.buy_new_level("A", X3, l)
    for i in range(3):
        w.register(f"b{i}", "A")
        w.buy_new_level(f"b{i}", X3, 2)
        for l in range(3, LEVELS + 1):
            w.buy_new_level(f"b{i}", X3, l)
    assert w.users["A"].x3[-1].reinvest_count == 1
    assert not w.users["A"].x3[-1].blocked
    # balances here are far past 2**63 wei
    assert w.users["owner"].paid_out > 2**63
    assert len(w.state_hash()) == 64


# -- routing ----------------------------------------------------------------------------------------

def walk_oracle(w, origin, m, level):
    """Plain upline walk written against the public user state."""
    direct = w.users[origin].upline
    cur, skipped = direct, False
    while cur != w.owner:
        s = w.users[cur].slot(m, level)
        if s is not None and not s.blocked:
            break
        skipped = skipped or s is not None
        cur = w.users[cur].upline
    if cur == direct:
        return cur, Reason.DIRECT
    if skipped:
        return cur, (Reason.SKIP_BLOCKED if m is X3 else Reason.SPILLOVER)
    return cur, Reason.FALLBACK


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.integers(5, 80))
def test_route_matches_walk_oracle(seed, n):
    w = new_world()
    run_scenario(w, matrix_scenario(random.Random(seed), n, buy_rate=0.5))
    for u in w.users:
        if u == w.owner:
            continue
        for m in Matrix:
            for level in range(1, LEVELS + 1):
                assert route_payment(w, u, m, level) == walk_oracle(w, u, m, level)


def test_route_skips_users_without_level():
    w = new_world()
    w.register("A")
    w.register("B", "A")
    w.register("C", "B")
    w.buy_new_level("A", X4, 2)
    w.buy_new_level("C", X4, 2)
    assert w.events[-1].payee == "A" and w.events[-1].reason is Reason.FALLBACK


def test_x4_spillover():
    w = new_world()
    w.register("A")
    for i in range(6):
        w.register(f"b{i}", "A")
    assert w.users["A"].x4[0].blocked
    ev = w.register("c", "A")
    assert (ev[1].payee, ev[1].reason) == ("owner", Reason.SPILLOVER)


def test_blocked_chain_ends_at_owner():
    w = new_world()
    w.register("A")
    for u in ("B", "a2", "a3"):
        w.register(u, "A")
    for u in ("C", "c2", "c3"):
        w.register(u, "B")
    assert w.users["A"].x3[0].blocked and w.users["B"].x3[0].blocked
    ev = w.register("D", "B")
    assert (ev[0].payee, ev[0].reason) == ("owner", Reason.SKIP_BLOCKED)


def test_pluggable_x4_strategy():
    seen = []

    def always_owner(world, origin, m, level):
        seen.append(origin)
        return world.owner, Reason.SPILLOVER

    w = new_world(x4_strategy=always_owner)
    w.register("A")
    w.register("B", "A")
    assert seen == ["A", "B"]
    assert [p.payee for p in w.events if p.matrix is X4] == ["owner", "owner"]


# -- reporting ---------------------------------------------------------------------------------

def test_single_registrant_report():
    w = new_world()
    w.register("a")
    r = profit_report(w)
    assert ETH.coins(r["nets"]["a"].lstrip("-")) == REGISTRATION + DEFAULT_GAS
    assert r["nets"]["a"].startswith("-")
    assert r["owner_net"] == "0.05"
    assert r["sum_net_ex_gas"] == "0"
    assert r["users"] == 1 and r["profitable"] == 0


def test_report_resums_event_log():
    w = new_world()
    run_scenario(w, matrix_scenario(random.Random(8), 500, buy_rate=0.4))
    got = {u.id: 0 for u in w.users.values()}
    for p in w.events:
        got[p.payee] += p.amount
    assert got == {u.id: u.paid_out for u in w.users.values()}
    r = profit_report(w)
    assert r["sum_net_ex_gas"] == "0"
    assert sum(r["histogram"].values()) == r["users"] == 500
    assert r["spillover_fraction"] == r["spillover_events"] / w.calls


def test_report_histogram_edges():
    w = new_world()
    w.register("a")
    r = profit_report(w, include_owner=True)
    assert r["histogram"]["[-0.1,0)"] == 1 and r["histogram"]["[0,0.1)"] == 1


def test_event_log_and_scenario_files(tmp_path):
    calls = matrix_scenario(random.Random(1), 30)
    p = tmp_path / "s.jsonl"
    import orjson
    p.write_bytes(b"\n".join(orjson.dumps(c) for c in calls))
    assert load_scenario(p) == calls
    w = new_world()
    run_scenario(w, calls)
    out = tmp_path / "ev.csv"
    write_event_log(w, out)
    rows = out.read_text().splitlines()
    assert rows[0] == "seq,payer,payee,matrix,level,amount,reason"
    assert len(rows) == len(w.events) + 1


def test_bad_scenario_line(tmp_path):
    p = tmp_path / "s.jsonl"
    p.write_text('{"op":"register","user":"a"}\n{nope\n')
    with pytest.raises(MatrixError) as ei:
        load_scenario(p)
    assert ei.value.code == "MALFORMED_RECORD" and ":2:" in str(ei.value)


def test_lenient_run_counts_rejections():
    calls = [{"op": "register", "user": "a"}, {"op": "register", "user": "a"},
             {"op": "buy", "user": "a", "matrix": "X3", "level": 3}]
    out = run_scenario(new_world(), calls, strict=False)
    assert out == {"applied": 1, "rejected": 2,
                   "rejections": {"ALREADY_REGISTERED": 1, "NON_SEQUENTIAL_LEVEL": 1}}


def test_frozen_state_hash():
    w = new_world()
    run_scenario(w, matrix_scenario(random.Random(2024), 200, buy_rate=0.4))
    assert w.state_hash() == FROZEN_HASH


FROZEN_HASH = "9309db0e23c7fdbee2ebd7aaa3465556d56ec910e71ff415c5768143883592de"


# -- invariants -------------------------------------------------------------------------------

class Watch:
    """Observer that checks per-payment invariants from outside the engine."""

    def __init__(self, w):
        self.w = w
        self.owner_net = 0
        self.n = 0
        w.observers.append(self)

    def __call__(self, p, _blocked):
        w = self.w
        slot = w.users[p.payee].slot(p.matrix, p.level)
        assert slot is not None
        assert not slot.blocked or p.payee == w.owner
        net = w.users[w.owner].net
        assert net >= self.owner_net
        self.owner_net = net
        self.n += 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 150), st.floats(0, 0.9),
       st.sampled_from(list(FillPolicy)))
def test_conservation_and_invariants(seed, n, buy_rate, policy):
    w = new_world(policy=policy)
    watch = Watch(w)
    for c in matrix_scenario(random.Random(seed), n, buy_rate=buy_rate, invalid_rate=0.1):
        before = len(w.events)
        try:
            run_scenario(w, [c])
        except MatrixError:
            assert len(w.events) == before
            continue
        paid = REGISTRATION if c["op"] == "register" else slot_price(c["level"])
        assert sum(p.amount for p in w.events[before:]) == paid
        assert w.retained == 0
        for u in w.users.values():
            assert u.partners_count == sum(3 * s.reinvest_count + len(s.referrals) for s in u.x3)
    assert watch.n == len(w.events)
    assert sum(u.paid_out - u.paid_in for u in w.users.values()) == 0
    w.check_invariants()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 100))
def test_replay_determinism(seed, n):
    calls = matrix_scenario(random.Random(seed), n, buy_rate=0.3)
    hashes = set()
    for _ in range(2):
        w = new_world()
        run_scenario(w, calls)
        hashes.add(w.state_hash())
    assert len(hashes) == 1
