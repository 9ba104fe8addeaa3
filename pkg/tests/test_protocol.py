import pytest
from hypothesis import given
from hypothesis import strategies as st

from merge_coord.codec import AckPayload, MsgType
from merge_coord.protocol import (Ack, Advisory, AdvisoryKind, Confirm, EmptyInput, Expiry,
                                  ForeignNotify, ForeignProposal, IllegalTransition,
                                  MasterPhase, MasterState, MergePlan, NotInPlan, PlanEntry,
                                  Proposal, ProtocolParams, ResponderPhase, ResponderState,
                                  Timeout, WrongPhase, advisory_for, compute_merge_order,
                                  master_step, on_ramp_entry, responder_step)

P = ProtocolParams()
R, F1, F2 = 3, 1, 2
ETAS = {R: 8.6, F1: 8.1, F2: 10.7}


def tags(emissions):
    return [t for t, _ in emissions]


def collecting(vid=R, now=0):
    return on_ramp_entry(MasterState(vid), now).state


def proposed(etas=ETAS, now=1000):
    return master_step(collecting(), Timeout(), now, etas)


class TestMergeOrder:
    def test_no_adjustment(self):
        assert compute_merge_order({"A": 5.0, "B": 9.0}, 2.0) == \
            [("A", 5.0, 5.0), ("B", 9.0, 9.0)]

    def test_follower_delayed(self):
        assert compute_merge_order({"R": 5.0, "F": 5.5}, 2.0) == \
            [("R", 5.0, 5.0), ("F", 5.5, 7.0)]

    def test_ties_by_id(self):
        out = compute_merge_order({"C": 5.0, "A": 5.0, "B": 5.0}, 2.0)
        assert [(e.vehicle_id, e.slot_s) for e in out] == [("A", 5.0), ("B", 7.0), ("C", 9.0)]

    def test_empty(self):
        with pytest.raises(EmptyInput):
            compute_merge_order({}, 2.0)

    @given(st.dictionaries(st.integers(0, 1000), st.floats(0, 100), min_size=1, max_size=12),
           st.floats(0.1, 5.0))
    def test_slot_invariants(self, etas, h):
        out = compute_merge_order(etas, h)
        assert sorted(e.vehicle_id for e in out) == sorted(etas)
        assert all(e.slot_s >= e.eta_s for e in out)
        assert all(b.slot_s - a.slot_s >= h - 1e-9 for a, b in zip(out, out[1:]))
        assert out[0].slot_s == out[0].eta_s


class TestRampEntry:
    def test_idle_to_collecting(self):
        res = on_ramp_entry(MasterState(R), 500)
        assert res.state.phase is MasterPhase.COLLECTING
        assert tags(res.emissions) == [MsgType.RAMP_ENTRY_NOTIFY]
        assert res.state.next_timeout_ms == 1500

    def test_second_entry(self):
        with pytest.raises(WrongPhase):
            on_ramp_entry(collecting(), 100)

    def test_freeway_vehicle(self):
        with pytest.raises(WrongPhase):
            on_ramp_entry(MasterState(F1, role="freeway"), 0)


class TestHandshake:
    def test_lossless_full_exchange(self):
        emitted = []
        start = on_ramp_entry(MasterState(R), 0)
        assert tags(start.emissions) == [MsgType.RAMP_ENTRY_NOTIFY]
        res = master_step(start.state, Timeout(), 1000, ETAS)
        emitted += res.emissions
        plan = MergePlan.from_wire(res.emissions[0][1])
        assert plan.vehicle_ids == (F1, R, F2)
        responders = {v: ResponderState(v) for v in (F1, F2)}
        acks = []
        for v in (F1, F2):
            r = responder_step(responders[v], Proposal(plan), 1020)
            responders[v] = r.state
            acks += r.emissions
        emitted += acks
        master = res.state
        for _, ack in acks:
            out = master_step(master, Ack(ack.plan_id, ack.acker_id), 1040)
            master, emitted = out.state, emitted + out.emissions
        assert master.phase is MasterPhase.COMMITTED
        assert out.advisory == Advisory(AdvisoryKind.MERGE_BEHIND, F1, plan.entry(R).slot_s)
        confirm = out.emissions[0][1]
        for v in (F1, F2):
            r = responder_step(responders[v], Confirm(confirm.plan_id), 1060)
            assert r.state.phase is ResponderPhase.COMMITTED
            assert r.state.plan.encode() == master.plan.encode()
        assert tags(emitted) == [MsgType.MERGE_PROPOSAL, MsgType.PROPOSAL_ACK,
                                 MsgType.PROPOSAL_ACK, MsgType.MERGE_CONFIRM]

    def test_plan_slots_feasible(self):
        plan = proposed().state.plan
        assert all(e.slot_s >= e.eta_s for e in plan.entries)
        gaps = [b.slot_s - a.slot_s for a, b in zip(plan.entries, plan.entries[1:])]
        assert all(g >= P.headway_s for g in gaps)

    def test_plan_survives_wire(self):
        plan = proposed().state.plan
        assert MergePlan.from_wire(plan.to_wire()) == plan

    def test_retransmit_same_plan(self):
        s = proposed().state
        s = master_step(s, Ack(s.plan.plan_id, F1), 1020).state
        res = master_step(s, Timeout(), 1300, ETAS)
        assert tags(res.emissions) == [MsgType.MERGE_PROPOSAL]
        assert res.emissions[0][1] == s.plan.to_wire()
        assert res.state.retries_left == 2
        assert res.state.acked_ids == {F1}

    def test_exhausted_retries_rebuild_without_silent_vehicle(self):
        s = proposed().state
        s = master_step(s, Ack(s.plan.plan_id, F1), 1020).state
        for k in range(3):
            s = master_step(s, Timeout(), 1300 + 300 * k, ETAS).state
        first_id = s.plan.plan_id
        res = master_step(s, Timeout(), 2200, ETAS)
        assert res.state.phase is MasterPhase.PROPOSAL_SENT
        assert res.state.plan.plan_id != first_id
        assert set(res.state.plan.vehicle_ids) == {R, F1}
        assert res.state.retries_left == 3

    def test_exhausted_retries_with_no_acks_aborts(self):
        s = proposed().state
        for k in range(4):
            s = master_step(s, Timeout(), 1300 + 300 * k, ETAS).state
        assert s.phase is MasterPhase.ABORTED

    def test_lone_master_commits_immediately(self):
        res = proposed(etas={R: 5.0})
        assert tags(res.emissions) == [MsgType.MERGE_PROPOSAL, MsgType.MERGE_CONFIRM]
        assert res.state.phase is MasterPhase.COMMITTED

    def test_stale_or_foreign_acks_ignored(self):
        s = proposed().state
        assert master_step(s, Ack(s.plan.plan_id + 1, F1), 1020).state == s
        assert master_step(s, Ack(s.plan.plan_id, 99), 1020).state == s

    def test_timeout_when_idle_is_illegal(self):
        with pytest.raises(IllegalTransition):
            master_step(MasterState(R), Timeout(), 0)

    def test_commit_requires_every_ack(self):
        s = proposed().state
        s = master_step(s, Ack(s.plan.plan_id, F2), 1020).state
        assert s.phase is MasterPhase.PROPOSAL_SENT


class TestYield:
    def test_larger_id_yields(self):
        nine = collecting(vid=9)
        res = master_step(nine, ForeignNotify(5), 100)
        assert res.state.phase is MasterPhase.IDLE
        assert res.state.yielded_to == 5

    def test_smaller_id_keeps_mastership(self):
        five = collecting(vid=5)
        assert master_step(five, ForeignNotify(9), 100).state is five

    def test_yield_on_foreign_proposal(self):
        nine = master_step(collecting(vid=9), Timeout(), 1000, {9: 6.0, 1: 7.0}).state
        foreign = MergePlan(5 << 16 | 1, 5, 1000, (PlanEntry(5, 5.0, 5.0), PlanEntry(9, 6.0, 7.0)))
        assert master_step(nine, ForeignProposal(foreign), 1010).state.phase is MasterPhase.IDLE

    def test_committed_master_does_not_yield(self):
        done = proposed(etas={R: 5.0}).state
        assert master_step(done, ForeignNotify(1), 2000).state is done


class TestResponder:
    plan = MergePlan(0x30001, R, 1000, (PlanEntry(F1, 8.1, 8.1), PlanEntry(R, 8.6, 10.1)))

    def test_ack_on_proposal(self):
        res = responder_step(ResponderState(F1), Proposal(self.plan), 1020)
        assert res.state.phase is ResponderPhase.ACK_SENT
        assert res.emissions == [(MsgType.PROPOSAL_ACK, AckPayload(0x30001, F1))]

    def test_duplicate_proposal_reacks(self):
        first = responder_step(ResponderState(F1), Proposal(self.plan), 1020)
        second = responder_step(first.state, Proposal(self.plan), 1320)
        assert second.state == first.state
        assert second.emissions == first.emissions

    def test_proposal_without_self_ignored(self):
        s = ResponderState(F2)
        assert responder_step(s, Proposal(self.plan), 1020) == (s, [], None)

    def test_unknown_confirm_ignored(self):
        s = responder_step(ResponderState(F1), Proposal(self.plan), 1020).state
        assert responder_step(s, Confirm(0xDEAD), 1040).state == s
        assert responder_step(ResponderState(F1), Confirm(0x30001), 1040).state.phase \
            is ResponderPhase.IDLE

    def test_confirm_commits_with_advisory(self):
        s = responder_step(ResponderState(F1), Proposal(self.plan), 1020).state
        res = responder_step(s, Confirm(0x30001), 1040)
        assert res.state.phase is ResponderPhase.COMMITTED
        assert res.advisory.kind is AdvisoryKind.MAINTAIN_SPEED

    def test_expiry(self):
        s = responder_step(ResponderState(F1), Proposal(self.plan), 1020).state
        assert s.next_timeout_ms == 1020 + 10 * P.retransmit_ms
        assert responder_step(s, Expiry(), 4020).state.phase is ResponderPhase.IDLE


class TestAdvisory:
    conflict = MergePlan(1, 10, 0, (PlanEntry(10, 5.0, 5.0), PlanEntry(20, 5.5, 7.0)))
    easy = MergePlan(2, 10, 0, (PlanEntry(20, 5.0, 5.0), PlanEntry(10, 9.0, 9.0)))

    def test_freeway_slowdown(self):
        assert advisory_for(self.conflict, 20, 5.5, "freeway") == \
            Advisory(AdvisoryKind.SLOW_DOWN, 10, 7.0)

    def test_ramp_merge_ahead(self):
        assert advisory_for(self.conflict, 10, 5.0, "ramp") == \
            Advisory(AdvisoryKind.MERGE_AHEAD, 20, 5.0)

    def test_ramp_merge_behind(self):
        assert advisory_for(self.easy, 10, 9.0, "ramp") == \
            Advisory(AdvisoryKind.MERGE_BEHIND, 20, 9.0)

    def test_freeway_maintain(self):
        assert advisory_for(self.easy, 20, 5.0, "freeway").kind is AdvisoryKind.MAINTAIN_SPEED

    def test_delay_within_epsilon(self):
        plan = MergePlan(1, 10, 0, (PlanEntry(10, 5.0, 5.0), PlanEntry(20, 6.8, 7.0)))
        assert advisory_for(plan, 20, 6.8, "freeway").kind is AdvisoryKind.MAINTAIN_SPEED

    def test_not_in_plan(self):
        with pytest.raises(NotInPlan):
            advisory_for(self.easy, 99, 1.0, "freeway")

    def test_pure(self):
        calls = {advisory_for(self.conflict, 20, 5.5, "freeway") for _ in range(5)}
        assert len(calls) == 1

    def test_reference_required(self):
        with pytest.raises(ValueError):
            Advisory(AdvisoryKind.SLOW_DOWN, None, 1.0)
