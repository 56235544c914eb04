import dataclasses
import json
import threading

import pytest
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from conftest import build_world, submit_trace
from revoc.contract import IDENTITY, TraceRequest
from revoc.enclave import sm_decrypt
from revoc.errors import BadDleqProof, MalformedEncoding, OutOfOrderMessage, TransportTimeout, UnknownSession
from revoc.fbs import match_id, match_sig, tracer_keygen, user_start, verify_sig
from revoc.group import seeded_randomness, setup
from revoc.ledger import TRACE_CREDENTIAL, TRACE_KINDS
from revoc.parties import (InspectionPolicy, LocalBus, TcpBus, Tracer, UserAbort, decode_frame,
                           encode_frame, message, request_inspection, run_batch_trace, run_inspection,
                           run_issuance, run_trace_credential, run_trace_identity, run_verification)


# --- issuance & verification ----------------------------------------------------

def test_issuance_is_off_chain(ec_world):
    w = ec_world
    before = w.ledger.tx_count()
    cred = run_issuance(w.bus, w.new_user("alice"), "issuer", b"attrs")
    assert verify_sig(w.issuer_key.public, cred) and len(w.issuer.registry) == 1
    assert run_verification(w.bus, cred, "verifier")
    assert w.ledger.tx_count() == before


def test_user_abort_discards_session(ec_world):
    w = ec_world
    with pytest.raises(UserAbort):
        run_issuance(w.bus, w.new_user(), "issuer", b"m", abort_after_msg2=True)
    assert len(w.issuer.pending) == 1 and len(w.issuer.registry) == 0
    assert w.issuer.expire_pending(0.0) == 1
    assert not w.issuer.pending and len(w.issuer.registry) == 0


def test_unknown_issue3_session(toy_world):
    w = toy_world
    with pytest.raises(OutOfOrderMessage):
        w.bus.request("issuer", message("ISSUE3", {"msg3": {"e": "01"}}, "issuer-99"))


def test_bad_dleq_surfaces_over_wire(toy_world):
    w = toy_world
    user, other = w.new_user("a"), w.new_user("b")
    msg1, _ = user_start(user.identity, w.issuer_key.public, w.y_t)
    payload = {"xi": (other.identity.xi * w.params.g).encode().hex(), "label": "", "msg1": msg1.to_payload()}
    with pytest.raises(BadDleqProof):
        w.bus.request("issuer", message("ISSUE1", payload))


def test_malformed_payload_reported(toy_world):
    with pytest.raises(MalformedEncoding):
        toy_world.bus.request("issuer", message("ISSUE1", {"nope": 1}))
    with pytest.raises(MalformedEncoding):
        toy_world.bus.request("verifier", message("TRACE_ACK", {}))


def test_verification_variants(ec_world):
    w = ec_world
    cred = run_issuance(w.bus, w.new_user(), "issuer", b"m")
    from revoc.parties import Verifier
    w.bus.register(Verifier("verifier2", w.issuer_key.public))
    assert run_verification(w.bus, cred, "verifier") and run_verification(w.bus, cred, "verifier2")
    assert not run_verification(w.bus, dataclasses.replace(cred, m=b"M"), "verifier")


# --- tracing -----------------------------------------------------------------

def test_trace_credential_matches(ec_world):
    w = ec_world
    cred = run_issuance(w.bus, w.new_user(), "issuer", b"m")
    sid = next(iter(w.issuer.registry))
    n = len(w.ledger.query_by_contract(w.cid, TRACE_CREDENTIAL))
    a = run_trace_credential(w.bus, w.tracer, sid)
    b = run_trace_credential(w.bus, w.tracer, sid)
    assert match_sig(w.issuer_key.public, cred, a.element) and a.element == b.element
    assert a.txid != b.txid and a.receipt.confirmed(w.ledger.confirmation_depth)
    w.ledger.advance_block()
    w.ledger.advance_block()
    assert len(w.ledger.query_by_contract(w.cid, TRACE_CREDENTIAL)) == n + 2


def test_eavesdropper_cannot_read_payload(ec_world):
    w = ec_world
    run_issuance(w.bus, w.new_user(), "issuer", b"m")
    out = run_trace_credential(w.bus, w.tracer, next(iter(w.issuer.registry)))
    tx = next(tx for blk in w.ledger.blocks for tx in blk.txs if tx.txid == out.txid)
    with pytest.raises(InvalidTag):
        sm_decrypt(AESGCM.generate_key(bit_length=256), tx.output_ct, b"revoc/out" + w.cid)
    assert out.element.encode() not in tx.to_bytes()


def test_trace_identity_resolves_label(ec_world):
    w = ec_world
    cred = run_issuance(w.bus, w.new_user("carol"), "issuer", b"m")
    out = run_trace_identity(w.bus, w.tracer, cred.zeta1, w.issuer.registry)
    assert out.labels == ["carol"] and match_id(next(iter(w.issuer.registry)), out.element)


def test_unknown_session_still_recorded(ec_world):
    w = ec_world
    before = w.ledger.tx_count()
    with pytest.raises(UnknownSession) as info:
        run_trace_identity(w.bus, w.tracer, w.params.g ** 12345, w.issuer.registry)
    out = info.value.details["outcome"]
    assert w.ledger.tx_count() == before + 1 and w.ledger.is_confirmed(out.txid)


def test_batch_identity_labels(ec_world):
    w = ec_world
    creds = [run_issuance(w.bus, w.new_user(f"user{i}"), "issuer", b"m") for i in range(4)]
    before = w.ledger.tx_count()
    out = run_batch_trace(w.bus, w.tracer, IDENTITY, [c.zeta1 for c in creds], w.issuer.registry)
    assert out.labels == [f"user{i}" for i in range(4)]
    assert w.ledger.tx_count() == before + 1 and out.result.meter_delta == 4


def test_no_bypass_linkage_count(ec_world):
    w = ec_world
    creds = [run_issuance(w.bus, w.new_user(f"u{i}"), "issuer", b"m") for i in range(3)]
    outcomes = [
        run_trace_identity(w.bus, w.tracer, creds[0].zeta1, w.issuer.registry),
        run_trace_credential(w.bus, w.tracer, next(iter(w.issuer.registry))),
        run_batch_trace(w.bus, w.tracer, IDENTITY, [c.zeta1 for c in creds], w.issuer.registry),
    ]
    confirmed = {tx.txid for tx, _ in w.ledger.query_by_contract(w.cid, TRACE_KINDS)}
    assert all(o.txid in confirmed for o in outcomes)
    metered = sum(o.result.meter_delta for o in outcomes if o.txid in confirmed)
    assert len(w.tracer.linkages) == metered == 5
    for sid, zeta1 in w.tracer.linkages:
        assert any(match_sig(w.issuer_key.public, c, zeta1) for c in creds)


def test_second_tracer_shares_contract(ec_world):
    w = ec_world
    cred = run_issuance(w.bus, w.new_user("z"), "issuer", b"m")
    other = Tracer(tracer_keygen(w.params), w.ledger, w.cid)
    out = run_trace_identity(w.bus, other, cred.zeta1, w.issuer.registry)
    assert out.labels == ["z"]
    callers = {tx.caller for tx, _ in w.ledger.query_by_contract(w.cid, TRACE_KINDS)}
    assert w.ledger.is_confirmed(out.txid) and other.keys.tau.encode() in callers


# --- inspection ----------------------------------------------------------------

def _traced_world(params, n):
    w = build_world(params)
    creds = [run_issuance(w.bus, w.new_user(f"u{i}"), "issuer", b"m") for i in range(n)]
    for c in creds:
        run_trace_identity(w.bus, w.tracer, c.zeta1, w.issuer.registry)
    w.ledger.advance_block()
    w.ledger.advance_block()
    return w, creds


def test_inspection_legit_run(ec):
    w, _ = _traced_world(ec, 5)
    policy = InspectionPolicy(allowlist=frozenset({w.tracer.keys.tau.encode()}))
    report = run_inspection(w.ledger, w.cid, policy=policy)
    assert len(report.entries) == 5 and report.anomalies == () and report.chain_ok
    assert report.summary["by_kind"] == {"trace-identity": 5}
    assert [e["txid"] for e in report.entries] == [tx.txid.hex() for tx, _ in
                                                   w.ledger.query_by_contract(w.cid, TRACE_KINDS)]


def test_inspection_rate_rule(toy_world):
    w = toy_world
    for _ in range(50):
        submit_trace(w, TraceRequest.credential(w.params.g))
    for _ in range(3):
        w.ledger.advance_block()
    report = run_inspection(w.ledger, w.cid, policy=InspectionPolicy(rate_threshold=10))
    rules = [a["rule"] for a in report.anomalies]
    assert rules == ["b"] and report.anomalies[0]["count"] == 50


def test_inspection_allowlist_rule(toy_world):
    w = toy_world
    rogue = Tracer(tracer_keygen(w.params), w.ledger, w.cid)
    run_trace_credential(w.bus, w.tracer, w.params.g)
    out = run_trace_credential(w.bus, rogue, w.params.g)
    w.ledger.advance_block()
    policy = InspectionPolicy(allowlist=frozenset({w.tracer.keys.tau.encode()}))
    report = run_inspection(w.ledger, w.cid, policy=policy)
    flagged = [a for a in report.anomalies if a["rule"] == "a"]
    if rogue.keys.tau == w.tracer.keys.tau:   # toy group: keys can coincide
        assert not flagged
    else:
        assert [a["txid"] for a in flagged] == [out.txid.hex()]


def test_inspection_time_window_rule(toy_world):
    w = toy_world
    out = run_trace_credential(w.bus, w.tracer, w.params.g)
    w.ledger.advance_block()
    ts = next(e["timestamp"] for e in run_inspection(w.ledger, w.cid).entries if e["txid"] == out.txid.hex())
    ok = run_inspection(w.ledger, w.cid, policy=InspectionPolicy(permitted_windows=((ts, ts + 1),)))
    assert not [a for a in ok.anomalies if a["rule"] == "c"]
    bad = run_inspection(w.ledger, w.cid, policy=InspectionPolicy(permitted_windows=((0, ts),)))
    assert [a["txid"] for a in bad.anomalies if a["rule"] == "c"] == [out.txid.hex()]


def test_inspection_chain_rule(toy_world):
    w = toy_world
    run_trace_credential(w.bus, w.tracer, w.params.g)
    blk = w.ledger._blocks[3]
    w.ledger._blocks[3] = dataclasses.replace(blk, prev_hash=bytes(32))
    report = run_inspection(w.ledger, w.cid)
    assert not report.chain_ok and report.anomalies[0]["rule"] == "d" and report.anomalies[0]["height"] == 3


def test_inspection_window_filters_heights(ec):
    w, _ = _traced_world(ec, 3)
    heights = [e["height"] for e in run_inspection(w.ledger, w.cid).entries]
    part = run_inspection(w.ledger, w.cid, window=(heights[1], heights[1]))
    assert [e["height"] for e in part.entries] == [heights[1]]


def test_reports_are_pure_functions_of_ledger(ec):
    w, _ = _traced_world(ec, 3)
    from revoc.parties import Inspector
    other = w.bus.register(Inspector("inspector2", w.ledger))
    a = w.inspector.inspect(w.cid)
    b = other.inspect(w.cid)
    assert a.to_json() == b.to_json()
    remote = request_inspection(w.bus, "inspector", w.cid)
    assert json.dumps(remote, sort_keys=True, separators=(",", ":")).encode() == a.to_json()


# --- transports ----------------------------------------------------------------

def test_frame_codec():
    msg = message("SHOW", {"credential": {"zeta1": "ab"}}, "s1")
    frame = encode_frame(msg)
    assert int.from_bytes(frame[:4], "big") == len(frame) - 4
    assert decode_frame(frame) == msg


def _scenario(bus_cls, backend="ec"):
    params = setup(backend=backend)
    with seeded_randomness(2024):
        bus = bus_cls()
        w = build_world(params, bus)
        creds = [run_issuance(w.bus, w.new_user(f"u{i}"), "issuer", f"attrs {i}".encode()) for i in range(3)]
        shown = [run_verification(w.bus, c, "verifier") for c in creds]
        run_trace_identity(w.bus, w.tracer, creds[0].zeta1, w.issuer.registry)
        run_batch_trace(w.bus, w.tracer, IDENTITY, [c.zeta1 for c in creds], w.issuer.registry)
    bus.close()
    return [c.to_json() for c in creds], shown, w.ledger.tx_count(), sorted(
        r.label for r in (w.issuer.registry.lookup(s) for s in w.issuer.registry))


def test_transport_equivalence():
    assert _scenario(LocalBus) == _scenario(TcpBus)


def test_tcp_concurrent_issuance(ec):
    with TcpBus() as bus:
        w = build_world(ec, bus)
        results, errors = [], []

        def client(i):
            try:
                results.append(run_issuance(bus, w.new_user(f"c{i}"), "issuer", b"m"))
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

        threads = [threading.Thread(target=client, args=(i,)) for i in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors and len(results) == 8
        assert all(verify_sig(w.issuer_key.public, c) for c in results)
        assert len(w.issuer.registry) == 8


def test_tcp_unknown_destination_times_out():
    with TcpBus(timeout=0.5) as bus:
        with pytest.raises(TransportTimeout):
            bus.request("nobody", message("SHOW", {}))
        bus.addresses["ghost"] = ("127.0.0.1", 1)
        with pytest.raises(TransportTimeout):
            bus.request("ghost", message("SHOW", {}))


def test_local_bus_unknown_destination():
    with pytest.raises(TransportTimeout):
        LocalBus().request("nobody", message("SHOW", {}))


def test_wire_log_has_no_plaintext_results(ec_world):
    w = ec_world
    cred = run_issuance(w.bus, w.new_user("w"), "issuer", b"m")
    sid = next(iter(w.issuer.registry))
    before = len(w.bus.wire)
    run_trace_credential(w.bus, w.tracer, sid)
    trace_bytes = b"".join(d for _, _, d in w.bus.wire[before:])
    assert cred.zeta1.encode().hex().encode() not in trace_bytes
    assert sid.encode().hex().encode() not in trace_bytes
