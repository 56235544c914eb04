import dataclasses
import threading

import pytest
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from conftest import build_world, submit_trace
from revoc.attestation import check_report, check_service_proof, sha256
from revoc.contract import TraceRequest, TracingContract, bytecode
from revoc.enclave import (ChannelHello, EnclaveNode, SealedState, asm_decrypt, asm_encrypt,
                           complete_channel, open_channel, read_release, sm_decrypt, sm_encrypt)
from revoc.errors import (BadAttestation, BadInputCiphertext, ChannelAuthFailure, ChannelClosed,
                          ContractFault, HandshakeFailure, NotRegistered, StaleState,
                          UnconfirmedTransaction, UnknownContract, UnknownContractKind)
from revoc.fbs import tracer_keygen
from revoc.parties import run_issuance, run_trace_credential, run_trace_identity


def confirm(w, txid):
    while not w.ledger.is_confirmed(txid):
        w.ledger.advance_block()


# --- primitives ---------------------------------------------------------------

def test_sm_roundtrip_and_integrity():
    key = AESGCM.generate_key(bit_length=256)
    ct = sm_encrypt(key, b"hello", b"aad")
    assert sm_decrypt(key, ct, b"aad") == b"hello"
    for bad in (lambda: sm_decrypt(key, ct, b"other"),
                lambda: sm_decrypt(AESGCM.generate_key(bit_length=256), ct, b"aad"),
                lambda: sm_decrypt(key, ct[:-1] + bytes([ct[-1] ^ 1]), b"aad"),
                lambda: sm_decrypt(key, b"short", b"aad")):
        with pytest.raises(InvalidTag):
            bad()


def test_asm_roundtrip(params):
    sk = params.random_scalar()
    ct = asm_encrypt(params.g ** sk, b"payload", b"ctx")
    assert asm_decrypt(params, sk, ct, b"ctx") == b"payload"
    with pytest.raises(InvalidTag):
        asm_decrypt(params, sk + 1, ct, b"ctx")
    with pytest.raises(InvalidTag):
        asm_decrypt(params, sk, b"\xff" * len(ct), b"ctx")


# --- deployment & attestation -------------------------------------------------

def test_deploy_bundle_binds_outputs(toy_world):
    w = toy_world
    code = bytecode(w.params.backend_id)
    b1, b2 = w.node.deploy_contract(code), w.node.deploy_contract(code)
    assert b1.contract_id != b2.contract_id and b1.pk_in != b2.pk_in
    assert b1.state_init.version == 0
    rep = b1.attestation
    assert rep.measurement == sha256(code) and rep.contract_id == b1.contract_id
    assert rep.pk_in == b1.pk_in.encode() and rep.state_hash == sha256(b1.state_init.to_bytes())
    assert check_report(rep, w.platform.authority.manufacturer_pub)
    pi = w.platform.authority.verify_attestation(rep)
    assert check_service_proof(rep, pi, w.platform.authority.service_pub)
    w.node.publish(b1, pi)


@pytest.mark.parametrize("code", [b"not json", b'{"kind":"other/v9","init":{}}', b"[]"])
def test_unknown_contract_kind(toy_world, code):
    with pytest.raises(UnknownContractKind):
        toy_world.node.deploy_contract(code)


def test_contract_for_other_group_refused(toy_world, ec):
    with pytest.raises(UnknownContractKind):
        toy_world.node.deploy_contract(bytecode(ec.backend_id))


def test_bad_attestation(toy_world):
    w = toy_world
    rep = w.node.deploy_contract(bytecode(w.params.backend_id)).attestation
    for bad in (dataclasses.replace(rep, measurement=sha256(b"evil")),
                dataclasses.replace(rep, endorsement=bytes(64)),
                dataclasses.replace(rep, state_hash=bytes(32))):
        with pytest.raises(BadAttestation):
            w.platform.authority.verify_attestation(bad)


def test_unendorsed_enclave_rejected(toy_world):
    w = toy_world
    rogue = EnclaveNode(w.params, type(w.platform.authority)(), w.ledger)
    rep = rogue.deploy_contract(bytecode(w.params.backend_id)).attestation
    with pytest.raises(BadAttestation):
        w.platform.authority.verify_attestation(rep)


# --- secure channel -----------------------------------------------------------

def test_channel_both_directions(params):
    w = build_world(params)
    ch = open_channel(w.node, w.tracer.keys, w.cid)
    enclave_end = w.node._channels[ch.channel_id]
    assert enclave_end.transcript == ch.transcript
    assert enclave_end.open(ch.seal(b"to enclave")) == b"to enclave"
    assert ch.open(w.node.channel_send(ch.channel_id, b"to tracer")) == b"to tracer"


def test_channel_unknown_contract(toy_world):
    with pytest.raises(UnknownContract):
        open_channel(toy_world.node, toy_world.tracer.keys, bytes(32))


def test_channel_mismatched_tau(toy_world):
    w = toy_world
    hello = ChannelHello.create(w.tracer.keys, w.cid)
    other = tracer_keygen(w.params)
    while other.tau == w.tracer.keys.tau:
        other = tracer_keygen(w.params)
    with pytest.raises(HandshakeFailure):
        w.node.accept_channel(dataclasses.replace(hello, tau=other.tau))
    # signature from a different enclave key is rejected by the tracer
    accept = w.node.accept_channel(hello)
    with pytest.raises(HandshakeFailure):
        complete_channel(w.tracer.keys, hello, accept, bytes(32))


def test_channel_bit_flip_dropped(ec_world):
    w = ec_world
    ch = open_channel(w.node, w.tracer.keys, w.cid)
    sealed = w.node.channel_send(ch.channel_id, b"secret")
    with pytest.raises(ChannelAuthFailure):
        ch.open(sealed[:-1] + bytes([sealed[-1] ^ 1]))
    assert ch.open(sealed) == b"secret"      # the honest message still arrives
    with pytest.raises(ChannelAuthFailure):
        ch.open(sealed)                       # replays are out of sequence


def test_channel_closed(toy_world):
    w = toy_world
    ch = open_channel(w.node, w.tracer.keys, w.cid)
    w.node.close_channel(ch.channel_id)
    with pytest.raises(ChannelClosed):
        w.node.channel_send(ch.channel_id, b"x")
    ch.close()
    with pytest.raises(ChannelClosed):
        ch.seal(b"x")


# --- execution ----------------------------------------------------------------

def test_trace_result_after_confirmation(ec_world):
    w = ec_world
    cred = run_issuance(w.bus, w.new_user("a"), "issuer", b"m")
    sid = next(iter(w.issuer.registry))
    ch, res, txid = submit_trace(w, TraceRequest.credential(sid))
    with pytest.raises(UnconfirmedTransaction):
        w.node.release_output(ch.channel_id, txid)
    w.ledger.advance_block()
    with pytest.raises(UnconfirmedTransaction):
        w.node.release_output(ch.channel_id, txid)
    w.ledger.advance_block()
    result, summary = read_release(w.params, ch, w.node.release_output(ch.channel_id, txid))
    assert result.results == (cred.zeta1,) and result.meter_delta == 1
    assert summary["version"] == res.state.version


def test_wrong_key_input(toy_world):
    w = toy_world
    ch = open_channel(w.node, w.tracer.keys, w.cid)
    ct = asm_encrypt(w.params.g ** 5, TraceRequest.credential(w.params.g).to_bytes(), w.cid)
    with pytest.raises(BadInputCiphertext):
        w.node.execute(w.cid, ct, channel_id=ch.channel_id)
    ct = asm_encrypt(w.node.pk_in(w.cid), TraceRequest.credential(w.params.g).to_bytes(), b"other")
    with pytest.raises(BadInputCiphertext):
        w.node.execute(w.cid, ct, channel_id=ch.channel_id)


def test_rollback_and_tamper_rejected(toy_world):
    w = toy_world
    old = w.node.storage[w.cid]
    submit_trace(w, TraceRequest.credential(w.params.g))
    ch = open_channel(w.node, w.tracer.keys, w.cid)
    ct = asm_encrypt(w.node.pk_in(w.cid), TraceRequest.credential(w.params.g).to_bytes(), w.cid)
    with pytest.raises(StaleState):
        w.node.execute(w.cid, ct, old, channel_id=ch.channel_id)
    latest = w.node.storage[w.cid]
    forged = SealedState(w.cid, latest.version, latest.blob[:-1] + bytes([latest.blob[-1] ^ 1]))
    with pytest.raises(StaleState):
        w.node.execute(w.cid, ct, forged, channel_id=ch.channel_id)
    assert w.node.execute(w.cid, ct, latest, channel_id=ch.channel_id).state.version == latest.version + 1


def test_contract_fault_leaves_state(toy_world):
    w = toy_world
    cid = w.node.deploy(bytecode(w.params.backend_id))
    ch = open_channel(w.node, w.tracer.keys, cid)
    before = w.node.storage[cid]
    for req in (TraceRequest.credential(w.params.g).to_bytes(), b"\x00\x00", b"\x00\x00\x00\x01x\x00\x00\x00\x00"):
        ct = asm_encrypt(w.node.pk_in(cid), req, cid)
        with pytest.raises(ContractFault):
            w.node.execute(cid, ct, channel_id=ch.channel_id)
    assert w.node.storage[cid] == before
    assert issubclass(NotRegistered, ContractFault)


def test_output_keys_single_use_and_ciphertext_opaque(toy_world):
    w = toy_world
    keys = []
    for _ in range(20):
        _, res, _ = submit_trace(w, TraceRequest.credential(w.params.g))
        keys.append(w.node._pending[res.request_id].output_key)
        with pytest.raises(InvalidTag):
            sm_decrypt(AESGCM.generate_key(bit_length=256), res.output_ct, b"revoc/out" + w.cid)
    assert len(set(keys)) == 20


def test_unknown_request_id_and_unsubmitted_release(toy_world):
    w = toy_world
    with pytest.raises(UnknownContract):
        w.node.acknowledge("nope")
    with pytest.raises(UnconfirmedTransaction):
        w.node.release_output("x", bytes(32))


def test_release_only_on_own_channel(toy_world):
    w = toy_world
    ch, _, txid = submit_trace(w, TraceRequest.credential(w.params.g))
    other = open_channel(w.node, w.tracer.keys, w.cid)
    confirm(w, txid)
    with pytest.raises(ChannelClosed):
        w.node.release_output(other.channel_id, txid)
    w.node.close_channel(ch.channel_id)
    with pytest.raises(ChannelClosed):
        w.node.release_output(ch.channel_id, txid)


def test_versions_strictly_increase_under_concurrency(ec_world):
    w = ec_world
    versions, errors = [], []

    def worker():
        try:
            _, res, _ = submit_trace(w, TraceRequest.identity(w.params.h))
            versions.append(res.state.version)
        except Exception as exc:  # pragma: no cover - reported below
            errors.append(exc)

    start = w.node.storage[w.cid].version
    threads = [threading.Thread(target=worker) for _ in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert sorted(versions) == list(range(start + 1, start + 17))


def test_release_events_follow_confirmation(ec_world):
    w = ec_world
    cred = run_issuance(w.bus, w.new_user(), "issuer", b"m")
    run_trace_identity(w.bus, w.tracer, cred.zeta1, w.issuer.registry)
    run_trace_credential(w.bus, w.tracer, next(iter(w.issuer.registry)))
    submitted = {t: i for i, (e, t) in enumerate(w.node.events) if e == "submitted"}
    for i, (event, txid) in enumerate(w.node.events):
        if event == "released":
            assert submitted[txid] < i


def test_secret_confinement(ec_world):
    w = ec_world
    creds = [run_issuance(w.bus, w.new_user(f"u{i}"), "issuer", b"m") for i in range(3)]
    for sid in list(w.issuer.registry):
        run_trace_credential(w.bus, w.tracer, sid)
    run_trace_identity(w.bus, w.tracer, creds[0].zeta1, w.issuer.registry)
    keys = w.node.key_manager._contract_keys(w.cid)
    state_pt = sm_decrypt(keys.key_state, w.node.storage[w.cid].blob, w.node.storage[w.cid].aad())
    x_t = TracingContract.from_state_bytes(state_pt).x_t
    secrets_ = [w.params.encode_scalar(x_t), w.params.encode_scalar(keys.sk_in), keys.key_state, state_pt[:64]]
    secrets_ += [s.hex().encode() for s in secrets_[:3]]
    for sid in w.issuer.registry:
        secrets_ += [sid.encode(), (sid ** x_t).encode()]
    emitted = w.node.emitted + [w.ledger.to_bytes()]
    for blob in emitted:
        for s in secrets_:
            assert s not in blob


def test_node_state_roundtrip(toy_world):
    w = toy_world
    again = EnclaveNode.from_dict(w.params, w.platform.authority, w.ledger, w.node.to_dict())
    assert again.public_key == w.node.public_key and again.pk_in(w.cid) == w.node.pk_in(w.cid)
    ch = open_channel(again, w.tracer.keys, w.cid)
    ct = asm_encrypt(again.pk_in(w.cid), TraceRequest.credential(w.params.g).to_bytes(), w.cid)
    assert again.execute(w.cid, ct, channel_id=ch.channel_id).state.version == w.node.storage[w.cid].version + 1
