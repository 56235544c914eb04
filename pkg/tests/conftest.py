import sys
from pathlib import Path
from types import SimpleNamespace

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from revoc.fbs import issuer_keygen, tracer_keygen, user_keygen  # noqa: E402
from revoc.group import setup  # noqa: E402
from revoc.parties import (Inspector, Issuer, LocalBus, NodeEndpoint, Platform, Tracer,  # noqa: E402
                           User, Verifier, register_tracing_params)


@pytest.fixture(scope="session")
def toy():
    return setup(backend="toy")


@pytest.fixture(scope="session")
def ec():
    return setup(128, "ec")


@pytest.fixture(params=["toy", "ec"])
def params(request):
    return setup(backend=request.param)


def build_world(params, bus=None, *, confirmation_depth=2, ledger_path=None, tracing_key_source=None):
    """Deployed + registered tracing contract, issuer, verifier and one tracer on ``bus``."""
    platform = Platform(params, confirmation_depth=confirmation_depth, ledger_path=ledger_path,
                        tracing_key_source=tracing_key_source)
    cid = platform.deploy_tracing_contract()
    bus = bus if bus is not None else LocalBus()
    bus.register(NodeEndpoint("node", platform))
    issuer_key = issuer_keygen(params)
    tracer = Tracer(tracer_keygen(params), platform.ledger, cid)
    y_t = register_tracing_params(bus, tracer, issuer_key.public)
    issuer = bus.register(Issuer("issuer", issuer_key, y_t))
    verifier = bus.register(Verifier("verifier", issuer_key.public))
    inspector = bus.register(Inspector("inspector", platform.ledger))
    w = SimpleNamespace(params=params, platform=platform, ledger=platform.ledger, node=platform.node,
                        cid=cid, bus=bus, issuer_key=issuer_key, tracer=tracer, y_t=y_t,
                        issuer=issuer, verifier=verifier, inspector=inspector)
    w.new_user = lambda label="u": User(user_keygen(params, label), issuer_key.public, y_t)
    return w


@pytest.fixture
def toy_world(toy):
    w = build_world(toy)
    yield w
    w.bus.close()


@pytest.fixture
def ec_world(ec):
    w = build_world(ec)
    yield w
    w.bus.close()


def submit_trace(w, request, keys=None):
    """Execute + acknowledge directly on the node, leaving the tx unconfirmed.

    Returns (tracer channel end, execution result, txid).
    """
    from revoc.enclave import asm_encrypt, open_channel
    keys = keys or w.tracer.keys
    channel = open_channel(w.node, keys, w.cid)
    ct = asm_encrypt(w.node.pk_in(w.cid), request.to_bytes(), w.cid)
    res = w.node.execute(w.cid, ct, channel_id=channel.channel_id)
    return channel, res, w.node.acknowledge(res.request_id)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
