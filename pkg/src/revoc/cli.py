"""``revoc`` command line.

State lives in a home directory (``--home``, ``$REVOC_HOME``, default
``./.revoc``): platform keys and enclave storage, the ledger file, the
deployed contract id and the issuer's session registry.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import bench as benchmod
from .attestation import AttestationAuthority
from .errors import MalformedEncoding, NotRegistered, RevocError
from .fbs import (Credential, IssuerKey, IssuerPublicKey, SessionRegistry, TracerSessionKey,
                  UserIdentity, issuer_keygen, tracer_keygen, user_keygen, verify_sig)
from .group import setup
from .ledger import verify_file
from .parties import (InspectionPolicy, Inspector, Issuer, LocalBus, NodeEndpoint, Platform,
                      TcpBus, Tracer, User, Verifier, register_tracing_params, request_inspection,
                      run_batch_trace, run_inspection, run_issuance, run_trace_credential,
                      run_trace_identity, run_verification)

KIND_ALIASES = {"cred": "credential", "credential": "credential", "id": "identity", "identity": "identity"}
KEY_TYPES = {"issuer": IssuerKey, "user": UserIdentity, "tracer": TracerSessionKey}


def _backend(args):
    return getattr(args, "backend", None) or os.environ.get("REVOC_BACKEND", "ec")


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_key(path, role: str):
    d = _read_json(path)
    if d.get("role") != role:
        raise MalformedEncoding(f"{path} holds a {d.get('role')!r} key, expected {role!r}")
    return KEY_TYPES[role].from_dict(d)


class Home:
    """On-disk state of one simulated deployment."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, name) -> Path:
        return self.root / name

    @property
    def initialized(self):
        return self.path("platform.json").exists()

    def init(self, backend: str, confirmation_depth: int, block_interval: float, force: bool = False):
        if self.initialized and not force:
            raise RevocError(f"{self.root} already initialized (use --force)")
        self.root.mkdir(parents=True, exist_ok=True)
        for name in ("ledger.bin", "contract.json", "registry.json"):
            self.path(name).unlink(missing_ok=True)
        params = setup(backend=backend)
        platform = Platform(params, confirmation_depth=confirmation_depth, block_interval=block_interval,
                            ledger_path=self.path("ledger.bin"))
        self._save_platform(platform)
        return platform

    def platform(self) -> Platform:
        if not self.initialized:
            raise RevocError(f"{self.root} is not initialized; run `revoc setup` first")
        d = _read_json(self.path("platform.json"))
        return Platform(setup(backend=d["backend"]), confirmation_depth=d["confirmation_depth"],
                        block_interval=d["block_interval"], ledger_path=self.path("ledger.bin"),
                        authority=AttestationAuthority.from_dict(d["authority"]), node_state=d["node"])

    def _save_platform(self, platform: Platform):
        _write_json(self.path("platform.json"), {
            "backend": platform.params.backend_id,
            "confirmation_depth": platform.ledger.confirmation_depth,
            "block_interval": platform.ledger.block_interval,
            "authority": platform.authority.to_dict(),
            "node": platform.node.to_dict(),
        })

    save_platform = _save_platform

    def contract(self) -> dict:
        if not self.path("contract.json").exists():
            raise NotRegistered("no tracing contract deployed and registered; run `revoc deploy`")
        return _read_json(self.path("contract.json"))

    def registry(self, params) -> SessionRegistry:
        p = self.path("registry.json")
        return SessionRegistry.from_dict(params, _read_json(p)) if p.exists() else SessionRegistry()

    def save_registry(self, registry: SessionRegistry):
        _write_json(self.path("registry.json"), registry.to_dict())


def _emit(args, obj, text):
    print(json.dumps(obj, indent=2, sort_keys=True) if getattr(args, "json", False) else text)


# --- subcommands ------------------------------------------------------------

def cmd_setup(args, home: Home):
    platform = home.init(_backend(args), args.confirmation_depth, args.block_interval, args.force)
    p = platform.params
    _emit(args, {"backend": p.backend_id, "q_bits": p.q.bit_length(), "home": str(home.root)},
          f"initialized {home.root} ({p.backend_id}, |q| = {p.q.bit_length()} bits)")


def cmd_keygen(args, home: Home):
    params = setup(backend=_backend(args))
    if args.role == "issuer":
        key = issuer_keygen(params)
    elif args.role == "user":
        key = user_keygen(params, args.label or "")
    else:
        key = tracer_keygen(params)
    _write_json(args.out, key.to_dict())
    print(f"wrote {args.role} key to {args.out}")


def cmd_deploy(args, home: Home):
    platform = home.platform()
    issuer = load_key(args.issuer, "issuer")
    tracer_keys = load_key(args.tracer, "tracer")
    cid = platform.deploy_tracing_contract()
    bus = LocalBus()
    bus.register(NodeEndpoint("node", platform))
    y_t = register_tracing_params(bus, Tracer(tracer_keys, platform.ledger, cid), issuer.public)
    home.save_platform(platform)
    info = {"contract_id": cid.hex(), "y_t": y_t.encode().hex(), "issuer": issuer.public.to_dict(),
            "tracers": [tracer_keys.tau.encode().hex()]}
    _write_json(home.path("contract.json"), info)
    _emit(args, info, f"contract {cid.hex()}\ny_t {info['y_t']}")


def cmd_issue(args, home: Home):
    contract = home.contract()
    issuer = load_key(args.issuer, "issuer")
    user_id = load_key(args.user, "user")
    params = issuer.params
    y_t = params.decode_element(bytes.fromhex(contract["y_t"]))
    bus = LocalBus()
    endpoint = bus.register(Issuer("issuer", issuer, y_t))
    endpoint.registry = home.registry(params)
    before = set(endpoint.registry)
    cred = run_issuance(bus, User(user_id, issuer.public, y_t), "issuer", args.attrs.encode())
    home.save_registry(endpoint.registry)
    session_id = next(s for s in endpoint.registry if s not in before)
    _write_json(args.out, cred.to_dict())
    _emit(args, {"session_id": session_id.encode().hex(), "credential": args.out},
          f"credential written to {args.out}\nsession id {session_id.encode().hex()}")


def cmd_verify(args, home: Home):
    d = _read_json(args.issuer)
    pub = IssuerPublicKey.from_dict(d)
    cred = Credential.from_dict(pub.params, _read_json(args.cred))
    ok = verify_sig(pub, cred)
    _emit(args, {"valid": ok}, "valid" if ok else "invalid")
    return 0 if ok else 1


def _trace_context(args, home: Home):
    contract = home.contract()
    platform = home.platform()
    keys = load_key(args.tracer, "tracer")
    bus = LocalBus()
    bus.register(NodeEndpoint("node", platform))
    return platform, bus, Tracer(keys, platform.ledger, bytes.fromhex(contract["contract_id"]))


def _outcome_json(out, labels=None):
    d = {"results": [e.encode().hex() for e in out.result.results], "txid": out.txid.hex(),
         "height": out.receipt.height, "meter": out.result.meter_delta}
    if labels is not None:
        d["labels"] = labels
    return d


def cmd_trace(args, home: Home):
    platform, bus, tracer = _trace_context(args, home)
    params = platform.params
    dec = lambda h: params.decode_element(bytes.fromhex(h))  # noqa: E731
    try:
        if args.what == "cred":
            out = run_trace_credential(bus, tracer, dec(args.session_id))
            d = _outcome_json(out)
            text = f"zeta1 {d['results'][0]}"
        elif args.what == "id":
            out = run_trace_identity(bus, tracer, dec(args.zeta1), home.registry(params))
            d = _outcome_json(out, out.labels)
            text = f"session id {d['results'][0]}\nuser {out.labels[0]}"
        else:
            kind = KIND_ALIASES[args.kind]
            registry = home.registry(params) if kind == "identity" else None
            out = run_batch_trace(bus, tracer, kind, [dec(h) for h in args.operands], registry)
            d = _outcome_json(out, out.labels or None)
            text = "\n".join(d["results"])
    finally:
        home.save_platform(platform)
    _emit(args, d, f"{text}\ntx {d['txid']} at height {d['height']}")


def cmd_inspect(args, home: Home):
    platform = home.platform()
    cid = bytes.fromhex(args.contract)
    allow = args.allow
    if allow is None and home.path("contract.json").exists():
        allow = home.contract().get("tracers")
    policy = InspectionPolicy(
        allowlist=frozenset(bytes.fromhex(a) for a in allow) if allow is not None else None,
        rate_threshold=args.rate_threshold, rate_window=args.rate_window,
        permitted_windows=tuple(tuple(w) for w in args.permitted) if args.permitted else None)
    report = Inspector("inspector", platform.ledger, policy).inspect(cid, tuple(args.window) if args.window else None)
    if args.json:
        print(report.to_json().decode())
        return
    print(f"contract {report.contract_id}: {report.summary['total']} tracing transactions, chain "
          f"{'ok' if report.chain_ok else 'CORRUPT'}")
    for kind, n in report.summary["by_kind"].items():
        print(f"  {kind}: {n}")
    for a in report.anomalies:
        print(f"  anomaly ({a['rule']}): {a['detail']}")


def cmd_ledger(args, home: Home):
    path = args.file or home.path("ledger.bin")
    check = verify_file(path)
    _emit(args, {"ok": check.ok, "first_bad_height": check.first_bad_height, "reason": check.reason,
                 "tip_height": check.tip_height},
          f"ok, {check.tip_height + 1} blocks" if check.ok
          else f"corrupt at height {check.first_bad_height}: {check.reason}")
    return 0 if check.ok else 1


def cmd_bench(args, home: Home):
    rows = benchmod.run_bench(args.n, _backend(args), confirmation_depth=args.confirmation_depth,
                              block_interval=args.block_interval)
    print(benchmod.to_json(rows) if args.json else benchmod.format_table(rows))


def cmd_demo(args, home: Home):
    """All actors on their own localhost TCP port."""
    params = setup(backend=_backend(args))
    platform = Platform(params, block_interval=args.block_interval)
    cid = platform.deploy_tracing_contract()
    issuer_key = issuer_keygen(params)
    issuer_tracer = Tracer(tracer_keygen(params), platform.ledger, cid)
    verifier_tracer = Tracer(tracer_keygen(params), platform.ledger, cid)
    with TcpBus() as bus:
        bus.register(NodeEndpoint("node", platform))
        y_t = register_tracing_params(bus, issuer_tracer, issuer_key.public)
        issuer = bus.register(Issuer("issuer", issuer_key, y_t))
        bus.register(Verifier("verifier", issuer_key.public))
        allow = frozenset(t.keys.tau.encode() for t in (issuer_tracer, verifier_tracer))
        bus.register(Inspector("inspector", platform.ledger, InspectionPolicy(allowlist=allow)))
        for name, port in sorted(bus.addresses.items()):
            print(f"{name:<10} listening on {port[0]}:{port[1]}")

        creds = []
        for i in range(args.users):
            user = User(user_keygen(params, f"user-{i}"), issuer_key.public, y_t)
            cred = run_issuance(bus, user, "issuer", json.dumps({"user": i}).encode())
            print(f"issued credential to user-{i}, verifier says {run_verification(bus, cred, 'verifier')}")
            creds.append(cred)

        out = run_trace_identity(bus, verifier_tracer, creds[0].zeta1, issuer.registry)
        print(f"verifier traced credential 0 to {out.labels[0]} (tx height {out.receipt.height})")
        session = next(iter(issuer.registry))
        out = run_trace_credential(bus, issuer_tracer, session)
        print(f"issuer traced a session to zeta1 {out.element.encode().hex()[:16]}...")
        out = run_batch_trace(bus, verifier_tracer, "identity", [c.zeta1 for c in creds], issuer.registry)
        print(f"batch trace of {len(creds)} credentials -> {out.labels} in one transaction")

        platform.ledger.advance_block()
        platform.ledger.advance_block()
        report = request_inspection(bus, "inspector", cid)
    print(f"inspector: {report['summary']['total']} tracing transactions, "
          f"{len(report['anomalies'])} anomalies, chain {'ok' if report['chain_ok'] else 'CORRUPT'}")


# --- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="revoc", description="Auditable anonymity revocation toolkit")
    parser.add_argument("--home", default=os.environ.get("REVOC_HOME", ".revoc"),
                        help="state directory (default: $REVOC_HOME or ./.revoc)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, json_flag=True):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        if json_flag:
            p.add_argument("--json", action="store_true", help="machine-readable output")
        return p

    p = add("setup", cmd_setup, "create platform keys and an empty ledger")
    p.add_argument("--backend", choices=["ec", "toy"])
    p.add_argument("--confirmation-depth", type=int, default=2)
    p.add_argument("--block-interval", type=float, default=6.0)
    p.add_argument("--force", action="store_true")

    p = add("keygen", cmd_keygen, "generate an issuer, user or tracer key file", json_flag=False)
    p.add_argument("--role", choices=sorted(KEY_TYPES), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label", help="user handle recorded by the issuer")
    p.add_argument("--backend", choices=["ec", "toy"])

    p = add("deploy", cmd_deploy, "deploy the tracing contract and register the issuer")
    p.add_argument("--issuer", required=True, help="issuer key file")
    p.add_argument("--tracer", required=True, help="tracer key file used for registration")

    p = add("issue", cmd_issue, "run the blind issuing protocol")
    p.add_argument("--issuer", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--attrs", default="", help="attribute string signed as the message")
    p.add_argument("--out", required=True)

    p = add("verify", cmd_verify, "check a credential against an issuer public key")
    p.add_argument("--issuer", required=True, help="issuer key or public key file")
    p.add_argument("--cred", required=True)

    p = add("trace", cmd_trace, "trace through the contract (recorded on the ledger)", json_flag=False)
    tsub = p.add_subparsers(dest="what", required=True)
    for what, help_ in (("cred", "session id -> credential tag"), ("id", "credential tag -> user"),
                        ("batch", "many operands in one transaction")):
        tp = tsub.add_parser(what, help=help_)
        tp.add_argument("--tracer", required=True, help="tracer key file")
        tp.add_argument("--json", action="store_true")
        if what == "cred":
            tp.add_argument("--session-id", required=True)
        elif what == "id":
            tp.add_argument("--zeta1", required=True)
        else:
            tp.add_argument("--kind", choices=sorted(KIND_ALIASES), required=True)
            tp.add_argument("operands", nargs="+")

    p = add("inspect", cmd_inspect, "audit a contract's tracing transactions", json_flag=False)
    p.add_argument("--contract", required=True)
    p.add_argument("--json", action="store_true")
    p.add_argument("--allow", nargs="*", help="allowed tracer keys (hex); default: keys recorded at deploy")
    p.add_argument("--rate-threshold", type=int, default=10)
    p.add_argument("--rate-window", type=float, default=60.0)
    p.add_argument("--window", nargs=2, type=int, metavar=("LO", "HI"), help="block height range")
    p.add_argument("--permitted", nargs=2, type=float, action="append", metavar=("START", "END"),
                   help="permitted time window in simulated seconds (repeatable)")

    p = add("ledger", cmd_ledger, "ledger maintenance", json_flag=False)
    lsub = p.add_subparsers(dest="action", required=True)
    lp = lsub.add_parser("verify", help="recheck every block of a ledger file")
    lp.add_argument("--file")
    lp.add_argument("--json", action="store_true")

    p = add("bench", cmd_bench, "time the five headline operations")
    p.add_argument("-n", type=int, default=300)
    p.add_argument("--backend", choices=["ec", "toy"])
    p.add_argument("--confirmation-depth", type=int, default=3)
    p.add_argument("--block-interval", type=float, default=6.0)

    p = add("demo", cmd_demo, "run every actor over localhost TCP", json_flag=False)
    p.add_argument("--backend", choices=["ec", "toy"])
    p.add_argument("--users", type=int, default=3)
    p.add_argument("--block-interval", type=float, default=6.0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = args.func(args, Home(args.home))
    except RevocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
