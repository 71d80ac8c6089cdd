"""Operator command line.

Exit codes: 0 success, 1 runtime error, 2 configuration error,
3 test-expectation failure.
"""

from __future__ import annotations

import dataclasses
import json
import os
import signal
import sys
import threading
from pathlib import Path

import click

from . import config as config_mod
from .admin import AdminApi
from .ca import (
    KeystoreError,
    forge_leaf,
    generate_ca,
    load_ca,
    save_ca,
    serialize_keystore,
    verify_keystore,
)
from .config import Config, ConfigError, read_key_file, write_key_file
from .enforcer import Enforcer
from .events import EventBus
from .ident import NullResolver, ProcfsResolver
from .oracle import OracleServer
from .pentest import ForgedLeafCache, VerdictLog, VerdictRecorder
from .proxy import Mode, PolicyMode, ProxyServer
from .whitelist import StoreError, open_store

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_EXPECTATION = 3


def _load_config(ctx) -> Config:
    overrides = {}
    field_map = {f.name: f for f in dataclasses.fields(Config)}
    for item in ctx.obj["sets"]:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        if key not in field_map:
            raise ConfigError(f"unknown config key {key!r}")
        overrides[key] = config_mod._parse_value(field_map[key], value)
    return config_mod.load(ctx.obj["config_path"], overrides=overrides)


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None, help="Config file path.")
@click.option("--set", "sets", multiple=True, metavar="KEY=VALUE", help="Override a config key.")
@click.pass_context
def main(ctx, config_path, sets):
    """Pen-test local HTTPS clients and shield the vulnerable ones."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["sets"] = list(sets)


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


# -- ca ----------------------------------------------------------------------


@main.group()
def ca():
    """Interception CA and pinned oracle keystore management."""


@ca.command("init")
@click.option("--validity-days", default=365, show_default=True)
@click.option("--key-profile", default="default", show_default=True)
@click.pass_context
def ca_init(ctx, validity_days, key_profile):
    """Create the CA, the oracle TLS identity, the pinned keystore and keys."""
    try:
        cfg = _load_config(ctx)
        ca_dir = Path(cfg.ca_dir)
        material = generate_ca(validity_days, key_profile)
        save_ca(material, ca_dir)

        from urllib.parse import urlsplit

        oracle_host = urlsplit(cfg.oracle_endpoint).hostname or "localhost"
        leaf = forge_leaf(material, oracle_host)
        (ca_dir / "oracle.pem").write_bytes(leaf.cert_pem())
        key_path = ca_dir / "oracle.key"
        key_path.write_bytes(leaf.key_pem())
        key_path.chmod(0o600)

        if not Path(cfg.keystore_mac_key_file).exists():
            write_key_file(cfg.keystore_mac_key_file, os.urandom(32))
        mac_key = read_key_file(cfg.keystore_mac_key_file)
        from cryptography.hazmat.primitives.serialization import Encoding

        Path(cfg.keystore_path).write_bytes(
            serialize_keystore(leaf.certificate.public_bytes(Encoding.DER), mac_key)
        )
        if not Path(cfg.store_key_file).exists():
            write_key_file(cfg.store_key_file, os.urandom(32))
        click.echo(f"CA initialized in {ca_dir}; keystore pinned to oracle leaf for {oracle_host}")
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except Exception as exc:
        _fail(EXIT_RUNTIME, str(exc))


@ca.command("export")
@click.option("--out", type=click.Path(), default="sslsentry-root.pem", show_default=True)
@click.pass_context
def ca_export(ctx, out):
    """Write the CA root PEM for installation into client trust stores."""
    try:
        cfg = _load_config(ctx)
        material = load_ca(Path(cfg.ca_dir))
        Path(out).write_bytes(material.root_pem())
        click.echo(f"wrote {out}")
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except Exception as exc:
        _fail(EXIT_RUNTIME, str(exc))


# -- services ------------------------------------------------------------------


def _build_resolver():
    if os.path.exists("/proc/net/tcp"):
        return ProcfsResolver()
    return NullResolver()


@main.group()
def proxy():
    """The interception proxy."""


@proxy.command("run")
@click.pass_context
def proxy_run(ctx):
    """Run the proxy and its admin API in the foreground."""
    try:
        cfg = _load_config(ctx)
        material = load_ca(Path(cfg.ca_dir))
        store = open_store(cfg.store_path, read_key_file(cfg.store_key_file))
        mac_key = read_key_file(cfg.keystore_mac_key_file)
        keystore = verify_keystore(Path(cfg.keystore_path).read_bytes(), mac_key)
        trust_pem = (
            Path(cfg.upstream_trust_path).read_bytes() if cfg.upstream_trust_path else None
        )
        enforcer = Enforcer(
            keystore=keystore,
            oracle_endpoint=cfg.oracle_endpoint,
            upstream_trust_pem=trust_pem,
            use_system_trust=cfg.use_system_trust,
            cache_ttl=cfg.cache_ttl,
            oracle_timeout=cfg.oracle_timeout,
            fetch_timeout=cfg.fetch_timeout,
        )
        bus = EventBus(sink=sys.stdout)
        policy = PolicyMode(
            mode=Mode(cfg.mode),
            manual_selection=frozenset(cfg.manual_selection),
            pending_timeout=cfg.pending_timeout,
        )
        server = ProxyServer(
            leaf_cache=ForgedLeafCache(material),
            store=store,
            resolver=_build_resolver(),
            recorder=VerdictRecorder(store, VerdictLog(cfg.verdict_log_path)),
            enforcer=enforcer,
            bus=bus,
            policy=policy,
            bind=cfg.proxy_bind,
            port=cfg.proxy_port,
            decision_window=cfg.decision_window,
            mirror_upstream=cfg.mirror_upstream,
        )
        admin = AdminApi(server, bind=cfg.admin_bind, port=cfg.admin_port)
    except (ConfigError, OSError) as exc:
        _fail(EXIT_CONFIG, str(exc))
        return
    except (KeystoreError, StoreError) as exc:
        _fail(EXIT_RUNTIME, str(exc))
        return

    server.start()
    admin.start()
    click.echo(
        f"proxy on {cfg.proxy_bind}:{server.port}, admin API on {cfg.admin_bind}:{admin.port}",
        err=True,
    )
    _wait_for_interrupt()
    admin.stop()
    server.stop()


@main.group()
def oracle():
    """The chain oracle service."""


@oracle.command("run")
@click.pass_context
def oracle_run(ctx):
    """Run the oracle in the foreground."""
    try:
        cfg = _load_config(ctx)
        ca_dir = Path(cfg.ca_dir)
        cert_pem = (ca_dir / "oracle.pem").read_bytes()
        key_pem = (ca_dir / "oracle.key").read_bytes()
        server = OracleServer(
            cert_pem,
            key_pem,
            bind=cfg.oracle_bind,
            port=cfg.oracle_port,
            fetch_timeout=cfg.fetch_timeout,
            rate_limit_per_min=cfg.oracle_rate_limit,
        )
    except (ConfigError, OSError) as exc:
        _fail(EXIT_CONFIG, str(exc))
        return
    server.start()
    click.echo(f"oracle on {cfg.oracle_bind}:{server.port}", err=True)
    _wait_for_interrupt()
    server.stop()


def _wait_for_interrupt():
    stop = threading.Event()

    def handler(_sig, _frame):
        stop.set()

    signal.signal(signal.SIGINT, handler)
    signal.signal(signal.SIGTERM, handler)
    try:
        stop.wait()
    except KeyboardInterrupt:
        pass


# -- whitelist & verdicts --------------------------------------------------------


@main.group()
def whitelist():
    """Inspect and edit the PenProof whitelist."""


@whitelist.command("list")
@click.pass_context
def whitelist_list(ctx):
    try:
        cfg = _load_config(ctx)
        store = open_store(cfg.store_path, read_key_file(cfg.store_key_file))
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
        return
    except StoreError as exc:
        _fail(EXIT_RUNTIME, str(exc))
        return
    for entry in store.entries():
        flag = " [enforce]" if entry.enforce_anyway else ""
        click.echo(
            f"{entry.descriptor.name}\t{entry.descriptor.version}\t{entry.descriptor.first_url}{flag}"
        )


@whitelist.command("remove")
@click.argument("name")
@click.argument("version")
@click.pass_context
def whitelist_remove(ctx, name, version):
    try:
        cfg = _load_config(ctx)
        store = open_store(cfg.store_path, read_key_file(cfg.store_key_file))
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
        return
    except StoreError as exc:
        _fail(EXIT_RUNTIME, str(exc))
        return
    if store.remove(name, version):
        click.echo(f"removed {name} {version}")
    else:
        _fail(EXIT_RUNTIME, f"no whitelist entry for {name} {version}")


@main.group()
def pentest():
    """Pen-test verdict history."""


@pentest.command("report")
@click.pass_context
def pentest_report(ctx):
    try:
        cfg = _load_config(ctx)
        rows = VerdictLog.read_file(cfg.verdict_log_path)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
        return
    except OSError as exc:
        _fail(EXIT_RUNTIME, str(exc))
        return
    for row in rows:
        click.echo(
            f"{row['ts']:.3f}\t{row['client']}\t{row['version']}\t{row['verdict']}\t{row['evidence']}"
        )


# -- mode -------------------------------------------------------------------------


@main.group()
def mode():
    """Policy mode control."""


@mode.command("set")
@click.argument("new_mode", type=click.Choice(["automatic", "selective", "manual"]))
@click.option("--select", "selection", default="", help="Comma-separated client names (manual mode).")
@click.pass_context
def mode_set(ctx, new_mode, selection):
    """Persist the mode to the config file and apply it to a running proxy."""
    try:
        cfg = _load_config(ctx)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
        return
    cfg = dataclasses.replace(
        cfg,
        mode=new_mode,
        manual_selection=tuple(s for s in selection.split(",") if s),
    ).validate()
    path = ctx.obj["config_path"]
    if path:
        Path(path).write_text(config_mod.render(cfg))
        click.echo(f"wrote mode={new_mode} to {path}")
    applied = _post_mode(cfg)
    if applied:
        click.echo("applied to running proxy")


def _post_mode(cfg: Config) -> bool:
    import urllib.request

    body = json.dumps(
        {"mode": cfg.mode, "manual_selection": list(cfg.manual_selection)}
    ).encode()
    request = urllib.request.Request(
        f"http://{cfg.admin_bind}:{cfg.admin_port}/mode",
        data=body,
        headers={"Content-Type": "application/json"},
    )
    try:
        with urllib.request.urlopen(request, timeout=2) as resp:
            return resp.status == 200
    except OSError:
        return False


# -- simlab -------------------------------------------------------------------------


@main.group()
def simlab():
    """Desk-scale experiments against synthetic clients and attackers."""


@simlab.command("detect")
@click.option("--runs", default=3, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def simlab_detect(runs, as_json):
    """Detection matrix: verdicts for the three client archetypes."""
    from .simlab import EXPECTED_DETECTION, Lab, run_detection_matrix

    expected = {f"{b.value}-client": v for b, v in EXPECTED_DETECTION.items()}
    failures = 0
    tables = []
    with Lab() as lab:
        for _ in range(runs):
            table = run_detection_matrix(lab)
            tables.append(table)
            if table != expected:
                failures += 1
            lab.store.clear()
    if as_json:
        click.echo(json.dumps({"expected": expected, "runs": tables}, indent=2))
    else:
        for name, verdict in tables[-1].items():
            mark = "ok" if expected.get(name) == verdict else "FAIL"
            click.echo(f"{name}\t{verdict}\t{mark}")
        click.echo(f"{runs - failures}/{runs} runs matched expectations")
    sys.exit(EXIT_OK if failures == 0 else EXIT_EXPECTATION)


@simlab.command("attack")
@click.option("--trials", default=3, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def simlab_attack(trials, as_json):
    """Attack matrix: enforcement outcome per rogue-MITM placement."""
    from .simlab import EXPECTED_ATTACK, run_attack_matrix

    results = run_attack_matrix(trials=trials)
    expected = {p.value: action for p, action in EXPECTED_ATTACK.items()}
    ok = all(
        all(action == expected[placement] for action in actions)
        for placement, actions in results.items()
    )
    if as_json:
        click.echo(json.dumps({"expected": expected, "observed": results}, indent=2))
    else:
        for placement, actions in results.items():
            mark = "ok" if all(a == expected[placement] for a in actions) else "FAIL"
            click.echo(f"{placement}\t{','.join(set(actions))}\t{mark}")
    sys.exit(EXIT_OK if ok else EXIT_EXPECTATION)


@simlab.command("bench")
@click.option("--trials", default=30, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def simlab_bench(trials, as_json):
    """Passthrough vs enforcing overhead on a login-like exchange."""
    from .simlab import run_overhead_bench

    report = run_overhead_bench(trials=trials)
    if as_json:
        click.echo(json.dumps(report.to_dict(), indent=2))
    else:
        click.echo(f"scenario: {report.scenario} ({report.trials} trials)")
        click.echo(
            f"baseline: median {report.baseline_ms['median']:.1f} ms, p95 {report.baseline_ms['p95']:.1f} ms"
        )
        click.echo(
            f"enforcing: median {report.protected_ms['median']:.1f} ms, p95 {report.protected_ms['p95']:.1f} ms"
        )
        click.echo(f"overhead ratio: {report.overhead_ratio:.2f}")
        click.echo(f"cold fetches/trial: {report.cold_fetches_per_trial[0]}, warm: {report.warm_fetches}")
        if not report.valid:
            click.echo(f"note: {report.note}")
    sys.exit(EXIT_OK if report.valid else EXIT_EXPECTATION)


@simlab.command("demo")
@click.option("--json", "as_json", is_flag=True)
def simlab_demo(as_json):
    """End-to-end credential-theft demo, unprotected vs enforcing."""
    from .simlab import run_attack_demo

    out = run_attack_demo()
    ok = (
        out["unprotected_leaked"]
        and not out["protected_leaked"]
        and out["protected_action"] == "BlockedMismatch"
    )
    if as_json:
        click.echo(json.dumps(out, indent=2))
    else:
        for key, value in out.items():
            click.echo(f"{key}: {value}")
    sys.exit(EXIT_OK if ok else EXIT_EXPECTATION)


if __name__ == "__main__":
    main()
