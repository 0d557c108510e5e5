"""Operator and scripting client for the node's HTTP API, plus offline chain
tools and the wearable-device simulator.

Keys live client-side: ``approve`` writes the delivered keyfile with
owner-only permissions and ``login`` signs the challenge nonce locally, so
signatures sent to the service are produced from the local keyfile.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import requests

from . import canonical, crypto, ledger
from .castore import CAStore
from .errors import CareLedgerError, ChainCorrupt
from .motion import encode as encode_motion
from .motion import simulate_tremor

DEFAULT_SERVER = "http://127.0.0.1:8787"


class Client:
    def __init__(self, server: str, home: Path):
        self.server = server.rstrip("/")
        self.home = home
        self.session_path = home / "session.json"

    def token(self) -> str | None:
        if self.session_path.exists():
            return json.loads(self.session_path.read_text()).get("token")
        return None

    def save_session(self, data: dict) -> None:
        self.home.mkdir(parents=True, exist_ok=True)
        self.session_path.write_text(json.dumps(data, indent=2))
        os.chmod(self.session_path, 0o600)

    def _headers(self) -> dict:
        tok = self.token()
        return {"Authorization": f"Bearer {tok}"} if tok else {}

    def request(self, method: str, path: str, **kw):
        resp = requests.request(method, f"{self.server}/v1{path}", headers=self._headers(), **kw)
        if resp.status_code >= 400:
            try:
                body = resp.json()
                msg = f"{body.get('error', 'error')}: {body.get('reason', resp.text)}"
            except ValueError:
                msg = resp.text
            raise click.ClickException(f"HTTP {resp.status_code} — {msg}")
        return resp

    def get(self, path: str, **kw):
        return self.request("GET", path, **kw)

    def post(self, path: str, **kw):
        return self.request("POST", path, **kw)


def emit(ctx, data, human: str | None = None) -> None:
    if ctx.obj["json"]:
        click.echo(canonical.dumps(data).decode("utf-8"))
    else:
        click.echo(human if human is not None else json.dumps(data, indent=2, sort_keys=True))


def write_keyfile(path: Path, keyfile: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(canonical.dumps(keyfile))
    os.chmod(path, 0o600)


@click.group()
@click.option("--server", "-s", envvar="CARELEDGER_SERVER", default=DEFAULT_SERVER, show_default=True)
@click.option("--home", envvar="CARELEDGER_HOME", default="~/.careledger", show_default=True)
@click.option("--json", "as_json", is_flag=True, help="Canonical JSON output.")
@click.pass_context
def main(ctx, server, home, as_json):
    """Client for the careledger node."""
    ctx.ensure_object(dict)
    ctx.obj["client"] = Client(server, Path(home).expanduser())
    ctx.obj["json"] = as_json


@main.command()
@click.option("--config", "config_path", envvar="CARELEDGER_CONFIG", default=None)
@click.option("--data-dir", default=None)
@click.option("--listen", default=None)
@click.option("--tau", type=float, default=None)
@click.pass_context
def serve(ctx, config_path, data_dir, listen, tau):
    """Run the node (mints a genesis block on first start)."""
    from .service import NodeConfig, serve as run

    try:
        config = NodeConfig.load(config_path, data_dir=data_dir, listen=listen, tau=tau)
    except TypeError:
        raise click.ClickException("--data-dir (or a config file) is required")
    try:
        run(config)
    except ChainCorrupt as exc:
        click.echo(f"refusing to start: chain invalid, first_bad_height={exc.first_bad_height}", err=True)
        sys.exit(2)


@main.command()
@click.option("--user-id", required=True)
@click.option("--role", required=True, type=click.Choice(list(ledger.ROLES)))
@click.option("--name", "display_name", required=True)
@click.option("--bound-patient", default=None)
@click.pass_context
def register(ctx, user_id, role, display_name, bound_patient):
    """Request registration (queued until the admin approves)."""
    body = {"user_id": user_id, "role": role, "display_name": display_name}
    if bound_patient:
        body["bound_patient"] = bound_patient
    data = ctx.obj["client"].post("/register", json=body).json()
    emit(ctx, data, f"registration pending: {data['pending_id']}")


@main.command()
@click.argument("pending_id")
@click.option("--keyfile-out", type=click.Path(path_type=Path), default=None,
              help="Where to write the delivered keyfile (default <home>/<user>.key.json).")
@click.pass_context
def approve(ctx, pending_id, keyfile_out):
    """Approve a pending registration (admin session); saves the keyfile."""
    client = ctx.obj["client"]
    data = client.post(f"/pending/{pending_id}/approve").json()
    out = keyfile_out or client.home / f"{data['user_id']}.key.json"
    write_keyfile(out, data["keyfile"])
    emit(ctx, {"user_id": data["user_id"], "role": data["role"], "tx_id": data["tx_id"],
               "keyfile": str(out)},
         f"approved {data['user_id']} ({data['role']}); keyfile written to {out}")


@main.command()
@click.option("--keyfile", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--user-id", default=None, help="Defaults to the keyfile's user_id.")
@click.pass_context
def login(ctx, keyfile, user_id):
    """Challenge-response login; stores the session token under <home>."""
    client = ctx.obj["client"]
    kf = json.loads(keyfile.read_text())
    uid = user_id or kf["user_id"]
    nonce = client.post("/login/challenge", json={"user_id": uid}).json()["nonce"]
    signature = crypto.sign(bytes.fromhex(kf["sign_private"]), nonce.encode("utf-8"))
    data = client.post(
        "/login/respond",
        json={"user_id": uid, "nonce": nonce, "signature": signature.hex()},
    ).json()
    client.save_session(
        {"server": client.server, "user_id": uid, "token": data["session_token"],
         "role": data["role"], "expires_at_ms": data["expires_at_ms"]}
    )
    emit(ctx, {"user_id": uid, "role": data["role"]}, f"logged in as {uid} ({data['role']})")


@main.command()
@click.pass_context
def physicians(ctx):
    """List active physicians."""
    data = ctx.obj["client"].get("/physicians").json()
    emit(ctx, data, "\n".join(f"{p['user_id']}\t{p['display_name']}" for p in data) or "(none)")


@main.command()
@click.argument("path", type=click.Path(exists=True, path_type=Path))
@click.option("--kind", required=True, type=click.Choice(list(ledger.FILE_KINDS)))
@click.option("--owner", required=True, help="Owner patient id.")
@click.pass_context
def upload(ctx, path, kind, owner):
    """Encrypt-and-store a file; prints its content hash."""
    with open(path, "rb") as f:
        data = ctx.obj["client"].post(
            "/files", data={"kind": kind, "owner": owner}, files={"file": (path.name, f)}
        ).json()
    emit(ctx, data, data["content_hash"])


@main.command()
@click.argument("content_hash")
@click.option("--out", "-o", type=click.Path(path_type=Path), default=None)
@click.pass_context
def fetch(ctx, content_hash, out):
    """Fetch and decrypt a file by content hash."""
    resp = ctx.obj["client"].get(f"/files/{content_hash}")
    if out:
        Path(out).write_bytes(resp.content)
        emit(ctx, {"content_hash": content_hash, "bytes": len(resp.content), "out": str(out)},
             f"wrote {len(resp.content)} bytes to {out}")
    else:
        sys.stdout.buffer.write(resp.content)


@main.command()
@click.argument("content_hash")
@click.option("--to", "grantee", required=True)
@click.pass_context
def share(ctx, content_hash, grantee):
    """Grant a user access to one of your files."""
    data = ctx.obj["client"].post(f"/files/{content_hash}/share", json={"grantee": grantee}).json()
    emit(ctx, data, f"shared {content_hash[:12]}… with {grantee}")


@main.command()
@click.argument("content_hash")
@click.option("--to", "grantee", required=True)
@click.pass_context
def revoke(ctx, content_hash, grantee):
    """Revoke a previously granted key."""
    data = ctx.obj["client"].post(f"/files/{content_hash}/revoke", json={"grantee": grantee}).json()
    emit(ctx, data, f"revoked {grantee} on {content_hash[:12]}…")


@main.command()
@click.argument("content_hash")
@click.pass_context
def integrity(ctx, content_hash):
    """Run the integrity checks for a stored file."""
    data = ctx.obj["client"].get(f"/files/{content_hash}/integrity").json()
    emit(ctx, data, f"{data['message']} (store_level={data['store_level']}, end_to_end={data['end_to_end']})")


@main.command("dose-requests")
@click.option("--patient", default=None)
@click.pass_context
def dose_requests(ctx, patient):
    """List dose requests visible to the current session."""
    params = {"patient": patient} if patient else {}
    data = ctx.obj["client"].get("/dose-requests", params=params).json()
    lines = [
        f"{d['request_tx'][:12]}…\t{d['patient_id']}\t{d['status']}\t"
        f"dose={d.get('decided_dose_mg')}\tsuggestion={d.get('suggestion')}"
        for d in data
    ]
    emit(ctx, data, "\n".join(lines) or "(none)")


@main.command()
@click.argument("request_tx")
@click.option("--dose", "dose_mg", type=float, required=True)
@click.option("--decision", type=click.Choice(["confirm", "override"]), required=True)
@click.pass_context
def prescribe(ctx, request_tx, dose_mg, decision):
    """Confirm or override a suggested dose (physician session)."""
    data = ctx.obj["client"].post(
        f"/dose-requests/{request_tx}/prescribe",
        json={"dose_mg": dose_mg, "decision": decision},
    ).json()
    emit(ctx, data, f"{data['status']}: {data['dose_mg']} mg (prescription {data['prescription_file'][:12]}…)")


@main.group()
def emergency():
    """Emergency dose requests and nurse decisions."""


@emergency.command("request")
@click.option("--note", default="")
@click.pass_context
def emergency_request(ctx, note):
    """File an emergency dose request (patient session)."""
    data = ctx.obj["client"].post("/emergency", json={"note": note}).json()
    human = f"emergency request {data['request_tx'][:12]}… status={data['status']}"
    if data.get("reason"):
        human += f" ({data['reason']})"
    emit(ctx, data, human)


@emergency.command("decide")
@click.argument("request_tx")
@click.option("--approve/--deny", default=True)
@click.option("--dose", "dose_mg", type=float, default=None)
@click.pass_context
def emergency_decide(ctx, request_tx, approve, dose_mg):
    """Decide an emergency request (nurse session); approvals are capped."""
    data = ctx.obj["client"].post(
        f"/emergency/{request_tx}/decide", json={"approve": approve, "dose_mg": dose_mg}
    ).json()
    emit(ctx, data, f"{data['status']}: approved={data['approved']} dose={data['dose_mg']}")


@main.group()
def chain():
    """Ledger inspection tools."""


@chain.command("verify")
@click.option("--chain-log", type=click.Path(path_type=Path), default=None,
              help="Verify this chain.log file offline.")
@click.option("--data-dir", type=click.Path(path_type=Path), default=None,
              help="Verify <data-dir>/chain.log offline.")
@click.pass_context
def chain_verify(ctx, chain_log, data_dir):
    """Verify hash linkage and signatures; nonzero exit when invalid."""
    if chain_log or data_dir:
        path = chain_log or Path(data_dir) / "chain.log"
        report = ledger.verify_chain_file(path).to_dict()
    else:
        report = ctx.obj["client"].get("/chain/verify").json()
    if report["valid"]:
        emit(ctx, report, f"chain valid ({report['height']} blocks)")
    else:
        emit(ctx, report, f"chain INVALID: first_bad_height={report['first_bad_height']} ({report['reason']})")
        sys.exit(1)


@main.group()
def store():
    """Blob-store maintenance."""


@store.command("fsck")
@click.option("--data-dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.pass_context
def store_fsck(ctx, data_dir):
    """Re-hash every stored blob and report mismatches; nonzero exit if any."""
    bad = CAStore(Path(data_dir) / "castore").fsck()
    emit(ctx, {"bad": bad, "count": len(bad)},
         "all blobs verified" if not bad else "\n".join(f"MISMATCH {b}" for b in bad))
    if bad:
        sys.exit(1)


@main.command("simulate-device")
@click.option("--patient", required=True)
@click.option("--joints", default="wrist,elbow", show_default=True)
@click.option("--rate", type=float, default=50.0, show_default=True)
@click.option("--seconds", type=float, default=10.0, show_default=True)
@click.option("--tremor-hz", type=float, default=5.0, show_default=True)
@click.option("--amplitude-deg", type=float, default=3.0, show_default=True)
@click.option("--noise-deg", type=float, default=0.1, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--device-id", default=None, help="Defaults to the keyfile's user_id.")
@click.option("--keyfile", type=click.Path(exists=True, path_type=Path), default=None,
              help="Device keyfile; logs in and posts the capture.")
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Also write the canonical capture to a file.")
@click.pass_context
def simulate_device(ctx, patient, joints, rate, seconds, tremor_hz, amplitude_deg,
                    noise_deg, seed, device_id, keyfile, out):
    """Synthesize sinusoid-plus-noise joint angles and post them via /motion."""
    client = ctx.obj["client"]
    if keyfile:
        kf = json.loads(Path(keyfile).read_text())
        device_id = device_id or kf["user_id"]
    if device_id is None:
        raise click.ClickException("--device-id or --keyfile is required")
    mc = simulate_tremor(
        device_id=device_id,
        patient_id=patient,
        joint_names=tuple(j.strip() for j in joints.split(",") if j.strip()),
        sample_rate_hz=rate,
        seconds=seconds,
        tremor_hz=tremor_hz,
        amplitude_deg=amplitude_deg,
        noise_deg=noise_deg,
        seed=seed,
    )
    payload = encode_motion(mc)
    if out:
        Path(out).write_bytes(payload)
    if not keyfile:
        emit(ctx, {"written": str(out), "samples": len(mc.samples)},
             f"capture written to {out}" if out else "no keyfile: nothing posted")
        return
    nonce = client.post("/login/challenge", json={"user_id": device_id}).json()["nonce"]
    signature = crypto.sign(bytes.fromhex(kf["sign_private"]), nonce.encode("utf-8"))
    token = client.post(
        "/login/respond",
        json={"user_id": device_id, "nonce": nonce, "signature": signature.hex()},
    ).json()["session_token"]
    resp = requests.post(
        f"{client.server}/v1/motion",
        data=payload,
        headers={"Authorization": f"Bearer {token}", "Content-Type": "text/plain"},
    )
    if resp.status_code >= 400:
        raise click.ClickException(f"HTTP {resp.status_code} — {resp.text}")
    data = resp.json()
    emit(ctx, data,
         f"ingested motion {data['motion_file'][:12]}… request={data['request_tx'][:12]}… "
         f"status={data['status']} suggestion={data['suggestion']}")


if __name__ == "__main__":
    main()
