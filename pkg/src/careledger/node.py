"""Single-node composition: castore + chain log + live contract state.

The node is the single writer: every mutation funnels through
:meth:`Node.commit`, which validates a batch against the live state
(signatures plus contract rules), seals it into one block all-or-nothing,
appends to ``chain.log``, and only then swaps the live state.  Readers see
sealed state only.

Key custody follows the registration algorithm literally: the node generates
user keys at approval time, hands the private halves to the approval caller
once, and keeps a custodial copy in ``keyring.json`` so that authenticated
sessions can sign transactions and decrypt files server-side.  The keyring is
plumbing outside the contract state; nothing in it is ever ledger-visible.
"""

from __future__ import annotations

import json
import os
import threading
import time
from pathlib import Path
from typing import Optional

from . import contract, crypto, ledger
from .canonical import dumps as canonical_dumps
from .castore import CAStore
from .errors import ChainCorrupt, InvalidTransaction, LedgerError


def now_ms() -> int:
    return time.time_ns() // 1_000_000


class Keyring:
    """File-backed store of custodial private keys, owner-readable only."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._keys: dict[str, crypto.KeyPair] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            for user_id, d in json.loads(self.path.read_text()).items():
                self._keys[user_id] = crypto.KeyPair.from_dict(d)

    def put(self, kp: crypto.KeyPair) -> None:
        with self._lock:
            self._keys[kp.user_id] = kp
            data = canonical_dumps({u: k.to_dict() for u, k in self._keys.items()})
            tmp = self.path.with_suffix(".tmp")
            tmp.write_bytes(data)
            os.chmod(tmp, 0o600)
            os.replace(tmp, self.path)

    def get(self, user_id: str) -> Optional[crypto.KeyPair]:
        with self._lock:
            return self._keys.get(user_id)

    def require(self, user_id: str) -> crypto.KeyPair:
        kp = self.get(user_id)
        if kp is None:
            raise LedgerError(f"no custodial keys for {user_id!r}")
        return kp


class Node:
    """Ledger node owning the data directory (chain.log, castore/, keyring.json)."""

    def __init__(
        self,
        data_dir: str | Path,
        admin_id: str = "admin",
        admin_name: str = "Administrator",
    ):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.store = CAStore(self.data_dir / "castore")
        self.log = ledger.ChainLog(self.data_dir / "chain.log")
        self.keyring = Keyring(self.data_dir / "keyring.json")
        self._lock = threading.Lock()
        self._pending: list[ledger.Transaction] = []
        self.blocks: list[ledger.Block] = []
        self.state = contract.ContractState.empty()
        self._open(admin_id, admin_name)

    def _open(self, admin_id: str, admin_name: str) -> None:
        if self.log.exists():
            blocks = self.log.load()
            report = ledger.verify_chain(blocks)
            if not report.valid:
                raise ChainCorrupt(report.first_bad_height, report.reason or "")
            self.blocks = blocks
            self.state = contract.replay(blocks)
            return
        # First run: mint genesis with the configured admin.
        kp = crypto.generate_keypair(admin_id)
        payload = ledger.RegisterUser(
            user_id=admin_id,
            role="admin",
            display_name=admin_name,
            sign_public=kp.sign_public.hex(),
            enc_public=kp.enc_public.hex(),
        )
        ts = now_ms()
        tx = ledger.build_transaction(admin_id, payload, ts, kp.sign_private)
        genesis = ledger.make_genesis(tx, ts)
        self.state = contract.apply(self.state, tx)
        self.log.append(genesis)
        self.blocks = [genesis]
        self.keyring.put(kp)
        # One-time operator delivery of the admin credential.
        keyfile = self.data_dir / f"{admin_id}.key.json"
        keyfile.write_bytes(canonical_dumps(kp.to_dict()))
        os.chmod(keyfile, 0o600)

    # -- chain views -----------------------------------------------------

    @property
    def height(self) -> int:
        return len(self.blocks)

    @property
    def tip(self) -> ledger.Block:
        return self.blocks[-1]

    def verify(self) -> ledger.ChainReport:
        return ledger.verify_chain(self.blocks)

    def replay_state(self) -> contract.ContractState:
        return contract.replay(self.blocks)

    # -- writing ------------------------------------------------------------

    def build_tx(self, author: str, payload, timestamp_ms: Optional[int] = None) -> ledger.Transaction:
        """Build and sign a transaction; registration requests stay unsigned."""
        ts = now_ms() if timestamp_ms is None else timestamp_ms
        if isinstance(payload, ledger.RequestRegistration):
            return ledger.build_transaction(author, payload, ts, None)
        kp = self.keyring.require(author)
        return ledger.build_transaction(author, payload, ts, kp.sign_private)

    def _validate_batch(
        self, state: contract.ContractState, txs: list[ledger.Transaction]
    ) -> contract.ContractState:
        """Fold the batch over ``state``; raises InvalidTransaction on the first bad tx."""
        registry = {
            u: rec.sign_public
            for u, rec in state.users.items()
            if rec.status == contract.ACTIVE and rec.sign_public
        }
        for tx in txs:
            if ledger.is_signature_exempt(tx, self.height):
                if tx.signature:
                    raise InvalidTransaction(tx.tx_id, "registration request must be unsigned")
            else:
                key_hex = registry.get(tx.author)
                if key_hex is None:
                    raise InvalidTransaction(tx.tx_id, f"author {tx.author!r} has no registered key")
                if not crypto.verify(bytes.fromhex(key_hex), tx.signing_bytes(), tx.signature):
                    raise InvalidTransaction(tx.tx_id, "bad signature")
            try:
                state = contract.apply(state, tx)
            except Exception as exc:
                raise InvalidTransaction(tx.tx_id, str(exc)) from exc
            p = tx.payload
            if isinstance(p, ledger.RegisterUser):
                registry[p.user_id] = p.sign_public
        return state

    def _seal(self, txs: list[ledger.Transaction]) -> ledger.Block:
        new_state = self._validate_batch(self.state, txs)
        block = ledger.build_block(self.height, self.tip.block_hash, now_ms(), txs)
        self.log.append(block)
        self.blocks.append(block)
        self.state = new_state
        return block

    def commit(self, entries: list[tuple[str, object]]) -> ledger.Block:
        """Atomically seal one block from (author, payload) pairs.

        All-or-nothing: if any transaction is invalid, no block is sealed and
        InvalidTransaction names the offender.
        """
        with self._lock:
            txs = [self.build_tx(author, payload) for author, payload in entries]
            return self._seal(txs)

    def commit_txs(self, txs: list[ledger.Transaction]) -> ledger.Block:
        """Seal pre-built transactions (callers that cross-reference tx ids)."""
        with self._lock:
            return self._seal(txs)

    def submit(self, author: str, payload) -> ledger.Transaction:
        """Queue a transaction for the next flush without sealing it yet."""
        with self._lock:
            tx = self.build_tx(author, payload)
            self._pending.append(tx)
            return tx

    def flush(self) -> Optional[ledger.Block]:
        """Seal everything queued by :meth:`submit`; drops the batch on failure."""
        with self._lock:
            if not self._pending:
                return None
            txs, self._pending = self._pending, []
            return self._seal(txs)
