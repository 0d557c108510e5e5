"""Exception hierarchy shared across the package.

Contract-level failures carry a stable ``code`` so API clients and tests can
match on it without parsing prose.
"""


class CareLedgerError(Exception):
    """Base class for every error raised by this package."""


# --- crypto ---------------------------------------------------------------

class CryptoError(CareLedgerError):
    pass


class CryptoDecodeError(CryptoError):
    """Malformed key, signature, or blob encoding (wrong length / not hex)."""


class DecryptionError(CryptoError):
    """Authenticated decryption failed: wrong key, wrong aad, or tampering.

    Deliberately does not distinguish the cause.
    """


class EntropyError(CryptoError):
    """The OS entropy source failed; key material cannot be generated."""


# --- content-addressed store ----------------------------------------------

class StoreError(CareLedgerError):
    pass


class BlobNotFound(StoreError):
    pass


class CorruptBlob(StoreError):
    """On-disk bytes no longer hash to the requested address."""


# --- ledger ----------------------------------------------------------------

class LedgerError(CareLedgerError):
    pass


class InvalidTransaction(LedgerError):
    """A transaction failed validation during sealing; names the tx_id."""

    def __init__(self, tx_id: str, reason: str):
        self.tx_id = tx_id
        self.reason = reason
        super().__init__(f"transaction {tx_id} rejected: {reason}")


class ChainCorrupt(LedgerError):
    def __init__(self, first_bad_height: int, reason: str = ""):
        self.first_bad_height = first_bad_height
        msg = f"chain invalid at height {first_bad_height}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


# --- contract ---------------------------------------------------------------

class ContractError(CareLedgerError):
    """A transaction payload was rejected by the contract state machine."""

    code = "ContractError"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class AlreadyRegistered(ContractError):
    code = "AlreadyRegistered"


class DuplicatePending(ContractError):
    code = "DuplicatePending"


class NotAdmin(ContractError):
    code = "NotAdmin"


class UnknownPending(ContractError):
    code = "UnknownPending"


class Unauthenticated(ContractError):
    code = "Unauthenticated"


class DuplicateHash(ContractError):
    code = "DuplicateHash"


class DeviceOwnerMismatch(ContractError):
    code = "DeviceOwnerMismatch"


class NotOwner(ContractError):
    code = "NotOwner"


class UnknownFile(ContractError):
    code = "UnknownFile"


class UnknownGrantee(ContractError):
    code = "UnknownGrantee"


class UnknownRequest(ContractError):
    code = "UnknownRequest"


class NoCareRelationship(ContractError):
    code = "NoCareRelationship"


class BadStatus(ContractError):
    code = "BadStatus"


class NoCap(ContractError):
    code = "NoCap"


class CapExceeded(ContractError):
    code = "CapExceeded"


class ValidationError(ContractError):
    code = "ValidationError"


# --- workflows ---------------------------------------------------------------

class AccessDenied(CareLedgerError):
    """Fetch refused by the contract; carries the contract's Deny reason."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


class IntegrityError(CareLedgerError):
    """Fetched bytes failed an integrity check (distinct from AccessDenied)."""


class LengthMismatch(CareLedgerError):
    """Feature vectors of different lengths cannot be compared."""
