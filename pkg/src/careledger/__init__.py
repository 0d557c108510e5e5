"""careledger: permissioned ledger + encrypted content-addressed storage for
remote management of movement-disorder patients."""

__version__ = "0.1.0"

from .castore import CAStore, ContentHash
from .contract import ContractState, authorize_fetch, check_integrity, replay
from .crypto import KeyPair, SealedBlob, WrappedKey
from .ledger import Block, ChainReport, Transaction, verify_chain, verify_chain_file
from .node import Node

__all__ = [
    "CAStore",
    "ContentHash",
    "ContractState",
    "authorize_fetch",
    "check_integrity",
    "replay",
    "KeyPair",
    "SealedBlob",
    "WrappedKey",
    "Block",
    "ChainReport",
    "Transaction",
    "verify_chain",
    "verify_chain_file",
    "Node",
]
