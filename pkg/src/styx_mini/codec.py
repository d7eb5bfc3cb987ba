"""Repo-wide value codec.

Entity values, function parameters and message payloads all go through
``encode``/``decode``.  Pickle is self-describing; with the memo disabled
its output depends only on the value, never on object identity, so equal
plain data (ints, strings, tuples, lists, dicts in insertion order) always
encodes to equal bytes.  Invocation fingerprints and the bit-for-bit state
comparisons rely on that.  Sets are not canonical and should not be stored.
"""

from __future__ import annotations

import hashlib
import io
import pickle
from typing import Any

PROTOCOL = 5


def encode(value: Any) -> bytes:
    buf = io.BytesIO()
    p = pickle.Pickler(buf, protocol=PROTOCOL)
    # no memo: shared sub-objects are written out in full each time
    p.fast = True
    p.dump(value)
    return buf.getvalue()


def decode(data: bytes) -> Any:
    return pickle.loads(data)


def fingerprint(operator: str, key: str, function_name: str, params_bytes: bytes) -> bytes:
    """Identity of one invocation: exact serialized-bytes equality of target, name and params."""
    h = hashlib.blake2b(digest_size=16)
    for part in (operator.encode(), key.encode(), function_name.encode(), params_bytes):
        h.update(len(part).to_bytes(4, "little"))
        h.update(part)
    return h.digest()
