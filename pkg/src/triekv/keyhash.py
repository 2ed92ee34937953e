"""Key digests and their decomposition into trie characters.

Keys are hashed to a fixed 256-bit digest with a keyed BLAKE2b; the 32-byte
seed is drawn at store creation and persisted in the reserved header, so a
digest computed for a key is stable for the life of the store but differs
across stores.  The digest is consumed most-significant-first: character d
for branching b covers bits [d*w, (d+1)*w) of the digest where w = log2(b),
counting from the high bit of byte 0.
"""

from __future__ import annotations

import hashlib
import secrets

from .errors import InvalidArgument

DIGEST_BITS = 256
DIGEST_BYTES = 32
SEED_BYTES = 32


def new_seed() -> bytes:
    return secrets.token_bytes(SEED_BYTES)


def hash_key(key: bytes, seed: bytes) -> bytes:
    """256-bit keyed digest of a non-empty key."""
    if not isinstance(key, (bytes, bytearray, memoryview)):
        raise InvalidArgument("keys must be bytes-like")
    if not key:
        raise InvalidArgument("empty keys are not allowed")
    if len(seed) != SEED_BYTES:
        raise InvalidArgument(f"seed must be {SEED_BYTES} bytes")
    return hashlib.blake2b(key, digest_size=DIGEST_BYTES, key=seed).digest()


def max_chars(branching: int) -> int:
    """Number of whole characters extractable from a digest."""
    w = branching.bit_length() - 1
    return DIGEST_BITS // w


def char_at(digest: bytes, depth: int, branching: int) -> int:
    """Character at `depth`, most-significant-first; errors past the digest end."""
    w = branching.bit_length() - 1
    if depth < 0 or depth >= DIGEST_BITS // w:
        raise InvalidArgument(f"character {depth} out of range for branching {branching}")
    if w == 8:
        return digest[depth]
    shift = DIGEST_BITS - w * (depth + 1)
    return (int.from_bytes(digest, "big") >> shift) & (branching - 1)


def char_reader(digest: bytes, branching: int):
    """Fast per-digest accessor used on hot paths; same convention as char_at."""
    if branching == 256:
        return digest.__getitem__
    w = branching.bit_length() - 1
    as_int = int.from_bytes(digest, "big")
    mask = branching - 1
    top = DIGEST_BITS - w

    def read(depth: int) -> int:
        return (as_int >> (top - w * depth)) & mask

    return read
