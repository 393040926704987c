"""Deterministic seed derivation.

Every random stream in the toolkit is keyed by a master seed plus a path of
string/int labels, hashed through SHA-256. Adding flows or streams never
reshuffles existing ones, and the scheme is stable across platforms and
Python versions (unlike ``hash()``).
"""

import hashlib
import random


def derive_seed(master: int, *path: object) -> int:
    """Derive a 64-bit substream seed from a master seed and a label path."""
    text = str(int(master)) + "".join("/" + str(p) for p in path)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(master: int, *path: object) -> random.Random:
    """A ``random.Random`` seeded from :func:`derive_seed`."""
    return random.Random(derive_seed(master, *path))
