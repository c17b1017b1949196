"""Fan a single user seed out to independent, reproducible per-consumer seeds."""

import hashlib


def derive_seed(seed: int, *labels) -> int:
    text = "/".join([str(int(seed))] + [str(x) for x in labels])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
