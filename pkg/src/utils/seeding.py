import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *keys) -> int:
    """Mix string/int keys into a 64-bit seed: seed XOR blake2b(keys).

    Python's built-in hash() is salted per process, so it cannot be used here.
    """
    payload = "|".join(str(k) for k in keys).encode("utf-8")
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return (int(seed) ^ int.from_bytes(digest, "little")) & _MASK64


def make_rng(seed: int, *keys) -> np.random.Generator:
    if keys:
        seed = derive_seed(seed, *keys)
    return np.random.default_rng(np.random.SeedSequence(int(seed) & _MASK64))


def sklearn_seed(seed: int) -> int:
    # scikit-learn only accepts 32-bit random_state values
    return int(np.random.SeedSequence(int(seed) & _MASK64).generate_state(1)[0])
