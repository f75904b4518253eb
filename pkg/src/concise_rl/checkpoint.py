"""Binary policy checkpoints.

Layout: 8-byte magic ``CRLPOL01``, a little-endian u64 header length, the
UTF-8 JSON header ``{"vocab", "k", "h", "e", "seed", "stage", "step"}``, then
``param_count`` little-endian float64 weights.  Writes go to a temporary file
that is renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from concise_rl.policy_core import PolicyParams, Vocab, param_count

MAGIC = b"CRLPOL01"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: PolicyParams, seed: int = 0, stage: str = "",
                    step: int = 0) -> None:
    header = json.dumps({
        "vocab": list(params.vocab.tokens), "k": params.k, "h": params.h, "e": params.e,
        "seed": int(seed), "stage": stage, "step": int(step),
    }, sort_keys=True).encode()
    payload = (MAGIC + struct.pack("<Q", len(header)) + header
               + params.weights.astype("<f8").tobytes())
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[PolicyParams, dict]:
    """Return ``(params, header)``; raises CheckpointError on any mismatch."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[16:16 + hlen].decode())
        vocab = Vocab(tuple(header["vocab"]))
        k, h, e = int(header["k"]), int(header["h"]), int(header["e"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad header: {exc}") from None
    n = param_count(vocab.size, k, e, h)
    body = data[16 + hlen:]
    if len(body) != 8 * n:
        raise CheckpointError(
            f"{path}: expected {n} weights for the header dims, found {len(body) / 8:g}")
    weights = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return PolicyParams(vocab, k, e, h, weights), header
