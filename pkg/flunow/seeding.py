import hashlib


def sha32(data: bytes) -> int:
    """First 32 bits of SHA-256 as an integer."""
    return int.from_bytes(hashlib.sha256(data).digest()[:4], "big")


def stream_seed(seed: int, *labels) -> int:
    """
    Seed of a named sub-stream, e.g. stream_seed(7, "RF", "loc03", "h4", "2012-W05").
    Depends only on the base seed and the labels, so partial reruns reproduce.
    """
    key = "/".join([str(seed)] + [str(label) for label in labels])
    return sha32(key.encode())
