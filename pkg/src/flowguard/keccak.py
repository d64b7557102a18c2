"""Keccak-256 as used by the EVM.

This is the original Keccak submission with 0x01 domain padding, not the
finalized SHA-3 (0x06 padding) that hashlib ships, so the digests differ
and we carry our own permutation.
"""

_MASK = (1 << 64) - 1

_ROUND_CONSTANTS = (
    0x0000000000000001, 0x0000000000008082, 0x800000000000808A,
    0x8000000080008000, 0x000000000000808B, 0x0000000080000001,
    0x8000000080008081, 0x8000000000008009, 0x000000000000008A,
    0x0000000000000088, 0x0000000080008009, 0x000000008000000A,
    0x000000008000808B, 0x800000000000008B, 0x8000000000008089,
    0x8000000000008003, 0x8000000000008002, 0x8000000000000080,
    0x000000000000800A, 0x800000008000000A, 0x8000000080008081,
    0x8000000000008080, 0x0000000080000001, 0x8000000080008008,
)

# Rotation offsets indexed as x + 5*y.
_ROTATIONS = (
    0, 1, 62, 28, 27,
    36, 44, 6, 55, 20,
    3, 10, 43, 25, 39,
    41, 45, 15, 21, 8,
    18, 2, 61, 56, 14,
)

# Destination index of the rho+pi step for each source lane x + 5*y:
# lane (x, y) lands at (y, (2x + 3y) % 5).
_PI_DEST = tuple(
    (lane // 5) + 5 * ((2 * (lane % 5) + 3 * (lane // 5)) % 5)
    for lane in range(25)
)

_RATE = 136  # bytes; capacity 512 bits for the 256-bit variant


def _permute(lanes: list[int]) -> None:
    for rc in _ROUND_CONSTANTS:
        # theta
        c = [
            lanes[x] ^ lanes[x + 5] ^ lanes[x + 10] ^ lanes[x + 15] ^ lanes[x + 20]
            for x in range(5)
        ]
        for x in range(5):
            t = c[(x + 1) % 5]
            d = c[(x - 1) % 5] ^ (((t << 1) | (t >> 63)) & _MASK)
            for y in range(0, 25, 5):
                lanes[x + y] ^= d
        # rho + pi
        b = [0] * 25
        for src in range(25):
            r = _ROTATIONS[src]
            v = lanes[src]
            b[_PI_DEST[src]] = ((v << r) | (v >> (64 - r))) & _MASK if r else v
        # chi
        for y in range(0, 25, 5):
            row = b[y:y + 5]
            for x in range(5):
                lanes[x + y] = row[x] ^ (~row[(x + 1) % 5] & row[(x + 2) % 5])
        # iota
        lanes[0] ^= rc


def keccak256(data: bytes) -> bytes:
    """Return the 32-byte Keccak-256 digest of ``data``."""
    lanes = [0] * 25
    padded = data + b"\x01" + b"\x00" * (_RATE - 1 - len(data) % _RATE)
    padded = padded[:-1] + bytes([padded[-1] | 0x80])
    for block_start in range(0, len(padded), _RATE):
        block = padded[block_start:block_start + _RATE]
        for i in range(_RATE // 8):
            lanes[i] ^= int.from_bytes(block[8 * i:8 * i + 8], "little")
        _permute(lanes)
    out = b"".join(lane.to_bytes(8, "little") for lane in lanes[:4])
    return out
