"""Regenerates the binary and reference fixtures used by the integration tests.

Run from this directory: python3 make_fixtures.py
"""
import json
import math
import struct

MASK = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & MASK
    return h


def splitmix64(state):
    while True:
        state = (state + 0x9E3779B97F4A7C15) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        yield z ^ (z >> 31)


def unit_vector(seed: int, dim: int):
    gen = splitmix64(seed)
    scale = 1.0 / (1 << 53)
    v = []
    while len(v) < dim:
        u1 = ((next(gen) >> 11) + 1.0) * scale
        u2 = (next(gen) >> 11) * scale
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        v.append(r * math.cos(theta))
        v.append(r * math.sin(theta))
    v = v[:dim]
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def stub_reference():
    out = {}
    for word in ["walk", "kick", "a"]:
        out[word] = {"hash": fnv1a64(word.encode()), "d16": unit_vector(fnv1a64(word.encode()), 16)}
    full = unit_vector(fnv1a64(b"walk"), 768)
    out["walk"]["d768_head"] = full[:8]
    with open("stub_reference.json", "w") as f:
        json.dump(out, f, indent=1)


def omge():
    records = [
        ("a person walk", 4, 3, [[0.1 * (i + 1) + 0.01 * j for j in range(4)] for i in range(4)]),
        ("", 1, 0, [[1.0, 0.0, 0.0, 0.0]]),
    ]
    blob = b"OMGE" + struct.pack("<II", 1, len(records))
    for prompt, n, eos, rows in records:
        blob += struct.pack("<QHHH", fnv1a64(prompt.encode()), n, 4, eos)
        for row in rows:
            blob += struct.pack("<4f", *row)
    with open("two_prompts.omge", "wb") as f:
        f.write(blob)


if __name__ == "__main__":
    stub_reference()
    omge()
