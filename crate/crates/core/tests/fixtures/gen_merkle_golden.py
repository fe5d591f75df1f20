#!/usr/bin/env python3
"""Writes merkle_golden.json using only hashlib, as an independent reference
for leaf and node hashing."""
import hashlib
import json
import random
import struct

rng = random.Random(20240917)


def meta_bytes(m):
    out = b""
    for key in ("model_id", "sae_release"):
        v = bytes.fromhex(m[key])
        out += struct.pack(">I", len(v)) + v
    out += struct.pack(">H", m["layer"])
    for key in ("input_hash", "output_hash", "nonce", "provider_pubkey"):
        out += bytes.fromhex(m[key])
    return out


def finite_bf16():
    while True:
        bits = rng.getrandbits(16)
        if (bits >> 7) & 0xFF != 0xFF:
            return bits


def sketch(k):
    feats = sorted(rng.sample(range(1 << 20), k))
    return [{"feature": f, "value": finite_bf16()} for f in feats]


def sketch_bytes(s):
    return b"".join(struct.pack(">IH", e["feature"], e["value"]) for e in s)


def leaf(m, t, s):
    return hashlib.sha256(b"LEAF" + meta_bytes(m) + struct.pack(">Q", t) + sketch_bytes(s)).digest()


def root(leaves):
    level = leaves
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level), 2):
            if i + 1 < len(level):
                nxt.append(hashlib.sha256(b"NODE" + level[i] + level[i + 1]).digest())
            else:
                nxt.append(level[i])
        level = nxt
    return level[0]


def meta(model, sae, layer):
    return {
        "model_id": model.encode().hex(),
        "sae_release": sae.encode().hex(),
        "layer": layer,
        "input_hash": hashlib.sha256(b"x").hexdigest(),
        "output_hash": hashlib.sha256(b"y").hexdigest(),
        "nonce": bytes(rng.getrandbits(8) for _ in range(16)).hex(),
        "provider_pubkey": bytes(rng.getrandbits(8) for _ in range(32)).hex(),
    }


metas = [meta("synthetic-lm-9b", "synthetic-sae-16k", 20), meta("", "", 0), meta("m" * 300, "s", 65535)]
vectors = []
for i, (k, t) in enumerate([(32, 0), (32, 1), (1, 2), (3, 3), (32, 2**40), (7, 5), (32, 2**64 - 1)]):
    m = metas[i % len(metas)]
    s = sketch(k)
    vectors.append({"meta": m, "t": t, "sketch": s, "leaf": leaf(m, t, s).hex()})

fixture = {"vectors": vectors, "root": root([bytes.fromhex(v["leaf"]) for v in vectors]).hex()}
with open("merkle_golden.json", "w") as f:
    json.dump(fixture, f, indent=1)
    f.write("\n")
