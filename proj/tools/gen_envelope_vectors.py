#!/usr/bin/env python3
"""Writes testdata/envelope_vectors.json from a Python re-implementation of the
sealed-message layout, for cross-checking the C++ envelope code.

Layout (all integers little-endian):
  seq_e u64 | machine_id u64 | hmac_prev 32B | record_count u16 |
  records (tag u8, payload_len u16, payload) | zero padding | hmac_cur 32B
hmac_cur = HMAC-SHA-256(auth_key, everything before it)
cipher   = AES-256-CTR(enc_key, iv = SHA-256("chv-ctr-iv" || nonce)[:12] || 0^4)
nonce    = machine_id u64 || counter u64
"""
import hashlib
import hmac
import json
import struct
import sys

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes


def u8(v): return struct.pack("<B", v)
def u16(v): return struct.pack("<H", v)
def u64(v): return struct.pack("<Q", v)
def sstr(s): return u8(len(s)) + s
def lstr(s): return u16(len(s)) + s


def writes(ws):
    return u8(len(ws)) + b"".join(sstr(k.encode()) + lstr(v.encode()) for k, v in ws)


def payload(rec):
    t = rec["type"]
    if t == "NewKey":
        return 1, sstr(rec["key"].encode()) + u64(rec["arbitrator"]) + u64(rec["origin_seq"])
    if t == "Transaction":
        body = u64(rec["tx"][0]) + u64(rec["tx"][1]) + u64(rec["arbitrator"]) + writes(rec["writes"])
        body += u8(len(rec["guard"]))
        for k, v in rec["guard"]:
            body += sstr(k.encode())
            body += u8(0) if v is None else u8(1) + lstr(v.encode())
        return 2, body
    if t == "Commit":
        return 3, u64(rec["tx"][0]) + u64(rec["tx"][1]) + writes(rec["writes"])
    if t == "Abort":
        return 4, u64(rec["tx"][0]) + u64(rec["tx"][1])
    if t == "LastMessage":
        return 5, u64(rec["id"]) + u64(rec["seq"])
    if t == "RejectedMessages":
        return 6, u64(rec["id"]) + u64(rec["s_low"]) + u64(rec["s_high"]) + u64(rec["s_first"])
    if t == "QueueSize":
        return 7, u64(rec["n"]) + u64(rec["s_at"])
    raise ValueError(t)


def seal(v):
    auth = bytes.fromhex(v["auth_key"])
    enc = bytes.fromhex(v["enc_key"])
    nonce = u64(v["machine_id"]) + u64(v["counter"])
    plain = u64(v["seq"]) + u64(v["machine_id"]) + bytes.fromhex(v["hmac_prev"]) + u16(len(v["records"]))
    for rec in v["records"]:
        tag, p = payload(rec)
        plain += u8(tag) + u16(len(p)) + p
    mac_at = v["block_size"] - 32
    assert len(plain) <= mac_at
    plain += b"\0" * (mac_at - len(plain))
    mac = hmac.new(auth, plain, hashlib.sha256).digest()
    plain += mac
    iv = hashlib.sha256(b"chv-ctr-iv" + nonce).digest()[:12] + b"\0" * 4
    c = Cipher(algorithms.AES(enc), modes.CTR(iv)).encryptor()
    cipher = c.update(plain) + c.finalize()
    return nonce.hex(), mac.hex(), cipher.hex()


AUTH = "".join(f"{i:02x}" for i in range(32))
ENC = "".join(f"{255 - i:02x}" for i in range(32))

VECTORS = [
    {"name": "empty", "seq": 1, "machine_id": 1, "counter": 1, "hmac_prev": "00" * 32,
     "block_size": 1024, "records": []},
    {"name": "genesis_queue_size", "seq": 1, "machine_id": 7, "counter": 1, "hmac_prev": "00" * 32,
     "block_size": 1024, "records": [{"type": "QueueSize", "n": 8, "s_at": 1}]},
    {"name": "kv_records", "seq": 42, "machine_id": 3, "counter": 17, "hmac_prev": "ab" * 32,
     "block_size": 1024, "records": [
         {"type": "NewKey", "key": "thermo/mode", "arbitrator": 1, "origin_seq": 42},
         {"type": "Transaction", "tx": [3, 5], "arbitrator": 1,
          "writes": [["thermo/mode", "OFF"]], "guard": [["thermo/mode", "HEAT"], ["thermo/set", None]]},
         {"type": "Commit", "tx": [2, 9], "writes": [["lamp", "on"], ["lamp/level", ""]]},
         {"type": "Abort", "tx": [4, 1]}]},
    {"name": "control_records", "seq": 300, "machine_id": 2, "counter": 299, "hmac_prev": "5a" * 32,
     "block_size": 256, "records": [
         {"type": "QueueSize", "n": 16, "s_at": 290},
         {"type": "RejectedMessages", "id": 2, "s_low": 296, "s_high": 298, "s_first": 300},
         {"type": "LastMessage", "id": 9, "seq": 281}]},
]


def main():
    out = []
    for v in VECTORS:
        v = dict(v, auth_key=AUTH, enc_key=ENC)
        v["nonce"], v["hmac_cur"], v["cipher_block"] = seal(v)
        out.append(v)
    path = sys.argv[1] if len(sys.argv) > 1 else "testdata/envelope_vectors.json"
    with open(path, "w") as f:
        json.dump({"format": "chv sealed-message test vectors", "vectors": out}, f, indent=1)
        f.write("\n")


if __name__ == "__main__":
    main()
