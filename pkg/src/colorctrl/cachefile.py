"""Single-file persistence for a finalized ``BranchCache``.

Layout, all integers and floats little-endian::

    magic        4s   b"CCC1"
    version      u32  1
    run digest   32s  sha256 of model config + sampling params
    config len   u32  then that many bytes of sorted-key JSON (ModelConfig)
    steps        u32
    cfg_scale    f64
    seed         i64
    prompt len   u32  then UTF-8 prompt
    image        u32 h, u32 w, u32 c, then h*w*c bytes
    noise digest 32s
    mask count   u64
    mask total   n_vision * n_text f64, row-major
    n_records    u32
    index        n_records entries of (u32 step, u32 layer, u32 head,
                 u8 pass [0 cond, 1 uncond], u64 offset, u64 nbytes)
    payload      per record: q, k, v as (n_tokens, d_head) f32, then
                 key_bias as (n_tokens,) f32; offsets count from the
                 start of the payload

Records are written in cache key order, so saving a loaded cache reproduces
the original bytes.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict

import numpy as np

from .errors import LoadError, StateError
from .model import AttentionKey, AttentionRecord, ModelConfig
from .sampler import PASSES, BranchCache, SampleParams, run_digest

MAGIC = b"CCC1"
VERSION = 1
_INDEX = struct.Struct("<IIIBQQ")


def _config_bytes(config: ModelConfig) -> bytes:
    return json.dumps(asdict(config), sort_keys=True).encode()


def dumps(cache: BranchCache) -> bytes:
    if not cache.finalized:
        raise StateError("only finalized caches can be saved")
    buf = io.BytesIO()
    w = buf.write
    cfg = _config_bytes(cache.config)
    prompt = cache.prompt.encode("utf-8")
    image = np.ascontiguousarray(cache.source_image, np.uint8)
    h, wd, c = image.shape
    w(MAGIC)
    w(struct.pack("<I", VERSION))
    w(cache.digest)
    w(struct.pack("<I", len(cfg)) + cfg)
    w(struct.pack("<Idq", cache.params.steps, cache.params.cfg_scale, cache.params.seed))
    w(struct.pack("<I", len(prompt)) + prompt)
    w(struct.pack("<III", h, wd, c) + image.tobytes())
    w(cache.noise_digest)
    w(struct.pack("<Q", cache.mask_acc.count))
    w(np.ascontiguousarray(cache.mask_acc.total, "<f8").tobytes())
    records = cache.ordered_records()
    w(struct.pack("<I", len(records)))
    payloads, offset = [], 0
    for rec in records:
        blob = b"".join(np.ascontiguousarray(a, "<f4").tobytes() for a in (rec.q, rec.k, rec.v, rec.key_bias))
        key = rec.key
        w(_INDEX.pack(key.step, key.layer, key.head, PASSES.index(key.pass_), offset, len(blob)))
        payloads.append(blob)
        offset += len(blob)
    for blob in payloads:
        w(blob)
    return buf.getvalue()


def save(cache: BranchCache, path) -> int:
    data = dumps(cache)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise LoadError(f"cache file truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def loads(data: bytes) -> BranchCache:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise LoadError("not a colorctrl cache file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise LoadError(f"unsupported cache version {version}")
    digest = r.take(32)
    (n,) = r.unpack("<I")
    try:
        config = ModelConfig(**json.loads(r.take(n)))
    except (ValueError, TypeError) as exc:
        raise LoadError(f"bad model config in cache: {exc}") from exc
    steps, cfg_scale, seed = r.unpack("<Idq")
    params = SampleParams(steps=steps, cfg_scale=cfg_scale, seed=seed)
    if run_digest(config, params) != digest:
        raise LoadError("cache digest does not match its stored configuration")
    (n,) = r.unpack("<I")
    prompt = r.take(n).decode("utf-8")
    cache = BranchCache(config, params, prompt)
    h, w, c = r.unpack("<III")
    cache.source_image = np.frombuffer(r.take(h * w * c), np.uint8).reshape(h, w, c).copy()
    cache.noise_digest = r.take(32)
    (count,) = r.unpack("<Q")
    shape = cache.mask_acc.total.shape
    total = np.frombuffer(r.take(8 * shape[0] * shape[1]), "<f8").reshape(shape)
    (n_records,) = r.unpack("<I")
    index = [_INDEX.unpack(r.take(_INDEX.size)) for _ in range(n_records)]
    base = r.pos
    t, d = config.n_tokens, config.d_head
    sizes = (t * d, t * d, t * d, t)
    for step, layer, head, pass_id, offset, nbytes in index:
        if nbytes != 4 * sum(sizes) or base + offset + nbytes > len(data):
            raise LoadError(f"record ({step}, {layer}, {head}) has a bad extent")
        flat = np.frombuffer(data, "<f4", count=sum(sizes), offset=base + offset).astype(np.float32)
        q, k, v, bias = np.split(flat, np.cumsum(sizes)[:-1])
        key = AttentionKey(step, layer, head, PASSES[pass_id])
        rec = AttentionRecord(key, q.reshape(t, d), k.reshape(t, d), v.reshape(t, d), bias, config.n_text)
        # the accumulator is restored wholesale below
        cache.records[key] = rec
        cache._nbytes += rec.nbytes
    cache.mask_acc.total = total.astype(np.float64)
    cache.mask_acc.count = count
    try:
        cache.finalize()
    except StateError as exc:
        raise LoadError(f"cache file is incomplete: {exc}") from exc
    return cache


def load(path) -> BranchCache:
    with open(path, "rb") as f:
        return loads(f.read())
