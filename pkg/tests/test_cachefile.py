import struct

import numpy as np
import pytest

from colorctrl import cachefile
from colorctrl.errors import LoadError, StateError
from colorctrl.model import ModelConfig, ToyMMDiT
from colorctrl.sampler import EditSpec, SampleParams, Sampler

PROMPT = "a white fox in a forest"


@pytest.fixture(scope="module")
def setup():
    cfg = ModelConfig(image_size=8, patch=2, n_text=8, d_model=16, n_heads=2, n_layers=2, vocab_size=512)
    sampler = Sampler(ToyMMDiT(cfg))
    params = SampleParams(steps=3)
    img, cache = sampler.run_source(PROMPT, params)
    return sampler, params, img, cache


def test_round_trip_is_bitwise(setup, tmp_path):
    sampler, params, img, cache = setup
    path = tmp_path / "src.ccc"
    n = cachefile.save(cache, path)
    assert n == path.stat().st_size
    data = path.read_bytes()
    assert data[:4] == b"CCC1"
    loaded = cachefile.load(path)
    assert loaded.finalized and loaded.prompt == PROMPT and loaded.config == cache.config
    assert loaded.params == SampleParams(steps=3, record=True)
    assert [r.key for r in loaded.ordered_records()] == [r.key for r in cache.ordered_records()]
    assert set(loaded.records) == set(cache.records)
    for key, rec in cache.records.items():
        other = loaded.records[key]
        for field in ("q", "k", "v", "key_bias"):
            assert np.array_equal(getattr(rec, field), getattr(other, field))
        assert np.array_equal(rec.map, other.map)
    assert np.array_equal(loaded.mask_acc.total, cache.mask_acc.total)
    assert np.array_equal(loaded.source_image, img)
    assert cachefile.dumps(loaded) == data


def test_loaded_cache_edits_like_the_original(setup):
    sampler, params, _, cache = setup
    loaded = cachefile.loads(cachefile.dumps(cache))
    spec = EditSpec(PROMPT, "a orange fox in a forest", edit_words=[2])
    assert np.array_equal(sampler.run_edit(spec, params, cache).edited, sampler.run_edit(spec, params, loaded).edited)


def test_index_layout(setup):
    _, _, _, cache = setup
    data = cachefile.dumps(cache)
    n_records = len(cache)
    cfg = cache.config
    record_bytes = 4 * (3 * cfg.n_tokens * cfg.d_head + cfg.n_tokens)
    payload_start = len(data) - n_records * record_bytes
    index_start = payload_start - n_records * 29
    assert struct.unpack_from("<I", data, index_start - 4)[0] == n_records
    step, layer, head, pass_id, offset, nbytes = struct.unpack_from("<IIIBQQ", data, index_start + 29)
    assert (step, layer, head, pass_id, offset, nbytes) == (0, 0, 0, 1, record_bytes, record_bytes)


def test_bad_inputs_are_load_errors(setup):
    _, _, _, cache = setup
    data = cachefile.dumps(cache)
    with pytest.raises(LoadError, match="magic"):
        cachefile.loads(b"XXXX" + data[4:])
    with pytest.raises(LoadError, match="version"):
        cachefile.loads(data[:4] + struct.pack("<I", 9) + data[8:])
    with pytest.raises(LoadError, match="truncated|extent"):
        cachefile.loads(data[:-10])
    with pytest.raises(LoadError, match="truncated"):
        cachefile.loads(data[:20])
    flipped = bytearray(data)
    flipped[9] ^= 0xFF  # inside the run digest
    with pytest.raises(LoadError, match="digest"):
        cachefile.loads(bytes(flipped))


def test_unfinalized_cache_cannot_be_saved(setup):
    sampler, _, _, _ = setup
    _, cache = sampler.run_source(PROMPT, SampleParams(steps=3, record=False))
    with pytest.raises(StateError):
        cachefile.dumps(cache)
