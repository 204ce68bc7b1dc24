"""Rectified-flow Euler sampling with classifier-free guidance, and the
source/target branch orchestration used for editing.

The source branch is a plain generation that records every attention call
into a ``BranchCache``.  The target branch starts from the same seeded noise
and replays the cache through an ``EditController``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .control import (DEFAULT_EPSILON, EditController, EditMask, MaskAccumulator, Reweight, SourceRowsMemo,
                      binarize_mask, span_indices)
from .errors import ControlError, InputError, ResourceError, ScheduleError, ShapeError, StateError
from .model import (AttentionKey, AttentionRecord, Controller, ModelConfig, TokenSequence, ToyMMDiT, null_tokens,
                    tokenize)
from .tensor import Rng, as_f32, seeded_normal

log = logging.getLogger(__name__)

PASSES = ("cond", "uncond")


@dataclass(frozen=True)
class SampleParams:
    steps: int = 28
    cfg_scale: float = 7.5
    seed: int = 42
    record: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise InputError(f"steps must be >= 1, got {self.steps}")
        if self.cfg_scale < 1:
            raise InputError(f"cfg_scale must be >= 1, got {self.cfg_scale}")

    @property
    def passes(self) -> tuple[str, ...]:
        return PASSES if self.cfg_scale != 1 else PASSES[:1]


def run_digest(config: ModelConfig, params: SampleParams) -> bytes:
    """32-byte digest of everything a cache depends on besides the prompt."""
    payload = {"model": config.digest(), "steps": params.steps, "cfg_scale": params.cfg_scale, "seed": params.seed}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).digest()


def sigma_schedule(steps: int) -> np.ndarray:
    """Linear schedule sigma_i = 1 - i/steps for i = 0..steps."""
    return 1.0 - np.arange(steps + 1, dtype=np.float64) / steps


def euler_step(x, v, sigma_curr: float, sigma_next: float) -> np.ndarray:
    if not sigma_curr > sigma_next >= 0:
        raise ScheduleError(f"need sigma_curr > sigma_next >= 0, got {sigma_curr} -> {sigma_next}")
    x, v = as_f32(x), as_f32(v)
    if x.shape != v.shape:
        raise ShapeError(f"latent {x.shape} and velocity {v.shape} differ")
    return x + np.float32(sigma_next - sigma_curr) * v


def cfg_combine(v_cond, v_uncond, w: float) -> np.ndarray:
    v_cond, v_uncond = as_f32(v_cond), as_f32(v_uncond)
    if v_cond.shape != v_uncond.shape:
        raise ShapeError(f"velocity shapes differ: {v_cond.shape} vs {v_uncond.shape}")
    if w == 1:
        return v_cond.copy()
    return v_uncond + np.float32(w) * (v_cond - v_uncond)


def initial_noise(params: SampleParams, config: ModelConfig) -> np.ndarray:
    n = int(np.prod(config.image_shape))
    return seeded_normal(Rng(params.seed), n).reshape(config.image_shape)


def noise_digest(noise: np.ndarray) -> bytes:
    return hashlib.sha256(np.ascontiguousarray(noise).tobytes()).digest()


def decode(x: np.ndarray) -> np.ndarray:
    """Clamp the pixel-space latent to [0, 1] and quantise to 8-bit."""
    return np.round(np.clip(x.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


class BranchCache:
    """Write-once store of source-branch attention records.

    Keys are ``AttentionKey(step, layer, head, pass)``. After ``finalize`` the
    store is complete and immutable.
    """

    def __init__(self, config: ModelConfig, params: SampleParams, prompt: str, budget_bytes: int | None = None):
        self.config = config
        self.params = params
        self.prompt = prompt
        self.digest = run_digest(config, params)
        self.budget_bytes = budget_bytes
        self.records: dict[AttentionKey, AttentionRecord] = {}
        self.mask_acc = MaskAccumulator(config.n_vision, config.n_text)
        self.source_image: np.ndarray | None = None
        self.noise_digest: bytes = b""
        self.finalized = False
        self._nbytes = 0

    def expected_keys(self) -> Iterator[AttentionKey]:
        c = self.config
        for step in range(self.params.steps):
            for layer in range(c.n_layers):
                for head in range(c.n_heads):
                    for pass_ in self.params.passes:
                        yield AttentionKey(step, layer, head, pass_)

    def put(self, record: AttentionRecord, attn_map: np.ndarray | None = None) -> None:
        if self.finalized:
            raise StateError("cache is finalized; no further writes are accepted")
        if record.key in self.records:
            raise StateError(f"duplicate cache key {record.key}")
        if self.budget_bytes is not None and self._nbytes + record.nbytes > self.budget_bytes:
            raise ResourceError(f"cache budget of {self.budget_bytes} bytes exceeded at {record.key}")
        self.records[record.key] = record
        self._nbytes += record.nbytes
        if record.key.pass_ == "cond":
            self.mask_acc.add_record(record, attn_map)

    def finalize(self) -> None:
        missing = [k for k in self.expected_keys() if k not in self.records]
        if missing:
            raise StateError(f"cache incomplete: {len(missing)} keys missing, first {missing[0]}")
        self.finalized = True

    def get(self, key: AttentionKey) -> AttentionRecord:
        try:
            return self.records[key]
        except KeyError:
            raise ControlError(f"cache has no record for {key}") from None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def nbytes(self) -> int:
        return self._nbytes + self.mask_acc.total.nbytes

    def ordered_records(self) -> list[AttentionRecord]:
        return [self.records[k] for k in self.expected_keys() if k in self.records]


@dataclass
class EditSpec:
    source_prompt: str
    target_prompt: str
    edit_words: list[int] = field(default_factory=list)
    reweight: dict[int, float] = field(default_factory=dict)
    reweight_on: str = "target"
    epsilon: float = DEFAULT_EPSILON
    enable_structure: bool = True
    enable_color: bool = True
    control_uncond: bool = True
    mask_dilate: int = 0

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise InputError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.enable_color and not self.edit_words:
            raise InputError("color preservation needs at least one edit word")
        if any(s < 0 for s in self.reweight.values()):
            raise InputError("re-weight scales must be non-negative")
        if self.reweight_on not in ("target", "source"):
            raise InputError(f"reweight_on must be 'target' or 'source', got {self.reweight_on!r}")

    @property
    def has_control(self) -> bool:
        return self.enable_structure or self.enable_color or any(s != 1 for s in self.reweight.values())


@dataclass
class EditResult:
    edited: np.ndarray
    source: np.ndarray
    mask: EditMask | None
    log: list[dict]


class Sampler:
    """Generation and editing on one immutable model.

    ``calls`` counts invocations of ``run_source``, ``run_edit`` and
    ``generate`` so callers can check how often each branch ran.
    """

    def __init__(self, model: ToyMMDiT | None = None, cache_budget_bytes: int | None = None):
        self.model = model or ToyMMDiT()
        self.config = self.model.config
        self.cache_budget_bytes = cache_budget_bytes
        self.calls: Counter = Counter()

    def tokenize(self, prompt: str) -> TokenSequence:
        return tokenize(prompt, self.config)

    def generate(self, prompt: str, params: SampleParams, controller: Controller | None = None,
                 recorder=None, noise: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, list[dict]]:
        """Sample from seeded noise; returns (image uint8, final latent, per-step log)."""
        self.calls["generate"] += 1
        x = initial_noise(params, self.config) if noise is None else noise
        return self._lockstep([(prompt, controller)], params, x, recorder)[0]

    def _lockstep(self, branches, params: SampleParams, noise: np.ndarray, recorder=None):
        """Advance several (prompt, controller) branches from the same noise one step at a time.

        Each branch runs exactly the computation a lone ``generate`` would, so
        results do not depend on which other branches share the loop.
        """
        uncond = null_tokens(self.config)
        sigmas = sigma_schedule(params.steps)
        states = [[self.tokenize(prompt), controller, noise, []] for prompt, controller in branches]
        for i in range(params.steps):
            t = float(sigmas[i])
            for state in states:
                tokens, controller, x, steps_log = state
                before = dict(controller.calls) if hasattr(controller, "calls") else {}
                v = self.model.forward(x, t, tokens, controller, step=i, pass_="cond", recorder=recorder)
                if params.cfg_scale != 1:
                    v_u = self.model.forward(x, t, uncond, controller, step=i, pass_="uncond", recorder=recorder)
                    v = cfg_combine(v, v_u, params.cfg_scale)
                state[2] = euler_step(x, v, sigmas[i], sigmas[i + 1])
                entry = {"step": i, "sigma": t}
                if before:
                    entry.update({k: controller.calls[k] - before[k] for k in before})
                steps_log.append(entry)
        return [(decode(x), x, steps_log) for _, _, x, steps_log in states]

    def run_source(self, prompt: str, params: SampleParams = SampleParams()) -> tuple[np.ndarray, BranchCache]:
        """Plain generation that records every attention call into a finalized cache.

        With ``params.record`` off the cache stays empty and unfinalized.
        """
        self.calls["run_source"] += 1
        cache = BranchCache(self.config, params, prompt, self.cache_budget_bytes)
        noise = initial_noise(params, self.config)
        recorder = cache.put if params.record else None
        image, _, _ = self.generate(prompt, params, recorder=recorder, noise=noise)
        cache.source_image = image
        cache.noise_digest = noise_digest(noise)
        if params.record:
            cache.finalize()
        return image, cache

    def edit_mask(self, spec: EditSpec, cache: BranchCache) -> EditMask | None:
        if not spec.edit_words:
            return None
        tokens = self.tokenize(cache.prompt)
        span = span_indices(tokens.span(w) for w in spec.edit_words)
        scores = cache.mask_acc.scores(span)
        return binarize_mask(scores, spec.epsilon, self.config, spec.mask_dilate)

    def _check_cache(self, spec: EditSpec, params: SampleParams, cache: BranchCache) -> None:
        if not cache.finalized:
            raise StateError("cache is not finalized (was the source run with record=False?)")
        if cache.config != self.config or cache.digest != run_digest(self.config, params):
            raise ControlError("cache was produced with a different model configuration or sampling parameters")
        if spec.source_prompt != cache.prompt:
            raise ControlError(f"cache holds prompt {cache.prompt!r}, edit expects {spec.source_prompt!r}")

    def run_edit(self, spec: EditSpec, params: SampleParams, cache: BranchCache) -> EditResult:
        """Target branch: same noise as the source, controls replayed from ``cache``."""
        return self.run_edits([spec], params, cache)[0]

    def run_edits(self, specs: list[EditSpec], params: SampleParams, cache: BranchCache) -> list[EditResult]:
        """Several target branches against one cached source, run in lockstep.

        Controllers share one memo of rebuilt source maps, so each source map
        is reconstructed once per step no matter how many targets use it.
        Every result is bitwise identical to a separate ``run_edit``.
        """
        self.calls["run_edit"] += len(specs)
        for spec in specs:
            self._check_cache(spec, params, cache)
        noise = initial_noise(params, self.config)
        if noise_digest(noise) != cache.noise_digest:
            raise ControlError("target noise differs from the noise the source branch consumed")
        memo = SourceRowsMemo(cache, self.config.n_text)
        branches, masks = [], []
        for spec in specs:
            mask = self.edit_mask(spec, cache)
            controller = None
            if spec.has_control:
                reweight_tokens = self.tokenize(cache.prompt if spec.reweight_on == "source" else spec.target_prompt)
                reweights = [Reweight(list(range(*reweight_tokens.span(w))), s) for w, s in sorted(spec.reweight.items())]
                controller = EditController(
                    cache, self.config,
                    mask=mask if spec.enable_color else None,
                    structure=spec.enable_structure,
                    reweights=reweights,
                    reweight_on=spec.reweight_on,
                    control_uncond=spec.control_uncond,
                    memo=memo,
                )
            if mask is not None and mask.degenerate:
                log.warning("edit mask is degenerate for words %s", spec.edit_words)
            branches.append((spec.target_prompt, controller))
            masks.append(mask)
        outputs = self._lockstep(branches, params, noise)
        return [EditResult(edited, cache.source_image, mask, steps_log)
                for (edited, _, steps_log), mask in zip(outputs, masks)]


def run_source(prompt: str, params: SampleParams = SampleParams(), sampler: Sampler | None = None):
    return (sampler or Sampler()).run_source(prompt, params)


def run_edit(spec: EditSpec, params: SampleParams, cache: BranchCache, sampler: Sampler | None = None) -> EditResult:
    return (sampler or Sampler(ToyMMDiT(cache.config))).run_edit(spec, params, cache)
