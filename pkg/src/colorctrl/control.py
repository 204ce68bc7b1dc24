"""Attention control for color editing: quadrant addressing, structure and color
preservation, edit-mask extraction and attribute re-weighting.

All maps use [text; vision] token order, so for a map of size
``(n_text + n_vision)`` squared the quadrants are::

    tt = map[:n_text, :n_text]     tv = map[:n_text, n_text:]
    vt = map[n_text:, :n_text]     vv = map[n_text:, n_text:]

where the first letter names the query modality and the second the key
modality.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ControlError, InputError, ShapeError
from .model import AttentionKey, AttentionRecord, Controller, ModelConfig, TokenSequence

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.1


@dataclass(frozen=True)
class QuadrantView:
    """Semantic views into one attention map (no copies)."""

    map: np.ndarray
    n_text: int

    def __post_init__(self):
        n = self.map.shape[0]
        if self.map.ndim != 2 or self.map.shape[1] != n or not 0 <= self.n_text <= n:
            raise ControlError(f"cannot split map of shape {self.map.shape} at n_text={self.n_text}")

    @property
    def vv(self) -> np.ndarray:
        return self.map[self.n_text :, self.n_text :]

    @property
    def vt(self) -> np.ndarray:
        return self.map[self.n_text :, : self.n_text]

    @property
    def tv(self) -> np.ndarray:
        return self.map[: self.n_text, self.n_text :]

    @property
    def tt(self) -> np.ndarray:
        return self.map[: self.n_text, : self.n_text]


def structure_preserve(m_src: np.ndarray, m_tgt: np.ndarray, n_text: int) -> np.ndarray:
    """Target map with its vision-to-vision block replaced by the source's.

    Rows are not renormalised afterwards.
    """
    if m_src.shape != m_tgt.shape:
        raise ControlError(f"source map {m_src.shape} and target map {m_tgt.shape} differ in shape")
    out = m_tgt.copy()
    QuadrantView(out, n_text).vv[...] = QuadrantView(m_src, n_text).vv
    return out


class MaskAccumulator:
    """Running sum of the vision-to-text block over conditional-pass records.

    Sums are kept in float64, one slot per (vision token, text token), so the
    edit word can be chosen after the source pass has finished.
    """

    def __init__(self, n_vision: int, n_text: int):
        self.total = np.zeros((n_vision, n_text), np.float64)
        self.count = 0

    def add(self, vt: np.ndarray) -> None:
        if vt.shape != self.total.shape:
            raise ShapeError(f"vision-to-text block {vt.shape} does not match accumulator {self.total.shape}")
        self.total += vt
        self.count += 1

    def add_record(self, record: AttentionRecord, attn_map: np.ndarray | None = None) -> None:
        if attn_map is None:
            attn_map = record.map
        self.add(QuadrantView(attn_map, record.n_text).vt)

    def scores(self, token_indices: Sequence[int]) -> "MaskScores":
        idx = sorted(set(int(t) for t in token_indices))
        if not idx:
            raise InputError("mask span is empty")
        if idx[0] < 0 or idx[-1] >= self.total.shape[1]:
            raise InputError(f"mask span {idx} outside [0, {self.total.shape[1]})")
        if self.count == 0:
            raise InputError("no attention records were accumulated")
        raw = self.total[:, idx].sum(axis=1) / (self.count * len(idx))
        return normalize_scores(raw)


@dataclass
class MaskScores:
    values: np.ndarray  # float64 in [0, 1], one per vision token
    degenerate: bool


def normalize_scores(raw: np.ndarray) -> MaskScores:
    lo, hi = float(raw.min()), float(raw.max())
    if hi == lo:
        log.warning("edit-mask scores are constant (%g); returning an all-zero mask", lo)
        return MaskScores(np.zeros_like(raw, dtype=np.float64), True)
    return MaskScores((raw - lo) / (hi - lo), False)


def span_indices(spans: Iterable[tuple[int, int]]) -> list[int]:
    return sorted({t for start, stop in spans for t in range(start, stop)})


def accumulate_mask_scores(records: Iterable[AttentionRecord], span) -> MaskScores:
    """Mean vision-to-text attention onto ``span`` over all conditional records,
    min-max normalised over vision tokens.

    ``span`` is a ``(start, stop)`` token range or an explicit list of text
    token indices. Unconditional-pass records are skipped.
    """
    if isinstance(span, tuple) and len(span) == 2:
        span = range(*span)
    span = list(span)
    if not span:
        raise InputError("mask span is empty")
    acc = None
    for record in records:
        if record.key.pass_ != "cond":
            continue
        if acc is None:
            acc = MaskAccumulator(record.v.shape[0] - record.n_text, record.n_text)
        acc.add_record(record)
    if acc is None:
        raise InputError("no conditional-pass records supplied")
    return acc.scores(span)


@dataclass
class EditMask:
    token_mask: np.ndarray  # bool, (n_vision,)
    pixel_mask: np.ndarray  # bool, (image_size, image_size)
    epsilon_used: float
    degenerate: bool = False

    def to_image(self) -> np.ndarray:
        return self.pixel_mask.astype(np.uint8) * 255


def upsample_mask(token_mask: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Nearest-neighbour replication of a token mask onto the pixel grid."""
    grid = np.asarray(token_mask, bool).reshape(config.grid, config.grid)
    return np.repeat(np.repeat(grid, config.patch, axis=0), config.patch, axis=1)


def downsample_mask(pixel_mask: np.ndarray, config: ModelConfig) -> np.ndarray:
    return np.asarray(pixel_mask, bool)[:: config.patch, :: config.patch].reshape(-1)


def dilate_tokens(token_mask: np.ndarray, radius: int, config: ModelConfig) -> np.ndarray:
    from .metrics import dilate

    return dilate(token_mask.reshape(config.grid, config.grid), radius).reshape(-1)


def binarize_mask(scores, epsilon: float, config: ModelConfig, dilate_radius: int = 0) -> EditMask:
    """Threshold normalised scores at ``epsilon`` (inclusive)."""
    degenerate = False
    if isinstance(scores, MaskScores):
        degenerate = scores.degenerate
        scores = scores.values
    if not 0.0 < epsilon < 1.0:
        raise InputError(f"epsilon must lie in (0, 1), got {epsilon}")
    scores = np.asarray(scores)
    if scores.shape != (config.n_vision,):
        raise ShapeError(f"expected {config.n_vision} scores, got shape {scores.shape}")
    token_mask = scores >= epsilon
    if dilate_radius:
        token_mask = dilate_tokens(token_mask, dilate_radius, config)
    return EditMask(token_mask, upsample_mask(token_mask, config), float(epsilon), degenerate)


def color_preserve(v_src_vision: np.ndarray, v_tgt_vision: np.ndarray, mask) -> np.ndarray:
    """Target value rows inside the edit mask, source rows everywhere else."""
    token_mask = mask.token_mask if isinstance(mask, EditMask) else np.asarray(mask, bool)
    if v_src_vision.shape != v_tgt_vision.shape:
        raise ShapeError(f"value shapes differ: {v_src_vision.shape} vs {v_tgt_vision.shape}")
    if token_mask.shape != (v_src_vision.shape[0],):
        raise ShapeError(f"mask of shape {token_mask.shape} does not cover {v_src_vision.shape[0]} vision rows")
    return np.where(token_mask[:, None], v_tgt_vision, v_src_vision)


def reweight_scores(scores: np.ndarray, rows, scale: float, n_text: int) -> np.ndarray:
    """Multiply the vision-key entries of the selected text-query rows by ``scale``.

    Operates on raw scores, before the softmax.
    """
    if scale < 0:
        raise InputError(f"re-weight scale must be non-negative, got {scale}")
    rows = sorted(set(int(r) for r in rows))
    if rows and (rows[0] < 0 or rows[-1] >= n_text):
        raise InputError(f"re-weight rows {rows} outside the text range [0, {n_text})")
    out = scores.copy()
    if rows:
        out[rows, n_text:] *= np.float32(scale)
    return out


@dataclass
class Reweight:
    token_rows: list[int]
    scale: float


class SourceRowsMemo:
    """Vision-query rows of source maps, shared by controllers that run in lockstep.

    Only entries of the most recent step are kept, so memory stays at one
    step's worth of records.
    """

    def __init__(self, cache, n_text: int):
        self.cache = cache
        self.n_text = n_text
        self._step = None
        self._rows: dict[AttentionKey, np.ndarray] = {}
        self.misses = 0

    def vv(self, key: AttentionKey) -> np.ndarray:
        if key.step != self._step:
            self._rows.clear()
            self._step = key.step
        out = self._rows.get(key)
        if out is None:
            out = self.cache.get(key).vision_rows()[:, self.n_text :]
            self._rows[key] = out
            self.misses += 1
        return out


class EditController(Controller):
    """Target-branch controller replaying a finalized source cache.

    ``reweights`` act on the target's own scores (``reweight_on="target"``) or
    replace them with re-weighted source scores (``reweight_on="source"``).
    Re-weighting is skipped on the unconditional pass, which has no words.
    """

    def __init__(self, cache, config: ModelConfig, *, mask: EditMask | None, structure: bool,
                 reweights: Sequence[Reweight] = (), reweight_on: str = "target",
                 control_uncond: bool = True, memo: SourceRowsMemo | None = None):
        if reweight_on not in ("target", "source"):
            raise ControlError(f"unknown re-weight branch {reweight_on!r}")
        self.cache = cache
        self.n_text = config.n_text
        self.mask = mask
        self.enable_structure = structure
        self.reweights = [r for r in reweights if r.token_rows]
        self.reweight_on = reweight_on
        self.control_uncond = control_uncond
        self.calls = {"reweight": 0, "structure": 0, "color": 0}
        self.memo = memo or SourceRowsMemo(cache, config.n_text)

    def _active(self, key: AttentionKey) -> bool:
        return key.pass_ == "cond" or self.control_uncond

    def reweight(self, scores, key):
        if not self.reweights or key.pass_ != "cond":
            return scores
        if self.reweight_on == "source":
            scores = self.cache.get(key).scores
        for rw in self.reweights:
            scores = reweight_scores(scores, rw.token_rows, rw.scale, self.n_text)
        self.calls["reweight"] += 1
        return scores

    def structure(self, attn_map, key):
        if not self.enable_structure or not self._active(key):
            return attn_map
        self.calls["structure"] += 1
        src_vv = self.memo.vv(key)
        if src_vv.shape != QuadrantView(attn_map, self.n_text).vv.shape:
            raise ControlError(f"source and target maps differ in shape at {key}")
        # the map is owned by the attention call, so no copy is needed
        QuadrantView(attn_map, self.n_text).vv[...] = src_vv
        return attn_map

    def color(self, v_vision, key):
        if self.mask is None or not self._active(key):
            return v_vision
        self.calls["color"] += 1
        return color_preserve(self.cache.get(key).v_vision, v_vision, self.mask)
