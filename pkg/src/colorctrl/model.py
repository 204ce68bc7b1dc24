"""A miniature multi-modal diffusion transformer operating directly in pixel space.

Text and vision tokens are concatenated (text first) and mixed by one joint
self-attention per head.  Each block keeps separate projection weights for
the two modalities, modulated by a sinusoidal timestep embedding.  The
attention core exposes three hook points to an optional controller and can
hand raw (q, k, v) to a recorder so another pass can rebuild the exact same
scores and maps later.
"""

from __future__ import annotations

import hashlib
import json
import math
import string
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import ConfigError, ControlError, InputError, ShapeError
from .tensor import Rng, as_f32, gelu, layer_norm, matmul, matmul_add_row, rms_norm, seeded_normal, silu, softmax_rows

PAD_ID = 0
# Additive bias on padded key columns; exp() of it underflows to exactly zero.
PAD_BIAS = np.float32(-1e9)
_PIECE_BYTES = 8


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch: int = 2
    n_text: int = 16
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 6
    mlp_ratio: int = 2
    vocab_size: int = 4096
    init_seed: int = 0
    init_std: float = 0.02  # modulation and timestep weights
    content_std: float = 0.125  # value, output and MLP weights
    qk_content: float = 0.1  # how much image content steers queries and keys
    out_std: float = 0.6  # velocity head
    qk_gain: float = 2.0  # per-head q/k RMS after normalisation; 0 disables it
    grounding: float = 1.5  # scale of a word's positional code
    prior_mean: float = 0.5
    prior_std: float = 0.2

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.patch < 1 or self.image_size % self.patch:
            raise ConfigError(f"image_size={self.image_size} is not divisible by patch={self.patch}")
        for name in ("channels", "n_text", "n_layers", "mlp_ratio", "n_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must leave room for the pad id")
        if self.d_model < 4 or self.d_model % 4:
            raise ConfigError(f"d_model={self.d_model} must be a positive multiple of 4")
        if self.prior_std <= 0:
            raise ConfigError("prior_std must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def d_pos(self) -> int:
        """Width of the positional half of the residual stream."""
        return self.d_model // 2

    @property
    def n_vision(self) -> int:
        return self.grid**2

    @property
    def n_tokens(self) -> int:
        return self.n_text + self.n_vision

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_size, self.image_size, self.channels)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass
class TokenSequence:
    """Token ids padded to ``n_text`` plus word bookkeeping.

    ``anchor_ids[i]`` is the id whose grid cell grounds token ``i``: the first
    token of the last word of the phrase the token belongs to.
    """

    token_ids: np.ndarray
    words: list[str]
    word_spans: dict[int, tuple[int, int]]
    length: int
    anchor_ids: np.ndarray = None

    def __post_init__(self):
        if self.anchor_ids is None:
            self.anchor_ids = self.token_ids.copy()

    def span(self, word_index: int) -> tuple[int, int]:
        try:
            return self.word_spans[word_index]
        except KeyError:
            raise InputError(f"word index {word_index} is not present (prompt words: {self.words})") from None

    def key_bias(self, n_vision: int) -> np.ndarray:
        bias = np.zeros(len(self.token_ids) + n_vision, np.float32)
        bias[: len(self.token_ids)][self.token_ids == PAD_ID] = PAD_BIAS
        return bias


# Words that end a phrase. Every other word is grounded at the grid cell of the
# last word of its run, so "white fox" lands where "fox" does.
FUNCTION_WORDS = frozenset(
    "a an the in on at of by near over under with and against beside behind into onto to from for "
    "is are under above below inside outside next".split()
)


def phrase_heads(words: list[str]) -> list[int]:
    """Index of the grounding word for each word."""
    heads = list(range(len(words)))
    i = 0
    while i < len(words):
        if words[i] in FUNCTION_WORDS:
            i += 1
            continue
        j = i
        while j + 1 < len(words) and words[j + 1] not in FUNCTION_WORDS:
            j += 1
        heads[i : j + 1] = [j] * (j + 1 - i)
        i = j + 1
    return heads


def normalize_word(word: str) -> str:
    stripped = word.lower().strip(string.punctuation)
    return stripped or word.lower()


def _piece_id(piece: bytes, vocab_size: int) -> int:
    h = int.from_bytes(hashlib.blake2b(piece, digest_size=8).digest(), "little")
    return 1 + h % (vocab_size - 1)


def tokenize(prompt: str, config: ModelConfig) -> TokenSequence:
    """Split on whitespace; each word becomes one token per 8 UTF-8 bytes.

    Words are lowercased and stripped of surrounding punctuation before
    hashing. The result is truncated or padded (id 0) to ``config.n_text``.
    """
    if not prompt or not prompt.strip():
        raise InputError("prompt is empty")
    words = [normalize_word(w) for w in prompt.split()]
    ids: list[int] = []
    spans: dict[int, tuple[int, int]] = {}
    for wi, word in enumerate(words):
        raw = word.encode("utf-8")
        start = len(ids)
        for off in range(0, len(raw), _PIECE_BYTES):
            ids.append(_piece_id(raw[off : off + _PIECE_BYTES], config.vocab_size))
        stop = min(len(ids), config.n_text)
        if start < config.n_text:
            spans[wi] = (start, stop)
    ids = ids[: config.n_text]
    length = len(ids)
    ids += [PAD_ID] * (config.n_text - length)
    token_ids = np.array(ids, np.int64)
    anchors = token_ids.copy()
    for wi, head in enumerate(phrase_heads(words)):
        if wi in spans:
            start, stop = spans[wi]
            anchor_start = spans.get(head, spans[wi])[0]
            anchors[start:stop] = token_ids[anchor_start]
    return TokenSequence(token_ids, words, spans, length, anchors)


def null_tokens(config: ModelConfig) -> TokenSequence:
    """The all-pad sequence used by the unconditional guidance pass."""
    return TokenSequence(np.zeros(config.n_text, np.int64), [], {}, 0)


def find_word(tokens: TokenSequence, word: str) -> int:
    target = normalize_word(word)
    for i, w in enumerate(tokens.words):
        if w == target and i in tokens.word_spans:
            return i
    raise InputError(f"word {word!r} does not occur in prompt words {tokens.words}")


def patchify(image: np.ndarray, config: ModelConfig) -> np.ndarray:
    """(H, W, C) -> (n_vision, patch*patch*C), patches in row-major grid order."""
    if image.shape != config.image_shape:
        raise ShapeError(f"expected image of shape {config.image_shape}, got {image.shape}")
    g, p, c = config.grid, config.patch, config.channels
    return image.reshape(g, p, g, p, c).transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * c)


def unpatchify(tokens: np.ndarray, config: ModelConfig) -> np.ndarray:
    g, p, c = config.grid, config.patch, config.channels
    if tokens.shape != (g * g, p * p * c):
        raise ShapeError(f"expected tokens of shape {(g * g, p * p * c)}, got {tokens.shape}")
    return tokens.reshape(g, g, p, p, c).transpose(0, 2, 1, 3, 4).reshape(g * p, g * p, c)


def sinusoidal(positions, dim: int, max_period: float = 10000.0) -> np.ndarray:
    positions = np.asarray(positions, np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    angles = positions * freqs
    emb = np.concatenate([np.cos(angles), np.sin(angles)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(emb), 1))], axis=1)
    return emb.astype(np.float32)


class AttentionKey(NamedTuple):
    step: int
    layer: int
    head: int
    pass_: str  # "cond" or "uncond"


class AttentionRecord:
    """One (step, layer, head, pass) attention call, stored as its q, k, v.

    ``scores`` and ``map`` are recomputed on access with the same kernels the
    forward pass used, so they are bitwise identical to what the model saw.
    Token order is [text; vision].
    """

    __slots__ = ("key", "q", "k", "v", "key_bias", "n_text")

    def __init__(self, key: AttentionKey, q, k, v, key_bias, n_text: int):
        self.key = key
        self.q, self.k, self.v, self.key_bias = q, k, v, key_bias
        self.n_text = n_text
        for arr in (q, k, v, key_bias):
            arr.flags.writeable = False

    @property
    def d_head(self) -> int:
        return self.q.shape[1]

    @property
    def scores(self) -> np.ndarray:
        return attention_scores(self.q, self.k, self.key_bias)

    @property
    def map(self) -> np.ndarray:
        return softmax_rows(self.scores, 1.0 / math.sqrt(self.d_head))

    def vision_rows(self) -> np.ndarray:
        """Rows of ``map`` for the vision queries only; equal to ``map[n_text:]`` bitwise."""
        scores = attention_scores(self.q[self.n_text :], self.k, self.key_bias)
        return softmax_rows(scores, 1.0 / math.sqrt(self.d_head))

    @property
    def v_text(self) -> np.ndarray:
        return self.v[: self.n_text]

    @property
    def v_vision(self) -> np.ndarray:
        return self.v[self.n_text :]

    @property
    def nbytes(self) -> int:
        return self.q.nbytes + self.k.nbytes + self.v.nbytes + self.key_bias.nbytes


class Controller:
    """No-op controller. Subclasses override the hooks they need.

    Hooks run in the order reweight (pre-softmax scores), softmax, structure
    (post-softmax map), color (vision value tokens).  Each receives the
    ``AttentionKey`` of the call.  The map handed to ``structure`` belongs to
    the attention call and any recorder has already seen it, so the hook may
    edit it in place.
    """

    n_text: int | None = None

    def reweight(self, scores: np.ndarray, key: AttentionKey) -> np.ndarray:
        return scores

    def structure(self, attn_map: np.ndarray, key: AttentionKey) -> np.ndarray:
        return attn_map

    def color(self, v_vision: np.ndarray, key: AttentionKey) -> np.ndarray:
        return v_vision


Recorder = Callable[[AttentionRecord, np.ndarray], None]


def attention_scores(q, k, key_bias) -> np.ndarray:
    return matmul_add_row(q, np.ascontiguousarray(k.T), key_bias)


def attend(q, k, v, n_text: int, key_bias=None, controller: Controller | None = None,
           key: AttentionKey | None = None, recorder: Recorder | None = None):
    """Single-head joint attention on concatenated [text; vision] q, k, v.

    Returns the (n_text + n_vision, d_head) output.
    """
    n = q.shape[0]
    if key_bias is None:
        key_bias = np.zeros(n, np.float32)
    if controller is not None and controller.n_text is not None and controller.n_text != n_text:
        raise ControlError(f"controller built for n_text={controller.n_text}, attention has n_text={n_text}")
    scale = 1.0 / math.sqrt(q.shape[1])
    scores = attention_scores(q, k, key_bias)
    if controller is not None:
        scores = controller.reweight(scores, key)
    attn_map = softmax_rows(scores, scale)
    if recorder is not None:
        recorder(AttentionRecord(key, q, k, v, key_bias, n_text), attn_map)
    if controller is not None:
        attn_map = controller.structure(attn_map, key)
        v_vision = v[n_text:]
        v_hat = controller.color(v_vision, key)
        if v_hat is not v_vision:
            v = np.concatenate([v[:n_text], v_hat])
    return matmul(attn_map, v)


@dataclass
class StreamWeights:
    """One modality's parameters inside one block."""

    mod: np.ndarray  # (d, 6d): shift/scale/gate for attention then MLP
    qkv: np.ndarray  # (d, 3d)
    out: np.ndarray  # (d, d)
    fc1: np.ndarray  # (d, mlp)
    fc2: np.ndarray  # (mlp, d)


@dataclass
class BlockWeights:
    text: StreamWeights
    vision: StreamWeights


@dataclass
class ModelWeights:
    token_embed: np.ndarray  # (vocab, d)
    patch_embed: np.ndarray  # (patch_dim, d)
    time_fc1: np.ndarray  # (d, d)
    time_fc2: np.ndarray  # (d, d)
    blocks: list[BlockWeights]
    final_mod: np.ndarray  # (d, 2d)
    final_out: np.ndarray  # (d, patch_dim)
    vision_pos: np.ndarray = field(repr=False, default=None)
    prior_gain: float = 1.0  # weight of the closed-form prior velocity

    def zeros_like(self) -> "ModelWeights":
        def z(a):
            return np.zeros_like(a)

        blocks = [
            BlockWeights(*(StreamWeights(*(z(getattr(s, f)) for f in ("mod", "qkv", "out", "fc1", "fc2")))
                           for s in (b.text, b.vision)))
            for b in self.blocks
        ]
        return ModelWeights(z(self.token_embed), z(self.patch_embed), z(self.time_fc1), z(self.time_fc2),
                            blocks, z(self.final_mod), z(self.final_out), z(self.vision_pos), 0.0)


def grid_code(config: ModelConfig) -> np.ndarray:
    """2-D sinusoidal code of every grid cell, (n_vision, d_pos): row half then column half."""
    gy, gx = np.divmod(np.arange(config.n_vision), config.grid)
    half = config.d_pos // 2
    return np.concatenate([sinusoidal(gy, half, 100.0), sinusoidal(gx, half, 100.0)], axis=1)


def vision_positions(config: ModelConfig) -> np.ndarray:
    """Positional embedding of the vision tokens: the grid code in the positional half, zeros elsewhere."""
    out = np.zeros((config.n_vision, config.d_model), np.float32)
    out[:, : config.d_pos] = grid_code(config)
    return out


def init_weights(config: ModelConfig) -> ModelWeights:
    """Seeded weights with a fixed layout that makes an untrained model behave
    like a text-conditioned generator.

    The residual stream is split in two halves. The positional half holds a
    grid code and is never written by any block; the content half holds
    pixel and word content. Queries and keys read mostly the positional half,
    so attention stays spatially coherent through depth, while values, the
    output projection, the MLP and the velocity head touch only content.

    Each vocabulary entry owns a seeded grid cell. A word's positional half is
    ``grounding`` times the code of its phrase anchor's cell and its content
    half is a unit normal vector, so vision tokens near that cell attend to the
    word and take on its content. The patch embedding reads each patch's
    per-channel mean and the velocity head writes one value per channel and
    patch. One query/key projection is shared by both
    roles and both streams in a block, so a score measures similarity.
    """
    rng = Rng(config.init_seed)
    d, p, hidden = config.d_model, config.d_pos, config.d_model * config.mlp_ratio
    c = d - p

    def draw(*shape, std):
        return seeded_normal(rng, int(np.prod(shape)), 0.0, std).reshape(shape)

    code = grid_code(config)
    cells = (rng.next_u64(config.vocab_size) % np.uint64(config.n_vision)).astype(np.int64)
    token_embed = np.zeros((config.vocab_size, d), np.float32)
    token_embed[:, :p] = config.grounding * code[cells]
    token_embed[:, p:] = draw(config.vocab_size, c, std=1.0)
    token_embed[PAD_ID] = 0.0
    patch_embed = np.zeros((config.patch_dim, d), np.float32)
    patch_embed[:, p:] = draw(config.patch_dim, c, std=1.0)
    # every pixel of a patch shares its channel's row, so tokens read the patch mean
    pe = patch_embed.reshape(config.patch**2, config.channels, d)
    pe[:] = pe[0:1] / np.float32(config.patch**2)
    time_fc1 = draw(d, d, std=config.init_std)
    time_fc2 = draw(d, d, std=config.init_std)
    blocks = []
    for _ in range(config.n_layers):
        qk = np.concatenate([draw(p, d, std=1.0 / math.sqrt(p)), draw(c, d, std=config.qk_content / math.sqrt(c))])
        streams = []
        for _ in range(2):
            qkv = np.zeros((d, 3 * d), np.float32)
            qkv[:, : 2 * d] = np.concatenate([qk, qk], axis=1)
            qkv[p:, 2 * d :] = draw(c, d, std=config.content_std)
            out = np.zeros((d, d), np.float32)
            out[:, p:] = draw(d, c, std=config.content_std)
            fc1 = np.zeros((d, hidden), np.float32)
            fc1[p:] = draw(c, hidden, std=config.content_std)
            fc2 = np.zeros((hidden, d), np.float32)
            fc2[:, p:] = draw(hidden, c, std=config.content_std)
            streams.append(StreamWeights(draw(d, 6 * d, std=config.init_std), qkv, out, fc1, fc2))
        blocks.append(BlockWeights(*streams))
    final_mod = draw(d, 2 * d, std=config.init_std)
    final_out = np.zeros((d, config.patch_dim), np.float32)
    final_out[p:] = draw(c, config.patch_dim, std=config.out_std)
    # and the head paints flat patches
    fo = final_out.reshape(d, config.patch**2, config.channels)
    fo[:] = fo[:, 0:1, :]
    return ModelWeights(token_embed, patch_embed, time_fc1, time_fc2, blocks, final_mod, final_out,
                        vision_positions(config))


def prior_velocity(x_t, t: float, mean: float, std: float) -> np.ndarray:
    """Exact flow velocity when every pixel of the data is independent N(mean, std^2).

    With ``x_t = t * noise + (1 - t) * x0`` the velocity ``E[noise - x0 | x_t]``
    is affine in ``x_t``; sampling with it alone maps noise to ``mean + std * noise``.
    """
    var = t * t + (1.0 - t) ** 2 * std * std
    r = np.asarray(x_t, np.float64) - (1.0 - t) * mean
    return ((t - (1.0 - t) * std * std) / var * r - mean).astype(np.float32)


class ToyMMDiT:
    """Immutable weights plus the forward pass. Safe to share between threads."""

    def __init__(self, config: ModelConfig | None = None, weights: ModelWeights | None = None):
        self.config = config or ModelConfig()
        self.weights = weights if weights is not None else init_weights(self.config)
        if self.weights.vision_pos is None:
            self.weights.vision_pos = vision_positions(self.config)

    def embed_text(self, tokens: TokenSequence) -> np.ndarray:
        """Content half from each token, positional half from its phrase anchor."""
        if len(tokens.token_ids) != self.config.n_text:
            raise ShapeError(f"token sequence has length {len(tokens.token_ids)}, expected {self.config.n_text}")
        p = self.config.d_pos
        table = self.weights.token_embed
        out = table[tokens.token_ids].copy()
        out[:, :p] = table[tokens.anchor_ids, :p]
        return as_f32(out)

    def time_embedding(self, t: float) -> np.ndarray:
        w = self.weights
        emb = sinusoidal([t * 1000.0], self.config.d_model)
        return matmul(silu(matmul(emb, w.time_fc1)), w.time_fc2)

    def joint_attention(self, x_text, x_vision, block: BlockWeights, head: int,
                        controller: Controller | None = None, key: AttentionKey | None = None,
                        key_bias=None, recorder: Recorder | None = None):
        """Project one head's q, k, v from both streams and attend jointly.

        Inputs are the (already modulated) text and vision token rows.
        Returns ``(out_text, out_vision, record)``; ``record`` is the
        ``AttentionRecord`` of this call.
        """
        c = self.config
        if x_text.shape[0] != c.n_text or x_vision.shape[0] != c.n_vision:
            raise ShapeError(f"expected {c.n_text} text and {c.n_vision} vision rows, "
                             f"got {x_text.shape[0]} and {x_vision.shape[0]}")
        dh = c.d_head
        cols = [slice(p * c.d_model + head * dh, p * c.d_model + (head + 1) * dh) for p in range(3)]
        qkv = [np.concatenate([matmul(x_text, block.text.qkv[:, s]), matmul(x_vision, block.vision.qkv[:, s])])
               for s in cols]
        captured = []

        def capture(record, attn_map):
            captured.append(record)
            if recorder is not None:
                recorder(record, attn_map)

        q, k, v = qkv
        q, k = self._qk_norm(q), self._qk_norm(k)
        out = attend(q, k, v, c.n_text, key_bias, controller, key, capture)
        return out[: c.n_text], out[c.n_text :], captured[0]

    def _qk_norm(self, x):
        return rms_norm(x, self.config.qk_gain) if self.config.qk_gain else x

    def _block(self, layer: int, xt, xv, cond, key_bias, step, pass_, controller, recorder):
        c = self.config
        b = self.weights.blocks[layer]
        d, dh = c.d_model, c.d_head
        mt = matmul(cond, b.text.mod)[0]
        mv = matmul(cond, b.vision.mod)[0]

        def modulate(x, m, i):
            return layer_norm(x) * (np.float32(1.0) + m[(i + 1) * d : (i + 2) * d]) + m[i * d : (i + 1) * d]

        qkv = np.concatenate([matmul(modulate(xt, mt, 0), b.text.qkv), matmul(modulate(xv, mv, 0), b.vision.qkv)])
        # q and k of every head normalised in one call; rows of the reshape are (token, head) pairs
        n = qkv.shape[0]
        qk = self._qk_norm(qkv[:, : 2 * d].reshape(n * 2 * c.n_heads, dh)).reshape(n, 2 * d)
        heads = []
        for h in range(c.n_heads):
            cols = slice(h * dh, (h + 1) * dh)
            q = np.ascontiguousarray(qk[:, cols])
            k = np.ascontiguousarray(qk[:, d:][:, cols])
            v = np.ascontiguousarray(qkv[:, 2 * d:][:, cols])
            key = AttentionKey(step, layer, h, pass_)
            heads.append(attend(q, k, v, c.n_text, key_bias, controller, key, recorder))
        attn = np.concatenate(heads, axis=1)
        one = np.float32(1.0)
        xt = xt + (one + mt[2 * d : 3 * d]) * matmul(attn[: c.n_text], b.text.out)
        xv = xv + (one + mv[2 * d : 3 * d]) * matmul(attn[c.n_text :], b.vision.out)
        xt = xt + (one + mt[5 * d :]) * matmul(gelu(matmul(modulate(xt, mt, 3), b.text.fc1)), b.text.fc2)
        xv = xv + (one + mv[5 * d :]) * matmul(gelu(matmul(modulate(xv, mv, 3), b.vision.fc1)), b.vision.fc2)
        return xt, xv

    def forward(self, x_t, t: float, tokens: TokenSequence, controller: Controller | None = None,
                step: int = 0, pass_: str = "cond", recorder: Recorder | None = None) -> np.ndarray:
        """Velocity prediction for latent ``x_t`` (H, W, C) at noise level ``t``."""
        c = self.config
        w = self.weights
        x_t = as_f32(x_t)
        xv = matmul(patchify(x_t, c), w.patch_embed) + w.vision_pos
        xt = self.embed_text(tokens)
        key_bias = tokens.key_bias(c.n_vision)
        cond = silu(self.time_embedding(t))
        for layer in range(c.n_layers):
            xt, xv = self._block(layer, xt, xv, cond, key_bias, step, pass_, controller, recorder)
        m = matmul(cond, w.final_mod)[0]
        d = c.d_model
        h = layer_norm(xv) * (np.float32(1.0) + m[d:]) + m[:d]
        v = unpatchify(matmul(h, w.final_out), c)
        if w.prior_gain:
            v = v + np.float32(w.prior_gain) * prior_velocity(x_t, t, c.prior_mean, c.prior_std)
        return v


def model_forward(model: ToyMMDiT, x_t, t: float, text: TokenSequence, controller: Controller | None = None,
                  **kwargs) -> np.ndarray:
    return model.forward(x_t, t, text, controller, **kwargs)
