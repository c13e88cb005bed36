"""The query-based vision-language segmentation model.

Pipeline: a small convolutional backbone fuses three feature stages into a
raw vision map; a word-embedding + GRU encoder turns the expression into
per-word features and a sentence state; the sentence state gates the
flattened vision features, which a transformer encoder (with fixed 2-D
sinusoidal positions) turns into memory; query vectors are generated from
the vision map and word features, refined against the memory by a
transformer decoder, weighted by per-query confidences, and fused back
into the spatial map that a small convolutional head decodes into mask
logits at full image resolution.

Three query sources are supported: vision-guided generation from word
features (the default), a learned input-independent query bank, and the
per-word features themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import ConvParams, DecoderLayerParams, EncoderLayerParams, GruParams, LinearParams
from .prng import Prng
from .tensor import (
    Tensor,
    ValidationError,
    add,
    bce_with_logits,
    concat,
    conv2d,
    gather_rows,
    matmul,
    mul,
    relu,
    reshape,
    resize_nearest,
    sigmoid,
    softmax_masked,
    swap_last2,
    tanh,
    tensor_sum,
    transpose,
    upsample2x,
)

QUERY_SOURCES = ("qgm", "learned", "words")


@dataclass(frozen=True)
class VLTConfig:
    """Architecture hyperparameters; every parameter shape derives from these."""

    image_h: int = 64
    image_w: int = 64
    channels: int = 64          # feature width C, divisible by 8 and by heads
    n_query: int = 16
    max_words: int = 8          # expression length after zero-padding
    vocab_size: int = 16
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    backbone_channels: tuple[int, int, int, int] = (16, 32, 64, 64)
    query_source: str = "qgm"

    def __post_init__(self):
        if self.image_h % 4 or self.image_w % 4:
            raise ValidationError(f"image extents must be divisible by 4, got "
                                  f"{self.image_h}x{self.image_w}")
        if self.channels % 8:
            raise ValidationError(f"channels must be divisible by 8, got {self.channels}")
        if self.channels % self.heads:
            raise ValidationError(f"channels {self.channels} not divisible by "
                                  f"{self.heads} heads")
        if self.n_query < 1 or self.max_words < 1:
            raise ValidationError("n_query and max_words must be >= 1")
        if self.vocab_size < 2:
            raise ValidationError("vocab_size must be >= 2")
        if self.query_source not in QUERY_SOURCES:
            raise ValidationError(f"unknown query_source {self.query_source!r}")
        if self.query_source == "words" and self.n_query != self.max_words:
            raise ValidationError(
                f"query_source 'words' needs n_query == max_words, got "
                f"{self.n_query} != {self.max_words}")
        if len(self.backbone_channels) != 4:
            raise ValidationError("backbone_channels must list four stage widths")

    @property
    def feat_h(self) -> int:
        return self.image_h // 4

    @property
    def feat_w(self) -> int:
        return self.image_w // 4

    @property
    def n_vision(self) -> int:
        return self.feat_h * self.feat_w

    @property
    def ffn_dim(self) -> int:
        return 4 * self.channels

    def to_dict(self) -> dict:
        return {
            "image_h": self.image_h, "image_w": self.image_w,
            "channels": self.channels, "n_query": self.n_query,
            "max_words": self.max_words, "vocab_size": self.vocab_size,
            "heads": self.heads, "encoder_layers": self.encoder_layers,
            "decoder_layers": self.decoder_layers,
            "backbone_channels": list(self.backbone_channels),
            "query_source": self.query_source,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VLTConfig":
        d = dict(d)
        if "backbone_channels" in d:
            d["backbone_channels"] = tuple(d["backbone_channels"])
        return cls(**d)


@dataclass
class BackboneParams:
    """Two stride-2 stem convs reach the feature grid; two more stride-2
    convs form the lower stages; 1x1 convs project each stage to C."""
    stem1: ConvParams
    stem2: ConvParams
    down2: ConvParams
    down3: ConvParams
    proj1: ConvParams
    proj2: ConvParams
    proj3: ConvParams


@dataclass
class QueryGenParams:
    """Channel-reduction convs plus the three attention projections."""
    conv1: ConvParams         # 3x3, C -> C
    conv2: ConvParams         # 3x3, C -> C/2
    conv3: ConvParams         # 1x1, C/2 -> N_q
    vision_proj: LinearParams  # per-query map (H*W) -> C
    word_proj: LinearParams    # word feature C -> C
    query_proj: LinearParams   # word feature C -> C for query formation


@dataclass
class QueryBalanceParams:
    reduce: LinearParams  # [query ; response] 2C -> C
    score: LinearParams   # C -> 1


@dataclass
class MaskHeadParams:
    conv1: ConvParams  # 3x3, C -> C/2 at feature resolution
    conv2: ConvParams  # 3x3, C/2 -> C/4 after first 2x upsample
    conv3: ConvParams  # 3x3, C/4 -> C/8 after second 2x upsample
    out: ConvParams    # 1x1, C/8 -> 1 logit channel


@dataclass
class VLTParams:
    """Every learnable weight of the model."""
    embed: Tensor
    gru: GruParams
    backbone: BackboneParams
    query_gen: QueryGenParams
    encoder: list[EncoderLayerParams]
    decoder: list[DecoderLayerParams]
    balance: QueryBalanceParams
    mask_head: MaskHeadParams
    learned_queries: Tensor


@dataclass
class ForwardTrace:
    """Named intermediates of one forward pass.

    `query_maps` and `word_attn` are populated only on the generated-query
    path; `confidence` is all-ones when query balancing is disabled.
    Attention weight lists hold per-layer arrays for visualization.
    """
    vision_raw: Tensor          # [C, H, W]
    words: Tensor               # [N_l, C], zero rows beyond the real length
    pad_mask: np.ndarray        # bool [N_l], True on real tokens
    sentence_state: Tensor      # [C]
    vision_seq: Tensor          # [N_v, C]
    query_maps: Tensor | None   # [N_q, H*W]
    word_attn: Tensor | None    # [N_q, N_l]
    queries: Tensor             # [N_q, C]
    memory: Tensor              # [N_v, C]
    responses: Tensor           # [N_q, C]
    confidence: Tensor          # [N_q, 1]
    mask_logits: Tensor         # [image_h, image_w]
    encoder_attn: list = field(default_factory=list)
    decoder_self_attn: list = field(default_factory=list)
    decoder_cross_attn: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def init_params(cfg: VLTConfig, prng: Prng) -> VLTParams:
    """Allocate and initialize all weights; same seed gives identical values."""
    c = cfg.channels
    b0, b1, b2, b3 = cfg.backbone_channels
    return VLTParams(
        embed=nn.init_embedding(prng, cfg.vocab_size, c),
        gru=nn.init_gru(prng, c, c),
        backbone=BackboneParams(
            stem1=nn.init_conv(prng, b0, 3, 3),
            stem2=nn.init_conv(prng, b1, b0, 3),
            down2=nn.init_conv(prng, b2, b1, 3),
            down3=nn.init_conv(prng, b3, b2, 3),
            proj1=nn.init_conv(prng, c, b1, 1),
            proj2=nn.init_conv(prng, c, b2, 1),
            proj3=nn.init_conv(prng, c, b3, 1),
        ),
        query_gen=QueryGenParams(
            conv1=nn.init_conv(prng, c, c, 3),
            conv2=nn.init_conv(prng, c // 2, c, 3),
            conv3=nn.init_conv(prng, cfg.n_query, c // 2, 1),
            vision_proj=nn.init_linear(prng, cfg.n_vision, c),
            word_proj=nn.init_linear(prng, c, c),
            query_proj=nn.init_linear(prng, c, c),
        ),
        encoder=[nn.init_encoder_layer(prng, cfg.heads, c, cfg.ffn_dim)
                 for _ in range(cfg.encoder_layers)],
        decoder=[nn.init_decoder_layer(prng, cfg.heads, c, cfg.ffn_dim)
                 for _ in range(cfg.decoder_layers)],
        balance=QueryBalanceParams(
            reduce=nn.init_linear(prng, 2 * c, c),
            score=nn.init_linear(prng, c, 1),
        ),
        mask_head=MaskHeadParams(
            conv1=nn.init_conv(prng, c // 2, c, 3),
            conv2=nn.init_conv(prng, c // 4, c // 2, 3),
            conv3=nn.init_conv(prng, c // 8, c // 4, 3),
            out=nn.init_conv(prng, 1, c // 8, 1),
        ),
        learned_queries=nn.Tensor(
            prng.uniform(-np.sqrt(6.0 / (cfg.n_query + c)),
                         np.sqrt(6.0 / (cfg.n_query + c)),
                         (cfg.n_query, c)),
            requires_grad=True),
    )


def parameter_report(params: VLTParams) -> dict[str, int]:
    """Total parameter count plus the attention-subsystem share."""
    total = nn.parameter_count(params)
    attention = (nn.parameter_count(params.encoder)
                 + nn.parameter_count(params.decoder)
                 + nn.parameter_count(params.query_gen)
                 + nn.parameter_count(params.balance))
    return {"total": total, "attention_subsystem": attention}


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------


def _conv_block(p: ConvParams, x: Tensor, stride: int = 1, pad: int = 0,
                activate: bool = True) -> Tensor:
    c_out = p.kernel.shape[0]
    out = add(conv2d(x, p.kernel, stride=stride, pad=pad),
              reshape(p.bias, (c_out, 1, 1)))
    return relu(out) if activate else out


def vision_backbone(cfg: VLTConfig, params: BackboneParams, image: Tensor) -> Tensor:
    """Fuse three backbone stages into the raw vision feature map [C, H, W].

    The stem halves the image twice to the feature grid; two further
    stride-2 convs give half and quarter resolution stages.  Each stage is
    projected to C channels by a 1x1 conv, resized back to the feature
    grid, and summed.
    """
    if image.shape != (3, cfg.image_h, cfg.image_w):
        raise ValidationError(f"image shape {image.shape} does not match config "
                              f"(3, {cfg.image_h}, {cfg.image_w})")
    x = _conv_block(params.stem1, image, stride=2, pad=1)
    stage1 = _conv_block(params.stem2, x, stride=2, pad=1)
    stage2 = _conv_block(params.down2, stage1, stride=2, pad=1)
    stage3 = _conv_block(params.down3, stage2, stride=2, pad=1)
    hw = (cfg.feat_h, cfg.feat_w)
    fused = add(_conv_block(params.proj1, stage1, activate=False),
                add(resize_nearest(_conv_block(params.proj2, stage2, activate=False), hw),
                    resize_nearest(_conv_block(params.proj3, stage3, activate=False), hw)))
    return fused


def language_encode(cfg: VLTConfig, params: VLTParams,
                    tokens) -> tuple[Tensor, np.ndarray, Tensor]:
    """Embed and run the GRU; zero-pad word features to the fixed length.

    Returns (word features [N_l, C], pad mask, final hidden state [C]).
    """
    tokens = list(tokens)
    t = len(tokens)
    if t == 0:
        raise ValidationError("language_encode: empty expression")
    if t > cfg.max_words:
        raise ValidationError(f"language_encode: {t} tokens exceed limit {cfg.max_words}")
    for tok in tokens:
        if not 0 <= tok < cfg.vocab_size:
            raise ValidationError(f"language_encode: token id {tok} outside "
                                  f"vocabulary of size {cfg.vocab_size}")
    emb = gather_rows(params.embed, tokens)
    per_step, final_state = nn.gru(params.gru, emb)
    if t < cfg.max_words:
        pad = Tensor(np.zeros((cfg.max_words - t, cfg.channels)))
        words = concat([per_step, pad], axis=0)
    else:
        words = per_step
    pad_mask = np.zeros(cfg.max_words, dtype=bool)
    pad_mask[:t] = True
    return words, pad_mask, final_state


def flatten_vision(cfg: VLTConfig, vision_raw: Tensor) -> Tensor:
    """[C, H, W] feature map to a row-per-position sequence [N_v, C]."""
    hwc = transpose(vision_raw, (1, 2, 0))
    return reshape(hwc, (cfg.n_vision, cfg.channels))


def language_gate(vision_seq: Tensor, sentence_state: Tensor) -> Tensor:
    """Scale every position's feature vector by tanh of the sentence state.

    The bounded gate enriches vision features with sentence-level language
    information before positional embedding and encoding.
    """
    return mul(vision_seq, tanh(sentence_state))


def make_query_maps(cfg: VLTConfig, params: QueryGenParams, vision_raw: Tensor) -> Tensor:
    """Reduce the vision map to one spatial map per query, flattened to rows.

    Three convolutions (3x3 C->C with relu, 3x3 C->C/2 with relu, linear
    1x1 C/2->N_q) produce N_q maps; map n becomes row n of the result.
    """
    x = _conv_block(params.conv1, vision_raw, pad=1)
    x = _conv_block(params.conv2, x, pad=1)
    x = _conv_block(params.conv3, x, activate=False)
    return reshape(x, (cfg.n_query, cfg.n_vision))


def word_attention(params: QueryGenParams, query_maps: Tensor, words: Tensor,
                   pad_mask: np.ndarray) -> Tensor:
    """Per-query attention over words, guided by the per-query vision maps.

    Each query's flattened map and each word feature are projected with a
    relu activation; their dot product scores how informative the word is
    for that query, and a masked softmax across real words normalizes the
    scores into rows that sum to one with zero mass on padding.
    """
    if not pad_mask.any():
        raise ValidationError("word_attention: expression is fully padded")
    vis = relu(nn.linear(params.vision_proj, query_maps))   # [N_q, C]
    wrd = relu(nn.linear(params.word_proj, words))          # [N_l, C]
    logits = matmul(vis, swap_last2(wrd))                   # [N_q, N_l]
    return softmax_masked(logits, pad_mask)


def form_queries(params: QueryGenParams, word_attn: Tensor, words: Tensor) -> Tensor:
    """Queries as attention-weighted sums of projected word features."""
    projected = relu(nn.linear(params.query_proj, words))   # [N_l, C]
    return matmul(word_attn, projected)                     # [N_q, C]


def make_queries(cfg: VLTConfig, params: VLTParams, vision_raw: Tensor,
                 words: Tensor, pad_mask: np.ndarray,
                 ) -> tuple[Tensor, Tensor | None, Tensor | None]:
    """Produce decoder queries from the configured source.

    Returns (queries, query_maps, word_attn); the latter two are None
    unless the generated-query path ran.
    """
    source = cfg.query_source
    if source == "qgm":
        query_maps = make_query_maps(cfg, params.query_gen, vision_raw)
        attn = word_attention(params.query_gen, query_maps, words, pad_mask)
        return form_queries(params.query_gen, attn, words), query_maps, attn
    if source == "learned":
        return params.learned_queries, None, None
    if source == "words":
        if cfg.n_query != cfg.max_words:
            raise ValidationError(f"query_source 'words' needs n_query == max_words, "
                                  f"got {cfg.n_query} != {cfg.max_words}")
        return words, None, None
    raise ValidationError(f"unknown query_source {source!r}")


_pos_cache: dict[tuple[int, int, int], Tensor] = {}


def _position_constant(h: int, w: int, c: int) -> Tensor:
    key = (h, w, c)
    if key not in _pos_cache:
        _pos_cache[key] = Tensor(nn.sine_pos_embed_2d(h, w, c).reshape(h * w, c))
    return _pos_cache[key]


def transformer_encode(cfg: VLTConfig, params: VLTParams, vision_gated: Tensor,
                       include_positions: bool = True,
                       ) -> tuple[Tensor, list[np.ndarray]]:
    """Add the fixed sinusoidal positions and run the encoder stack.

    `include_positions` exists as a test hook to expose the permutation
    equivariance of the bare layers.
    """
    x = vision_gated
    if include_positions:
        x = add(x, _position_constant(cfg.feat_h, cfg.feat_w, cfg.channels))
    attns = []
    for layer in params.encoder:
        x, w = nn.encoder_layer(layer, x)
        attns.append(w)
    return x, attns


def transformer_decode(params: VLTParams, queries: Tensor, memory: Tensor,
                       ) -> tuple[Tensor, list[np.ndarray], list[np.ndarray]]:
    """Refine queries against the vision memory through the decoder stack."""
    x = queries
    self_attns, cross_attns = [], []
    for layer in params.decoder:
        x, sw, cw = nn.decoder_layer(layer, x, memory)
        self_attns.append(sw)
        cross_attns.append(cw)
    return x, self_attns, cross_attns


def query_confidence(params: QueryBalanceParams, queries: Tensor,
                     responses: Tensor) -> Tensor:
    """Score each query/response pair into a confidence in (0, 1).

    Concatenated pairs pass through two linear layers; the second uses a
    sigmoid activation to bound the output.
    """
    paired = concat([queries, responses], axis=1)           # [N_q, 2C]
    hidden = relu(nn.linear(params.reduce, paired))
    return sigmoid(nn.linear(params.score, hidden))         # [N_q, 1]


def apply_confidence(responses: Tensor, confidence: Tensor) -> Tensor:
    """Scale response row n by confidence n."""
    return mul(responses, confidence)


def decode_mask(cfg: VLTConfig, params: MaskHeadParams, balanced: Tensor,
                memory: Tensor) -> Tensor:
    """Fuse balanced responses with the memory and decode mask logits.

    The balanced responses are summed into one aggregate vector which
    broadcast-multiplies every memory position; the fused map then passes
    through three 3x3 convs with two 2x nearest upsamples in between and a
    final 1x1 conv, producing logits at full image resolution.
    """
    aggregate = tensor_sum(balanced, axis=0)                # [C]
    fused_seq = mul(memory, aggregate)                      # [N_v, C]
    fused = transpose(reshape(fused_seq, (cfg.feat_h, cfg.feat_w, cfg.channels)),
                      (2, 0, 1))                            # [C, H, W]
    x = _conv_block(params.conv1, fused, pad=1)
    x = upsample2x(x)
    x = _conv_block(params.conv2, x, pad=1)
    x = upsample2x(x)
    x = _conv_block(params.conv3, x, pad=1)
    x = _conv_block(params.out, x, activate=False)          # [1, H', W']
    return reshape(x, (cfg.image_h, cfg.image_w))


def forward(cfg: VLTConfig, params: VLTParams, image, tokens,
            qbm_enabled: bool = True) -> ForwardTrace:
    """Run the full pipeline on one sample and record every intermediate.

    `image` is a [3, image_h, image_w] array in [0, 1]; `tokens` the
    unpadded id sequence.  Setting `qbm_enabled` False replaces the
    confidences with exact ones, the balance-ablated path.
    """
    image = image if isinstance(image, Tensor) else Tensor(image)
    vision_raw = vision_backbone(cfg, params.backbone, image)
    words, pad_mask, sentence_state = language_encode(cfg, params, tokens)
    vision_seq = flatten_vision(cfg, vision_raw)
    gated = language_gate(vision_seq, sentence_state)
    queries, query_maps, word_attn = make_queries(cfg, params, vision_raw,
                                                  words, pad_mask)
    memory, enc_attn = transformer_encode(cfg, params, gated)
    responses, dec_self, dec_cross = transformer_decode(params, queries, memory)
    if qbm_enabled:
        confidence = query_confidence(params.balance, queries, responses)
        balanced = apply_confidence(responses, confidence)
    else:
        confidence = Tensor(np.ones((cfg.n_query, 1)))
        balanced = apply_confidence(responses, confidence)
    mask_logits = decode_mask(cfg, params.mask_head, balanced, memory)
    return ForwardTrace(
        vision_raw=vision_raw, words=words, pad_mask=pad_mask,
        sentence_state=sentence_state, vision_seq=vision_seq,
        query_maps=query_maps, word_attn=word_attn, queries=queries,
        memory=memory, responses=responses, confidence=confidence,
        mask_logits=mask_logits, encoder_attn=enc_attn,
        decoder_self_attn=dec_self, decoder_cross_attn=dec_cross,
    )


def mask_loss(mask_logits: Tensor, target_mask: np.ndarray) -> Tensor:
    """Mean binary cross entropy of the mask logits against a {0,1} target."""
    return bce_with_logits(mask_logits, np.asarray(target_mask, dtype=np.float64))


def predict_mask(mask_logits: Tensor) -> np.ndarray:
    """Binarize logits at probability 0.5, i.e. logit > 0."""
    return mask_logits.data > 0.0
