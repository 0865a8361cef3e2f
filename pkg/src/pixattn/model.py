"""Full autoregressive image models: decoder-only and encoder-decoder.

A model is a configuration plus a flat dict of named parameter arrays;
the dict is the single source of truth (checkpoints serialize it, the
trainer replaces entries between steps).  Every forward pass opens a
fresh gradient record, rebinds the stored arrays onto it, and runs the
pipeline: intensity embeddings of the right-shifted target sequence
(learned start vector at generation rank 0), coordinate and optional
class embeddings added before the first layer, a stack of block-local
self-attention layers (with cross-attention into the encoder output in
encoder-decoder mode), a final layer normalization, and the output head.
Self-attention masks open each position's own input slot: under the
right shift that slot carries the previous position's intensity, so a
prediction sees exactly the positions generated strictly before it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import BlockPlan, PlanLayout, Scheme, build_layout, plan_for_scheme
from .heads import (
    CategoricalHead,
    DmolHead,
    categorical_logits,
    categorical_nll,
    dmol_nll,
    dmol_params,
    init_categorical_head,
    init_dmol_head,
)
from .imagerep import (
    NUM_INTENSITIES,
    EmbeddingTables,
    Image,
    add_class_embedding,
    coordinate_encoding,
    embed_categorical_flat,
    embed_ordinal_flat,
    flatten_raster,
)
from .layers import (
    LayerNormParams,
    LayerParams,
    cross_attn_sublayer,
    ffn_sublayer,
    glorot_uniform,
    init_layer_params,
    init_layernorm_params,
    self_attn_sublayer,
    take_param,
)
from .rng import Rng
from .tensor import GradRecord, Tensor

__all__ = [
    "ModelConfig", "ImageTransformer", "PRESETS", "preset_config", "build",
    "from_params", "forward_train", "forward_outputs", "encode",
    "count_params",
]

MODES = ("decoder-only", "encoder-decoder")
DISTRIBUTIONS = ("cat", "dmol")
COORD_ENCODINGS = ("sinusoidal", "learned")


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to build a model deterministically.

    The decoder scheme must be local (1D or 2D); full attention is what
    the encoder uses internally and is never a decoder option.  With the
    dmol distribution the decoder works on whole pixels (one position
    per pixel, ordinal input embeddings); with cat it works on the three
    channel intensities separately.
    """

    layers: int
    d: int
    heads: int
    d_ff: int
    scheme: Scheme
    h: int
    w: int
    mode: str = "decoder-only"
    encoder_layers: int = 0
    dropout: float = 0.0
    distribution: str = "cat"
    mixtures: int = 10
    coord_encoding: str = "sinusoidal"
    n_classes: int | None = None
    h_s: int = 0
    w_s: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(
                f"distribution must be one of {DISTRIBUTIONS}, "
                f"got {self.distribution!r}")
        if self.coord_encoding not in COORD_ENCODINGS:
            raise ValueError(
                f"coord_encoding must be one of {COORD_ENCODINGS}, "
                f"got {self.coord_encoding!r}")
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.d < 1 or self.heads < 1 or self.d % self.heads != 0:
            raise ValueError(
                f"d={self.d} must be positive and divisible by "
                f"heads={self.heads}")
        if self.coord_encoding == "sinusoidal" and self.d % 4 != 0:
            raise ValueError(
                f"sinusoidal coordinates need d divisible by 4, got {self.d}")
        if self.coord_encoding == "learned" and self.d % 2 != 0:
            raise ValueError(
                f"learned coordinates need even d, got {self.d}")
        if self.d_ff < 1:
            raise ValueError(f"d_ff must be >= 1, got {self.d_ff}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.scheme.variant not in ("local1d", "local2d"):
            raise ValueError(
                f"decoder scheme must be local1d or local2d, "
                f"got {self.scheme.variant!r}")
        if self.h < 1 or self.w < 1:
            raise ValueError(f"image dims must be >= 1, got {self.h}x{self.w}")
        if self.distribution == "dmol" and self.mixtures < 1:
            raise ValueError(f"mixtures must be >= 1, got {self.mixtures}")
        if self.n_classes is not None and self.n_classes < 1:
            raise ValueError(f"n_classes must be >= 1, got {self.n_classes}")
        if self.mode == "encoder-decoder":
            if self.encoder_layers < 1:
                raise ValueError(
                    "encoder-decoder mode needs encoder_layers >= 1, "
                    f"got {self.encoder_layers}")
            if self.h_s < 1 or self.w_s < 1:
                raise ValueError(
                    f"source dims must be >= 1, got {self.h_s}x{self.w_s}")
        else:
            if self.encoder_layers != 0:
                raise ValueError(
                    "decoder-only mode must have encoder_layers == 0, "
                    f"got {self.encoder_layers}")
            if self.h_s != 0 or self.w_s != 0:
                raise ValueError(
                    "decoder-only mode must not set source dims, "
                    f"got {self.h_s}x{self.w_s}")

    @property
    def channels(self) -> int:
        """Decoder positions per pixel: 1 whole pixel under dmol, else 3."""
        return 1 if self.distribution == "dmol" else 3

    @property
    def seq_len(self) -> int:
        return self.h * self.w * self.channels

    @property
    def source_len(self) -> int:
        return self.h_s * self.w_s * 3


def _preset(layers, d, heads, d_ff, dropout, distribution) -> ModelConfig:
    return ModelConfig(
        layers=layers, d=d, heads=heads, d_ff=d_ff, dropout=dropout,
        distribution=distribution, h=32, w=32,
        scheme=Scheme("local1d", l_q=256, l_m=256))


PRESETS = {
    "cifar-cat": _preset(12, 512, 4, 2048, 0.3, "cat"),
    "cifar-dmol": _preset(14, 256, 8, 512, 0.2, "dmol"),
    "imagenet": _preset(12, 512, 8, 2048, 0.1, "cat"),
    "cifar-small": _preset(8, 512, 8, 1024, 0.1, "cat"),
}


def preset_config(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(PRESETS))
        raise ValueError(f"unknown preset {name!r}; known presets: {known}") \
            from None


@dataclass
class _Parts:
    """All parameters of one forward pass, bound to a single record."""

    tables: EmbeddingTables
    start: Tensor
    dec_coords: Tensor
    ordinal_w: Tensor | None = None
    ordinal_b: Tensor | None = None
    enc_coords: Tensor | None = None
    enc_layers: list[LayerParams] | None = None
    dec_layers: list[LayerParams] | None = None
    final_norm: LayerNormParams | None = None
    head: CategoricalHead | DmolHead | None = None


def _assemble(config: ModelConfig, record: GradRecord, rng: Rng | None,
              values) -> _Parts:
    """Register every parameter on the record, in one fixed traversal.

    With values=None fresh arrays are initialized from rng; otherwise
    stored arrays (model.params, a checkpoint) are rebound unchanged.
    """
    d = config.d

    def par(name, shape, make):
        t = take_param(record, values, name, make)
        if t.shape != tuple(shape):
            raise ValueError(
                f"stored parameter {name!r} has shape {t.shape}, "
                f"expected {tuple(shape)}")
        return t

    shared = ordinal_w = ordinal_b = None
    if config.distribution == "cat":
        shared = par("embed.shared", (NUM_INTENSITIES, d),
                     lambda: glorot_uniform(rng, NUM_INTENSITIES, d,
                                            (NUM_INTENSITIES, d)))
    else:
        ordinal_w = par("embed.ordinal_w", (3, d),
                        lambda: glorot_uniform(rng, 3, d, (3, d)))
        ordinal_b = par("embed.ordinal_b", (d,), lambda: np.zeros(d))
    channel = None
    if config.mode == "encoder-decoder":
        channel = tuple(
            par(f"embed.src{c}", (NUM_INTENSITIES, d),
                lambda: glorot_uniform(rng, NUM_INTENSITIES, d,
                                       (NUM_INTENSITIES, d)))
            for c in range(3))
    class_table = None
    if config.n_classes is not None:
        class_table = par("embed.class", (config.n_classes, d),
                          lambda: glorot_uniform(rng, config.n_classes, d,
                                                 (config.n_classes, d)))
    tables = EmbeddingTables(channel=channel, shared=shared,
                             class_table=class_table)

    dec_table = enc_table = None
    if config.coord_encoding == "learned":
        n = config.seq_len
        dec_table = par("coords.decoder", (n, d),
                        lambda: glorot_uniform(rng, n, d, (n, d)))
        if config.mode == "encoder-decoder":
            ns = config.source_len
            enc_table = par("coords.encoder", (ns, d),
                            lambda: glorot_uniform(rng, ns, d, (ns, d)))
    dec_coords = coordinate_encoding(config.coord_encoding, config.h,
                                     config.w, d, config.channels,
                                     table=dec_table)
    enc_coords = None
    if config.mode == "encoder-decoder":
        enc_coords = coordinate_encoding(config.coord_encoding, config.h_s,
                                         config.w_s, d, 3, table=enc_table)

    start = par("start", (d,), lambda: glorot_uniform(rng, 1, d, (d,)))

    enc_layers = [
        init_layer_params(record, f"enc{i}", d, config.heads, config.d_ff,
                          config.dropout, rng, cross=False, values=values)
        for i in range(config.encoder_layers)]
    cross = config.mode == "encoder-decoder"
    dec_layers = [
        init_layer_params(record, f"dec{i}", d, config.heads, config.d_ff,
                          config.dropout, rng, cross=cross, values=values)
        for i in range(config.layers)]
    final_norm = init_layernorm_params(record, "final_norm", d, values=values)

    if config.distribution == "cat":
        head = init_categorical_head(record, "head", d, rng, values=values)
    else:
        head = init_dmol_head(record, "head", d, config.mixtures, rng,
                              values=values)

    return _Parts(tables=tables, start=start, dec_coords=dec_coords,
                  ordinal_w=ordinal_w, ordinal_b=ordinal_b,
                  enc_coords=enc_coords, enc_layers=enc_layers,
                  dec_layers=dec_layers, final_norm=final_norm, head=head)


class ImageTransformer:
    """Configuration, parameter arrays, and the cached attention layout.

    Immutable during a forward/backward pass; the trainer swaps entries
    of params between steps.  encode_count counts encoder invocations
    (the generator must encode each source exactly once).
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.encode_count = 0
        self.plan = plan_for_scheme(config.scheme, config.h, config.w,
                                    config.channels)
        self.layout = build_layout(self.plan, self_inclusive=True)


def build(config: ModelConfig, rng: Rng) -> ImageTransformer:
    """Fresh model; identical rng keys give bit-identical parameters."""
    record = GradRecord()
    _assemble(config, record, rng, None)
    return ImageTransformer(config, dict(record.param_items()))


def from_params(config: ModelConfig,
                params: dict[str, np.ndarray]) -> ImageTransformer:
    """Model over stored arrays; validates names and shapes up front."""
    record = GradRecord()
    _assemble(config, record, None, params)
    if len(params) != len(record.param_names):
        extra = sorted(set(params) - set(record.param_names))
        raise ValueError(f"stored parameters not used by this config: {extra}")
    return ImageTransformer(config, dict(record.param_items()))


def count_params(model: ImageTransformer) -> int:
    """Total learned scalars."""
    return sum(arr.size for arr in model.params.values())


# ---------------------------------------------------------------------------
# Forward passes


def _shifted_input(model: ImageTransformer, parts: _Parts,
                   image: Image) -> Tensor:
    """[n, d] decoder input: each slot embeds the intensity (or pixel)
    generated immediately before it; generation rank 0 gets the start
    vector."""
    config = model.config
    order = model.plan.gen_order
    if config.distribution == "cat":
        seq = flatten_raster(image)
        ids = np.zeros(config.seq_len, dtype=np.int64)
        ids[order[1:]] = seq[order[:-1], 0]
        x = embed_categorical_flat(ids, seq[:, 3], parts.tables,
                                   "decoder-input")
    else:
        px = image.pixels.reshape(-1, 3).astype(np.int64)
        prev = np.zeros_like(px)
        prev[order[1:]] = px[order[:-1]]
        x = embed_ordinal_flat(prev, parts.ordinal_w, parts.ordinal_b)
    first = (model.plan.rank_of == 0)[:, None]
    return T.where(first, parts.start, x)


def _encode_on(model: ImageTransformer, parts: _Parts, source: Image,
               rng: Rng | None, training: bool) -> Tensor:
    """Full-attention encoder stack over the flattened source."""
    seq = flatten_raster(source)
    x = embed_categorical_flat(seq[:, 0], seq[:, 3], parts.tables, "source")
    x = T.add(x, parts.enc_coords)
    for layer in parts.enc_layers:
        x = self_attn_sublayer(x, x, layer, None, rng, training)
        x = ffn_sublayer(x, layer, rng, training)
    model.encode_count += 1
    return x


def _decode_on(model: ImageTransformer, parts: _Parts, image: Image,
               class_id: int | None, enc_out: Tensor | None,
               rng: Rng | None, training: bool) -> Tensor:
    """[n, d] decoder representations feeding the output head."""
    config = model.config
    x = T.add(_shifted_input(model, parts, image), parts.dec_coords)
    if parts.tables.class_table is not None:
        x = add_class_embedding(x, class_id, parts.tables.class_table)
    layout = model.layout
    nb, pad = layout.q_index.shape
    m_max = layout.m_index.shape[1]
    d = config.d
    for layer in parts.dec_layers:
        q = T.reshape(T.gather_rows(x, layout.q_index.reshape(-1)),
                      (nb, pad, d))
        m = T.reshape(T.gather_rows(x, layout.m_index.reshape(-1)),
                      (nb, m_max, d))
        a = self_attn_sublayer(q, m, layer, layout.mask, rng, training)
        x = T.gather_rows(T.reshape(a, (nb * pad, d)), layout.flat_back)
        if layer.has_cross:
            x = cross_attn_sublayer(x, enc_out, layer, rng, training)
        x = ffn_sublayer(x, layer, rng, training)
    return T.layernorm(x, parts.final_norm.gain, parts.final_norm.bias)


def _head_nll(config: ModelConfig, parts: _Parts, reprs: Tensor,
              image: Image):
    if config.distribution == "cat":
        return categorical_nll(reprs, flatten_raster(image)[:, 0], parts.head)
    return dmol_nll(reprs, image.pixels.reshape(-1, 3).astype(np.int64),
                    parts.head)


def _check_dims(image: Image, h: int, w: int, what: str) -> None:
    if (image.h, image.w) != (h, w):
        raise ValueError(
            f"{what} is {image.h}x{image.w}, config expects {h}x{w}")


def _check_batch(model: ImageTransformer, images, class_ids, sources):
    config = model.config
    images = list(images)
    if not images:
        raise ValueError("batch must contain at least one image")
    for img in images:
        _check_dims(img, config.h, config.w, "image")
    if config.mode == "encoder-decoder":
        if sources is None:
            raise ValueError("encoder-decoder mode needs source images")
        sources = list(sources)
        if len(sources) != len(images):
            raise ValueError(
                f"{len(images)} images but {len(sources)} sources")
        for src in sources:
            _check_dims(src, config.h_s, config.w_s, "source")
    elif sources is not None:
        raise ValueError("decoder-only mode takes no source images")
    if config.n_classes is not None:
        if class_ids is None:
            raise ValueError("class-conditional model needs class ids")
        class_ids = list(class_ids)
        if len(class_ids) != len(images):
            raise ValueError(
                f"{len(images)} images but {len(class_ids)} class ids")
    elif class_ids is not None:
        raise ValueError("unconditional model takes no class ids")
    return images, class_ids, sources


def forward_train(model: ImageTransformer, images, class_ids=None,
                  sources=None, *, rng: Rng | None = None,
                  training: bool = True, param_tensors=None):
    """Teacher-forced pass over a batch.

    Returns (total negative log-likelihood in nats as a scalar Tensor
    whose record supports backward(), per-image head outputs).  Head
    outputs are intensity logits [n, 256] under cat and the mixture
    parameters under dmol.  param_tensors, when given, maps parameter
    names to already-bound Tensors and replaces model.params for this
    pass — the seam gradient checkers run the loss through.
    """
    config = model.config
    images, class_ids, sources = _check_batch(model, images, class_ids,
                                              sources)
    if training and config.dropout > 0.0 and rng is None:
        raise ValueError("training with dropout needs an rng")
    record = GradRecord()
    parts = _assemble(config, record, None,
                      model.params if param_tensors is None else param_tensors)
    total = None
    outputs = []
    for i, image in enumerate(images):
        enc_out = None
        if config.mode == "encoder-decoder":
            enc_out = _encode_on(model, parts, sources[i], rng, training)
        class_id = None if class_ids is None else class_ids[i]
        reprs = _decode_on(model, parts, image, class_id, enc_out, rng,
                           training)
        nll, out = _head_nll(config, parts, reprs, image)
        total = nll if total is None else T.add(total, nll)
        outputs.append(out)
    return total, outputs


def forward_outputs(model: ImageTransformer, image: Image,
                    class_id: int | None = None, source: Image | None = None,
                    enc_out: np.ndarray | None = None):
    """Head outputs for one image, dropout off.

    In encoder-decoder mode pass either the source image or a
    precomputed encoder output array (so sequential generation encodes
    once and reuses it).
    """
    config = model.config
    _check_dims(image, config.h, config.w, "image")
    if (class_id is not None) != (config.n_classes is not None):
        raise ValueError("class id must be given exactly when the model "
                         "is class-conditional")
    record = GradRecord()
    parts = _assemble(config, record, None, model.params)
    enc_tensor = None
    if config.mode == "encoder-decoder":
        if enc_out is not None:
            arr = np.asarray(enc_out, dtype=T.default_dtype())
            if arr.shape != (config.source_len, config.d):
                raise ValueError(
                    f"encoder output must be "
                    f"({config.source_len}, {config.d}), got {arr.shape}")
            enc_tensor = T.constant(arr)
        elif source is not None:
            _check_dims(source, config.h_s, config.w_s, "source")
            enc_tensor = _encode_on(model, parts, source, None, False)
        else:
            raise ValueError(
                "encoder-decoder mode needs a source image or enc_out")
    elif source is not None or enc_out is not None:
        raise ValueError("decoder-only mode takes no source")
    reprs = _decode_on(model, parts, image, class_id, enc_tensor, None, False)
    if config.distribution == "cat":
        return categorical_logits(reprs, parts.head)
    return dmol_params(reprs, parts.head)


def encode(model: ImageTransformer, source: Image) -> Tensor:
    """Encoder output [h_s*w_s*3, d] for one source image, dropout off."""
    if model.config.mode != "encoder-decoder":
        raise ValueError("encode needs an encoder-decoder model")
    _check_dims(source, model.config.h_s, model.config.w_s, "source")
    record = GradRecord()
    parts = _assemble(model.config, record, None, model.params)
    return _encode_on(model, parts, source, None, False)
