"""
Representation network (masked transformer encoder with layer drop) and the
speaker-conditioned predictor that turns representations into class logits.

Shapes: frames ``(B, T, input_dim)``; activations ``(B, T, model_dim)``;
logits ``(B, T, num_classes)``. ``valid`` marks real (unpadded) frames.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as tn
from .blob import read_blob, write_blob
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

NEG_INF = -1e9


@dataclass
class ModelConfig:
    input_dim: int = 40
    num_encoder_layers: int = 6
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    predictor_layers: int = 3
    layer_drop_p: float = 0.05
    contrastive_layer: Optional[int] = None
    mask_prob: float = 0.065
    mask_span: int = 5
    num_classes: int = 100
    num_speakers: int = 24
    speaker_embed_dim: int = 16
    proj_dim: int = 32
    logit_temperature: float = 0.1
    speaker_conditioning: bool = True
    # "attention": positions enter only the query/key inputs of every attention
    # layer; "residual": added once to the layer-0 stream
    position_mode: str = "attention"

    def __post_init__(self):
        if self.contrastive_layer is None:
            self.contrastive_layer = int(round(0.58 * self.num_encoder_layers))

    def validate(self) -> "ModelConfig":
        L = self.num_encoder_layers
        if L < 1:
            raise ConfigError("must be >= 1", path="num_encoder_layers")
        if not 1 <= self.contrastive_layer <= L:
            raise ConfigError(f"must lie in [1, {L}]", path="contrastive_layer")
        if self.model_dim % self.num_heads:
            raise ConfigError("model_dim must be divisible by num_heads", path="num_heads")
        if not 0.0 <= self.layer_drop_p <= 1.0:
            raise ConfigError("must lie in [0, 1]", path="layer_drop_p")
        if self.num_classes < 2:
            raise ConfigError("must be >= 2", path="num_classes")
        if self.logit_temperature <= 0:
            raise ConfigError("must be > 0", path="logit_temperature")
        if self.position_mode not in ("attention", "residual"):
            raise ConfigError("must be 'attention' or 'residual'", path="position_mode")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown field(s) {unknown}", path="model")
        return cls(**d).validate()


@dataclass
class MaskSpec:
    masked: np.ndarray   # bool (T,)
    spans: list          # (start, length) pairs

    @property
    def T(self) -> int:
        return len(self.masked)


@dataclass
class LayerOutputs:
    encoder: list                  # L+1 tensors, index 0 is the post-masking input
    dropped: list                  # per encoder layer 1..L
    predictor: list = field(default_factory=list)
    tap_layer: Optional[int] = None

    def tap(self) -> Tensor:
        return self.encoder[self.tap_layer]


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

def sample_mask(T: int, mask_prob: float, mask_span: int, rng: np.random.Generator) -> MaskSpec:
    """Span masking: each frame starts a span of ``mask_span`` frames w.p. ``mask_prob``.

    At least one frame is masked (a single span is forced when none is drawn)
    and at least one is left visible (trailing spans are dropped until so).
    """
    if T < 2 or mask_span < 1 or T <= mask_span:
        raise ContractError(f"cannot mask T={T} frames with span {mask_span}")
    starts = np.flatnonzero(rng.random(T) < mask_prob)
    if len(starts) == 0:
        starts = np.array([int(rng.integers(0, T - mask_span + 1))])
    spans = [(int(s), int(min(mask_span, T - s))) for s in starts]

    def union(sp):
        m = np.zeros(T, dtype=bool)
        for s, n in sp:
            m[s:s + n] = True
        return m

    masked = union(spans)
    while masked.all() and len(spans) > 1:
        spans.pop()
        masked = union(spans)
    if masked.all():
        spans = [(0, T - 1)]
        masked = union(spans)
    return MaskSpec(masked, spans)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def sinusoidal_positions(T: int, dim: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    out = np.zeros((T, dim))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=None) -> dict:
    dtype = dtype or tn.get_default_dtype()
    D, F, E, P = config.model_dim, config.ffn_dim, config.speaker_embed_dim, config.proj_dim
    p = {}

    def w(name, fan_in, shape, scale=1.0):
        p[name] = rng.normal(0.0, scale / np.sqrt(fan_in), size=shape)

    def const(name, value, shape):
        p[name] = np.full(shape, value, dtype=np.float64)

    const("in_ln.g", 1.0, config.input_dim)
    const("in_ln.b", 0.0, config.input_dim)
    w("in_proj.w", config.input_dim, (config.input_dim, D))
    const("in_proj.b", 0.0, D)
    p["mask_emb"] = rng.normal(0.0, 1.0, size=D)
    depth_scale = 1.0 / np.sqrt(2 * (config.num_encoder_layers + config.predictor_layers))

    def block(prefix):
        for name in ("q", "k", "v"):
            w(f"{prefix}.{name}.w", D, (D, D))
            const(f"{prefix}.{name}.b", 0.0, D)
        w(f"{prefix}.o.w", D, (D, D), depth_scale)
        const(f"{prefix}.o.b", 0.0, D)
        w(f"{prefix}.ff1.w", D, (D, F))
        const(f"{prefix}.ff1.b", 0.0, F)
        w(f"{prefix}.ff2.w", F, (F, D), depth_scale)
        const(f"{prefix}.ff2.b", 0.0, D)

    def norm(prefix):
        if config.speaker_conditioning:
            w(f"{prefix}.gw", E, (E, D), 0.1)
            const(f"{prefix}.gb", 1.0, D)
            w(f"{prefix}.bw", E, (E, D), 0.1)
            const(f"{prefix}.bb", 0.0, D)
        else:
            const(f"{prefix}.g", 1.0, D)
            const(f"{prefix}.b", 0.0, D)

    for l in range(1, config.num_encoder_layers + 1):
        const(f"enc{l}.ln1.g", 1.0, D)
        const(f"enc{l}.ln1.b", 0.0, D)
        const(f"enc{l}.ln2.g", 1.0, D)
        const(f"enc{l}.ln2.b", 0.0, D)
        block(f"enc{l}")
    p["spk_table"] = rng.normal(0.0, 1.0, size=(config.num_speakers, E))
    for j in range(1, config.predictor_layers + 1):
        norm(f"pred{j}.ln1")
        norm(f"pred{j}.ln2")
        block(f"pred{j}")
    norm("pred_out.ln")
    w("final_proj.w", D, (D, P))
    const("final_proj.b", 0.0, P)
    p["class_emb"] = rng.normal(0.0, 1.0, size=(config.num_classes, P))
    return {k: tn.parameter(np.asarray(v, dtype=dtype)) for k, v in p.items()}


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def _linear(x: Tensor, p: dict, name: str) -> Tensor:
    return tn.linear(x, p[f"{name}.w"], p[f"{name}.b"])


def _attention(x: Tensor, p: dict, prefix: str, heads: int, key_bias: np.ndarray,
               pos: Optional[Tensor] = None) -> Tensor:
    B, T, D = x.shape
    dh = D // heads

    def split(t):
        return t.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)

    qk = x if pos is None else x + pos
    q = split(_linear(qk, p, f"{prefix}.q"))
    k = split(_linear(qk, p, f"{prefix}.k"))
    v = split(_linear(x, p, f"{prefix}.v"))
    ctx = tn.attention(q, k, v, key_bias).transpose(0, 2, 1, 3).reshape(B, T, D)
    return _linear(ctx, p, f"{prefix}.o")


def _ffn(x: Tensor, p: dict, prefix: str) -> Tensor:
    return _linear(tn.gelu(_linear(x, p, f"{prefix}.ff1")), p, f"{prefix}.ff2")


def _key_bias(valid: np.ndarray, dtype) -> np.ndarray:
    return np.where(valid, 0.0, NEG_INF).astype(dtype)[:, None, None, :]


def tap_layer_for(dropped: Sequence[bool], contrastive_layer: int) -> int:
    """Layer whose output feeds the contrastive loss.

    The tap is defined by depth from the top: the layer with
    ``L - contrastive_layer`` executed layers above it. When layers above the
    nominal tap are dropped, the tap shifts down.
    """
    L = len(dropped)
    above = L - contrastive_layer
    executed = [l for l in range(1, L + 1) if not dropped[l - 1]]
    if above == 0:
        return L
    if len(executed) <= above:
        return 0
    return executed[-above - 1]


def encode_batch(frames: np.ndarray, masked: np.ndarray, valid: np.ndarray, params: dict,
                 config: ModelConfig, rng: Optional[np.random.Generator] = None,
                 layerdrop_on: bool = False, force_drop: Sequence[int] = ()) -> LayerOutputs:
    """Encode a padded batch; masked frames are replaced by the mask embedding."""
    B, T, Din = frames.shape
    if Din != config.input_dim:
        raise DimensionError(f"frame dim {Din} does not match input_dim {config.input_dim}")
    dtype = params["in_proj.w"].dtype
    x = tn.tensor(frames.astype(dtype, copy=False))
    z = _linear(tn.layer_norm(x, params["in_ln.g"], params["in_ln.b"]), params, "in_proj")
    m = tn.tensor(masked.astype(dtype)[..., None])
    h = z * (1.0 - m) + params["mask_emb"] * m
    pos = tn.tensor(sinusoidal_positions(T, config.model_dim).astype(dtype))
    if config.position_mode == "residual":
        h, pos = h + pos, None
    bias = _key_bias(valid, dtype)
    outs, dropped = [h], []
    L = config.num_encoder_layers
    draws = rng.random(L) if (layerdrop_on and rng is not None) else np.ones(L)
    for l in range(1, L + 1):
        drop = l in force_drop or (layerdrop_on and draws[l - 1] < config.layer_drop_p)
        dropped.append(bool(drop))
        if not drop:
            pre = f"enc{l}"
            h = h + _attention(tn.layer_norm(h, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"]),
                               params, pre, config.num_heads, bias, pos)
            h = h + _ffn(tn.layer_norm(h, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"]),
                         params, pre)
        outs.append(h)
    return LayerOutputs(outs, dropped, tap_layer=tap_layer_for(dropped, config.contrastive_layer))


def encode(frames: np.ndarray, mask: Optional[MaskSpec], params: dict, config: ModelConfig,
           rng: Optional[np.random.Generator] = None, layerdrop_on: bool = False) -> LayerOutputs:
    """Single-utterance convenience wrapper around :func:`encode_batch`."""
    frames = np.asarray(frames)
    T = frames.shape[0]
    masked = np.zeros(T, dtype=bool) if mask is None else mask.masked
    if len(masked) != T:
        raise DimensionError(f"mask length {len(masked)} does not match {T} frames")
    return encode_batch(frames[None], masked[None], np.ones((1, T), dtype=bool), params,
                        config, rng, layerdrop_on)


def _speaker_vectors(speaker_ids, params: dict, config: ModelConfig, neutral: bool) -> Tensor:
    table = params["spk_table"]
    if neutral:
        B = len(speaker_ids)
        return tn.tensor(np.repeat(table.data.mean(0, keepdims=True), B, axis=0))
    ids = np.asarray(speaker_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"unknown speaker id in {ids.tolist()}")
    return tn.take_rows(table, ids)


def _norm(h: Tensor, p: dict, prefix: str, spk: Optional[Tensor], conditioned: bool) -> Tensor:
    if not conditioned:
        return tn.layer_norm(h, p[f"{prefix}.g"], p[f"{prefix}.b"])
    B = h.shape[0]
    e = spk.reshape(B, 1, spk.shape[-1])
    scale = e @ p[f"{prefix}.gw"] + p[f"{prefix}.gb"]
    shift = e @ p[f"{prefix}.bw"] + p[f"{prefix}.bb"]
    return tn.layer_norm(h) * scale + shift


def predict_batch(rep: Tensor, speaker_ids, params: dict, config: ModelConfig,
                  valid: Optional[np.ndarray] = None, neutral: bool = False):
    """Predictor stack; returns ``(logits, predictor_layer_outputs)``.

    logit(t, c) = cos(proj(t), class_emb(c)) / logit_temperature.
    """
    B, T, _ = rep.shape
    cond = config.speaker_conditioning
    spk = _speaker_vectors(speaker_ids, params, config, neutral) if cond else None
    valid = np.ones((B, T), dtype=bool) if valid is None else valid
    bias = _key_bias(valid, rep.dtype)
    pos = None
    if config.position_mode == "attention":
        pos = tn.tensor(sinusoidal_positions(T, config.model_dim).astype(rep.dtype))
    h, outs = rep, []
    for j in range(1, config.predictor_layers + 1):
        pre = f"pred{j}"
        h = h + _attention(_norm(h, params, f"{pre}.ln1", spk, cond), params, pre,
                           config.num_heads, bias, pos)
        h = h + _ffn(_norm(h, params, f"{pre}.ln2", spk, cond), params, pre)
        outs.append(h)
    y = _linear(_norm(h, params, "pred_out.ln", spk, cond), params, "final_proj")
    logits = tn.l2_normalize(y) @ tn.l2_normalize(params["class_emb"]).transpose(1, 0)
    return logits * (1.0 / config.logit_temperature), outs


def predict(rep: Tensor, speaker_id: int, params: dict, config: ModelConfig) -> Tensor:
    """Logits ``(T, K)`` for one utterance representation ``(T, model_dim)``."""
    if rep.ndim == 2:
        rep = rep.reshape(1, *rep.shape)
    logits, _ = predict_batch(rep, [speaker_id], params, config)
    return logits.reshape(logits.shape[1], logits.shape[2])


# ---------------------------------------------------------------------------
# model container, feature extraction, checkpoints
# ---------------------------------------------------------------------------

class Model:
    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator, dtype=None) -> "Model":
        config.validate()
        return cls(config, init_params(config, rng, dtype))

    def parameters(self) -> list:
        return list(self.params.values())

    @property
    def num_layers(self) -> int:
        """Probed layers: encoder 0..L followed by the predictor layers."""
        return self.config.num_encoder_layers + 1 + self.config.predictor_layers


def pad_batch(seqs: Sequence[np.ndarray], fill=0.0):
    """Stack variable-length arrays on a new leading axis; returns (batch, valid)."""
    T = max(len(s) for s in seqs)
    out = np.full((len(seqs), T) + seqs[0].shape[1:], fill, dtype=seqs[0].dtype)
    valid = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
        valid[i, :len(s)] = True
    return out, valid


def extract_layers(model: Model, frames_list: Sequence[np.ndarray], batch_size: int = 32,
                   include_predictor: bool = True) -> list:
    """Per-utterance list of layer activations (numpy), no masking, no layer drop.

    Predictor layers are computed with the neutral (mean) speaker embedding.
    """
    cfg = model.config
    order = np.argsort([len(f) for f in frames_list], kind="stable")
    result = [None] * len(frames_list)
    with tn.no_grad():
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            batch, valid = pad_batch([frames_list[i] for i in idx])
            outs = encode_batch(batch, np.zeros(valid.shape, dtype=bool), valid, model.params, cfg)
            layers = [o.data for o in outs.encoder]
            if include_predictor:
                _, pouts = predict_batch(outs.encoder[-1], [0] * len(idx), model.params, cfg,
                                         valid, neutral=True)
                layers += [o.data for o in pouts]
            for b, i in enumerate(idx):
                n = len(frames_list[i])
                result[i] = [np.array(a[b, :n]) for a in layers]
    return result


def save_checkpoint(path: str, model: Model, header: Optional[dict] = None,
                    extra_arrays: Optional[dict] = None) -> None:
    arrays = {f"param/{k}": v.data for k, v in model.params.items()}
    arrays.update(extra_arrays or {})
    head = dict(header or {}, kind="checkpoint", model_config=dataclasses.asdict(model.config))
    write_blob(path, head, arrays)


def load_checkpoint(path: str):
    """Return ``(model, header, extra_arrays)``."""
    header, arrays = read_blob(path)
    if header.get("kind") != "checkpoint":
        raise ValueError(f"{path} is not a checkpoint")
    config = ModelConfig.from_dict(header["model_config"])
    params = {k[len("param/"):]: tn.parameter(v) for k, v in arrays.items() if k.startswith("param/")}
    extra = {k: v for k, v in arrays.items() if not k.startswith("param/")}
    return Model(config, params), header, extra
