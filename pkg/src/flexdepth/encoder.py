"""Layer-maskable Conformer-lite encoder.

A subsampling frontend feeds B blocks of four residual sublayers each, in
the order FFN1, Conv, MHSA, FFN2 (convolution before self-attention). Each
sublayer's residual branch is gateable by a scalar in [0, 1]; a zero gate
is an exact skip, so a binary-gated forward equals the architecturally
smaller network.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ShapeError, Tape, Tensor

ATTN_MASK_VALUE = -1e9


class LayerKind(enum.IntEnum):
    FFN1 = 0
    CONV = 1
    MHSA = 2
    FFN2 = 3


KIND_NAMES = ("ffn1", "conv", "mhsa", "ffn2")
# half-step residual scaling for the macaron feed-forward sublayers
RESIDUAL_COEFF = {LayerKind.FFN1: 0.5, LayerKind.CONV: 1.0,
                  LayerKind.MHSA: 1.0, LayerKind.FFN2: 0.5}


@dataclass(frozen=True)
class LayerId:
    block: int
    kind: LayerKind

    @property
    def flat(self) -> int:
        return 4 * self.block + int(self.kind)

    @property
    def name(self) -> str:
        return f"block{self.block}.{KIND_NAMES[self.kind]}"

    @classmethod
    def from_flat(cls, flat: int) -> "LayerId":
        return cls(flat // 4, LayerKind(flat % 4))

    @classmethod
    def parse(cls, name: str) -> "LayerId":
        block_part, kind_part = name.split(".")
        return cls(int(block_part.removeprefix("block")),
                   LayerKind(KIND_NAMES.index(kind_part)))


def all_layer_ids(blocks: int) -> list[LayerId]:
    return [LayerId.from_flat(j) for j in range(4 * blocks)]


@dataclass(frozen=True)
class EncoderConfig:
    blocks: int = 8
    dim: int = 64
    ff_dim: int = 256
    heads: int = 4
    conv_kernel: int = 7
    subsample: int = 2
    input_dim: int = 20
    vocab_size: int = 13

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError(f"blocks must be >= 1, got {self.blocks}")
        if self.dim % self.heads != 0:
            raise ValueError(
                f"dim {self.dim} must be divisible by heads {self.heads}")
        if self.conv_kernel % 2 != 1:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.subsample not in (1, 2, 4):
            raise ValueError(f"subsample must be 1, 2 or 4, got {self.subsample}")
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")

    @property
    def num_layers(self) -> int:
        return 4 * self.blocks

    @property
    def frontend_strides(self) -> tuple[int, int]:
        return {1: (1, 1), 2: (2, 1), 4: (2, 2)}[self.subsample]


def param_shapes(config: EncoderConfig,
                 include_aux: bool = False) -> dict[str, tuple[int, ...]]:
    d, ff, k = config.dim, config.ff_dim, config.conv_kernel
    shapes: dict[str, tuple[int, ...]] = {
        "frontend.conv1.w": (3, config.input_dim, d),
        "frontend.conv1.b": (d,),
        "frontend.conv2.w": (3, d, d),
        "frontend.conv2.b": (d,),
    }
    for b in range(config.blocks):
        for ffn in ("ffn1", "ffn2"):
            shapes[f"block{b}.{ffn}.ln_g"] = (d,)
            shapes[f"block{b}.{ffn}.ln_b"] = (d,)
            shapes[f"block{b}.{ffn}.w1"] = (d, ff)
            shapes[f"block{b}.{ffn}.b1"] = (ff,)
            shapes[f"block{b}.{ffn}.w2"] = (ff, d)
            shapes[f"block{b}.{ffn}.b2"] = (d,)
        shapes[f"block{b}.conv.ln_g"] = (d,)
        shapes[f"block{b}.conv.ln_b"] = (d,)
        shapes[f"block{b}.conv.pw1_w"] = (d, 2 * d)
        shapes[f"block{b}.conv.pw1_b"] = (2 * d,)
        shapes[f"block{b}.conv.dw_w"] = (k, d)
        shapes[f"block{b}.conv.dw_b"] = (d,)
        shapes[f"block{b}.conv.ln2_g"] = (d,)
        shapes[f"block{b}.conv.ln2_b"] = (d,)
        shapes[f"block{b}.conv.pw2_w"] = (d, d)
        shapes[f"block{b}.conv.pw2_b"] = (d,)
        shapes[f"block{b}.mhsa.ln_g"] = (d,)
        shapes[f"block{b}.mhsa.ln_b"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[f"block{b}.mhsa.w{proj}"] = (d, d)
            shapes[f"block{b}.mhsa.b{proj}"] = (d,)
    shapes["head.ln_g"] = (d,)
    shapes["head.ln_b"] = (d,)
    shapes["head.w"] = (d, config.vocab_size)
    shapes["head.b"] = (config.vocab_size,)
    if include_aux:
        shapes["auxhead.ln_g"] = (d,)
        shapes["auxhead.ln_b"] = (d,)
        shapes["auxhead.w"] = (d, config.vocab_size)
        shapes["auxhead.b"] = (config.vocab_size,)
    return shapes


def init_params(config: EncoderConfig, rng: np.random.Generator,
                include_aux: bool = False) -> dict[str, np.ndarray]:
    params = {}
    for name, shape in param_shapes(config, include_aux).items():
        leafname = name.rsplit(".", 1)[-1]
        if leafname.startswith(("ln_g", "ln2_g")):
            params[name] = np.ones(shape)
        elif leafname.startswith("b") or leafname.startswith(("ln_b", "ln2_b")) \
                or leafname.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
            params[name] = rng.standard_normal(shape) / np.sqrt(fan_in)
    return params


def param_owner(name: str) -> LayerId | None:
    """LayerId owning a parameter, or None for permanent parameters."""
    prefix = name.split(".", 1)[0]
    if prefix in ("frontend", "head", "auxhead"):
        return None
    block_str, kind_str = name.split(".")[:2]
    return LayerId(int(block_str.removeprefix("block")),
                   LayerKind(KIND_NAMES.index(kind_str)))


def param_count(config: EncoderConfig, mask: np.ndarray) -> int:
    """Scalar count of frontend + head + all sublayers kept by the mask."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (config.num_layers,):
        raise ShapeError(
            f"param_count: mask length {mask.shape} != ({config.num_layers},)")
    if not np.all(np.isin(mask, (0.0, 1.0))):
        raise ValueError("param_count: mask must be binary")
    total = 0
    for name, shape in param_shapes(config).items():
        owner = param_owner(name)
        if owner is None or mask[owner.flat] == 1.0:
            total += int(np.prod(shape))
    return total


def subsampled_lengths(lengths: np.ndarray, config: EncoderConfig) -> np.ndarray:
    out = np.asarray(lengths, dtype=np.int64)
    for stride in config.frontend_strides:
        out = -(-out // stride)
    return out


def bind_params(tape: Tape, params: Mapping[str, np.ndarray],
                trainable: bool = True) -> dict[str, Tensor]:
    return {name: tape.leaf(v, requires_grad=trainable, name=name)
            for name, v in params.items()}


@dataclass
class EncoderOutput:
    log_probs: Tensor          # [B, T', V], log-softmax normalized rows
    out_lengths: np.ndarray    # valid frames per utterance after subsampling
    tap: Tensor | None = None  # hidden state after the tap block, if requested


GateEntry = "float | Tensor"


class MaskableEncoder:
    """Forwardable parameter store; every sublayer gateable by a scalar."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        self.forward_count = 0  # instrumentation for compute-bound checks

    def init_params(self, rng: np.random.Generator,
                    include_aux: bool = False) -> dict[str, np.ndarray]:
        return init_params(self.config, rng, include_aux)

    # -- gate handling -------------------------------------------------------

    def _gate_entries(self, gate) -> list:
        L = self.config.num_layers
        if gate is None:
            return [1.0] * L
        if isinstance(gate, Tensor):
            if gate.values.shape != (L,):
                raise ShapeError(
                    f"gate length {gate.values.shape} != ({L},)")
            self._check_gate_range(gate.values)
            return [ad.slice_tensor(gate, j) for j in range(L)]
        if isinstance(gate, (list, tuple)):
            if len(gate) != L:
                raise ShapeError(f"gate length {len(gate)} != ({L},)")
            entries = [g if isinstance(g, Tensor) else float(g) for g in gate]
            for g in entries:
                if not isinstance(g, Tensor):
                    self._check_gate_range(np.asarray(g))
            return entries
        arr = np.asarray(gate, dtype=np.float64)
        if arr.shape != (L,):
            raise ShapeError(f"gate length {arr.shape} != ({L},)")
        self._check_gate_range(arr)
        return [float(g) for g in arr]

    @staticmethod
    def _check_gate_range(values: np.ndarray) -> None:
        if np.any(values < 0.0) or np.any(values > 1.0):
            raise ValueError("gate entries must lie in [0, 1]")

    # -- sublayers -------------------------------------------------------------

    def _ffn(self, p, prefix, x):
        h = ad.layernorm(x, p[f"{prefix}.ln_g"], p[f"{prefix}.ln_b"])
        h = ad.swish(ad.linear(h, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        return ad.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _conv(self, p, prefix, x, time_mask):
        h = ad.layernorm(x, p[f"{prefix}.ln_g"], p[f"{prefix}.ln_b"])
        h = ad.glu(ad.linear(h, p[f"{prefix}.pw1_w"], p[f"{prefix}.pw1_b"]))
        # zero padded frames so the depthwise window never reads garbage
        h = ad.mul(h, time_mask)
        h = ad.depthwise_conv1d(h, p[f"{prefix}.dw_w"], p[f"{prefix}.dw_b"])
        h = ad.layernorm(h, p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"])
        h = ad.swish(h)
        return ad.linear(h, p[f"{prefix}.pw2_w"], p[f"{prefix}.pw2_b"])

    def _mhsa(self, p, prefix, x, attn_bias):
        cfg = self.config
        B, T = x.values.shape[0], x.values.shape[1]
        H = cfg.heads
        dh = cfg.dim // H
        h = ad.layernorm(x, p[f"{prefix}.ln_g"], p[f"{prefix}.ln_b"])

        def heads(t):
            return ad.transpose(ad.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

        q = heads(ad.linear(h, p[f"{prefix}.wq"], p[f"{prefix}.bq"]))
        k = heads(ad.linear(h, p[f"{prefix}.wk"], p[f"{prefix}.bk"]))
        v = heads(ad.linear(h, p[f"{prefix}.wv"], p[f"{prefix}.bv"]))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                          1.0 / np.sqrt(dh))
        attn = ad.softmax(ad.add(scores, attn_bias), axis=-1)
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)),
                         (B, T, cfg.dim))
        return ad.linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])

    def _frontend(self, p, feats: Tensor, lengths: np.ndarray):
        s1, s2 = self.config.frontend_strides
        lens = np.asarray(lengths, dtype=np.int64)
        x = ad.relu(ad.conv1d(feats, p["frontend.conv1.w"],
                              p["frontend.conv1.b"], s1))
        lens = -(-lens // s1)
        x = ad.mul(x, _time_mask(x.values.shape[1], lens, x.tape))
        x = ad.relu(ad.conv1d(x, p["frontend.conv2.w"],
                              p["frontend.conv2.b"], s2))
        lens = -(-lens // s2)
        mask = _time_mask(x.values.shape[1], lens, x.tape)
        return ad.mul(x, mask), lens, mask

    # -- full forward -----------------------------------------------------------

    def forward(self, tape: Tape, params: Mapping[str, Tensor],
                feats: np.ndarray, lengths: Sequence[int],
                gate=None,
                layer_dropout: Mapping[int, float] | None = None,
                rng: np.random.Generator | None = None,
                tap_block: int | None = None,
                check_finite: bool = True) -> EncoderOutput:
        """Run the encoder under a gate vector.

        feats: [B, T, F] zero-padded features with per-utterance lengths.
        gate: None (all layers on), a length-L array/Tensor, or a list of
        per-layer scalars; constant zero entries skip the sublayer exactly.
        layer_dropout: {flat layer index: survival probability}; a dropped
        layer contributes identity for this call (train-time only).
        """
        self.forward_count += 1
        cfg = self.config
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 3 or feats.shape[2] != cfg.input_dim:
            raise ShapeError(
                f"forward: expected features [B, T, {cfg.input_dim}], "
                f"got {feats.shape}")
        entries = self._gate_entries(gate)
        if layer_dropout:
            if rng is None:
                raise ValueError("layer_dropout requires an rng")
            for flat in sorted(layer_dropout):
                if rng.random() >= layer_dropout[flat]:
                    entries[flat] = 0.0

        x, out_lens, time_mask = self._frontend(
            params, tape.constant(feats), lengths)
        t_out = x.values.shape[1]
        bias = np.where(np.arange(t_out)[None, :] < out_lens[:, None],
                        0.0, ATTN_MASK_VALUE)
        attn_bias = tape.constant(bias[:, None, None, :])

        tap = None
        for b in range(cfg.blocks):
            for kind in LayerKind:
                g = entries[4 * b + int(kind)]
                if isinstance(g, float) and g == 0.0:
                    continue
                prefix = f"block{b}.{KIND_NAMES[kind]}"
                if kind in (LayerKind.FFN1, LayerKind.FFN2):
                    sub = self._ffn(params, prefix, x)
                elif kind is LayerKind.CONV:
                    sub = self._conv(params, prefix, x, time_mask)
                else:
                    sub = self._mhsa(params, prefix, x, attn_bias)
                if check_finite and not np.all(np.isfinite(sub.values)):
                    raise NonFiniteError(
                        f"{prefix} produced non-finite activations")
                coeff = RESIDUAL_COEFF[kind]
                if isinstance(g, float):
                    x = ad.add(x, ad.scale(sub, coeff * g))
                else:
                    x = ad.add(x, ad.scale(ad.mul(sub, g), coeff))
            if tap_block is not None and b + 1 == tap_block:
                tap = x

        h = ad.layernorm(x, params["head.ln_g"], params["head.ln_b"])
        log_probs = ad.log_softmax(
            ad.linear(h, params["head.w"], params["head.b"]), axis=-1)
        if check_finite and not np.all(np.isfinite(log_probs.values)):
            raise NonFiniteError("output head produced non-finite values")
        return EncoderOutput(log_probs, out_lens, tap)

    def aux_head(self, params: Mapping[str, Tensor], hidden: Tensor) -> Tensor:
        """Separate CTC projection for the intermediate tap."""
        h = ad.layernorm(hidden, params["auxhead.ln_g"], params["auxhead.ln_b"])
        return ad.log_softmax(
            ad.linear(h, params["auxhead.w"], params["auxhead.b"]), axis=-1)


def _time_mask(t_out: int, lengths: np.ndarray, tape: Tape) -> Tensor:
    valid = (np.arange(t_out)[None, :] < lengths[:, None]).astype(np.float64)
    return tape.constant(valid[:, :, None])


def aux_param_count(config: EncoderConfig) -> int:
    """Parameters of the half-depth model read at the aux tap: frontend,
    the bottom half of the blocks, and the aux projection head."""
    half = config.blocks // 2
    total = 0
    for name, shape in param_shapes(config, include_aux=True).items():
        owner = param_owner(name)
        if owner is not None and owner.block >= half:
            continue
        if name.startswith("head."):
            continue
        total += int(np.prod(shape))
    return total
