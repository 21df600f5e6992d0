"""Volumetric regression network: 3-D CNN stem, patch tokens, transformer
encoder with optional demographics token, and a 3-linear-layer head
predicting a lung-function value in liters. A CNN-only variant shares the
stem and head but skips attention entirely.

Separate models are trained per target (FVC or FEV1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .volume import NORM255, Volume

TARGETS = ("FVC", "FEV1")
ARCHS = ("beyondct", "cnn")

STEM_LAYERS = 3
STEM_STRIDE = 2 ** STEM_LAYERS  # each conv halves every spatial axis


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults give the full-size network."""

    input_cube: int = 256
    stem_channels: tuple[int, int, int] = (4, 8, 8)
    patch: int = 4
    embed_dim: int = 512
    blocks: int = 4
    heads: int = 8
    mlp_ratio: int = 4
    head_hidden: tuple[int, int] = (128, 32)
    use_demographics: bool = True
    target: str = "FVC"
    arch: str = "beyondct"
    input_scale: float = 1.0 / 255.0

    def __post_init__(self) -> None:
        problems = []
        if self.input_cube < STEM_STRIDE or self.input_cube % STEM_STRIDE != 0:
            problems.append(f"input_cube must be a positive multiple of {STEM_STRIDE}")
        else:
            feat = self.input_cube // STEM_STRIDE
            if self.patch < 1 or feat % self.patch != 0:
                problems.append(
                    f"feature grid {feat} (input_cube/{STEM_STRIDE}) must be divisible by patch {self.patch}"
                )
        if len(self.stem_channels) != STEM_LAYERS or any(c < 1 for c in self.stem_channels):
            problems.append("stem_channels must be three positive widths")
        if self.embed_dim < 1 or self.heads < 1 or self.embed_dim % self.heads != 0:
            problems.append(f"embed_dim {self.embed_dim} must be divisible by heads {self.heads}")
        if self.blocks < 1:
            problems.append("blocks must be >= 1")
        if self.mlp_ratio < 1:
            problems.append("mlp_ratio must be >= 1")
        if len(self.head_hidden) != 2 or any(h < 1 for h in self.head_hidden):
            problems.append("head_hidden must be two positive widths")
        if self.target not in TARGETS:
            problems.append(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.arch not in ARCHS:
            problems.append(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.input_scale <= 0:
            problems.append("input_scale must be positive")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def feature_grid(self) -> int:
        return self.input_cube // STEM_STRIDE

    @property
    def patch_tokens(self) -> int:
        return (self.feature_grid // self.patch) ** 3

    @property
    def patch_flat_len(self) -> int:
        return self.stem_channels[-1] * self.patch ** 3

    @property
    def sequence_len(self) -> int:
        return self.patch_tokens + (1 if self.use_demographics else 0)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @staticmethod
    def tiny(**overrides) -> "ModelConfig":
        """Desk-scale preset: 64-cube input, 64-d embedding, 2 blocks."""
        base = dict(input_cube=64, embed_dim=64, blocks=2, heads=4, patch=4,
                    head_hidden=(64, 32))
        base.update(overrides)
        return ModelConfig(**base)


@dataclass(frozen=True)
class DemographicsRecord:
    """Raw subject covariates, fed to the model without standardization."""

    age: float
    sex: int  # female 0, male 1
    height_in: float
    weight_lb: float
    smoking_status: int  # current 0, former 1
    cigs_per_day: float
    smoke_years: float

    def __post_init__(self) -> None:
        problems = []
        if self.age <= 0:
            problems.append(f"age must be > 0, got {self.age}")
        if self.height_in <= 0:
            problems.append(f"height must be > 0, got {self.height_in}")
        if self.weight_lb <= 0:
            problems.append(f"weight must be > 0, got {self.weight_lb}")
        if self.sex not in (0, 1):
            problems.append(f"sex code must be 0 or 1, got {self.sex}")
        if self.smoking_status not in (0, 1):
            problems.append(f"smoking status code must be 0 or 1, got {self.smoking_status}")
        if self.cigs_per_day < 0 or self.smoke_years < 0:
            problems.append("smoking quantities must be >= 0")
        if problems:
            raise ContractError("; ".join(problems))

    def as_vector(self) -> np.ndarray:
        return np.array(
            [self.age, self.sex, self.height_in, self.weight_lb,
             self.smoking_status, self.cigs_per_day, self.smoke_years],
            dtype=np.float64,
        )


DEMOGRAPHICS_WIDTH = 7


# ---------------------------------------------------------------------------
# parameter initialization


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Seeded parameter dictionary; names and shapes depend only on cfg."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def add(name, array):
        params[name] = Tensor(array, requires_grad=True, dtype=dtype, name=name)

    def he(shape, fan_in):
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)

    def trunc(shape, std=0.02):
        return rng.normal(0.0, std, size=shape)

    c_prev = 1
    for i, c in enumerate(cfg.stem_channels, start=1):
        add(f"stem.conv{i}.weight", he((c, c_prev, 2, 2, 2), fan_in=c_prev * 8))
        add(f"stem.conv{i}.bias", np.zeros(c))
        c_prev = c

    if cfg.arch == "beyondct":
        d = cfg.embed_dim
        add("patch_embed.weight", trunc((cfg.patch_flat_len, d)))
        add("patch_embed.bias", np.zeros(d))
        if cfg.use_demographics:
            add("demo_embed.weight", trunc((DEMOGRAPHICS_WIDTH, d)))
            add("demo_embed.bias", np.zeros(d))
        add("pos_embed", trunc((cfg.sequence_len, d)))
        for b in range(cfg.blocks):
            p = f"block{b}"
            add(f"{p}.ln1.gain", np.ones(d))
            add(f"{p}.ln1.shift", np.zeros(d))
            for mat in ("wq", "wk", "wv", "wo"):
                add(f"{p}.attn.{mat}", trunc((d, d)))
            add(f"{p}.ln2.gain", np.ones(d))
            add(f"{p}.ln2.shift", np.zeros(d))
            hidden = cfg.mlp_ratio * d
            add(f"{p}.mlp.w1", trunc((d, hidden)))
            add(f"{p}.mlp.b1", np.zeros(hidden))
            add(f"{p}.mlp.w2", trunc((hidden, d)))
            add(f"{p}.mlp.b2", np.zeros(d))
        head_in = d
    else:
        head_in = cfg.stem_channels[-1]

    h1, h2 = cfg.head_hidden
    add("head.w1", he((head_in, h1), fan_in=head_in))
    add("head.b1", np.zeros(h1))
    add("head.w2", he((h1, h2), fan_in=h1))
    add("head.b2", np.zeros(h2))
    add("head.w3", he((h2, 1), fan_in=h2))
    add("head.b3", np.zeros(1))
    return params


def count_params(params: Mapping[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


def _param_dtype(params: Mapping[str, Tensor]) -> np.dtype:
    return next(iter(params.values())).dtype


# ---------------------------------------------------------------------------
# forward pieces


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def cnn_stem(x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Three stride-2 kernel-2 conv layers with relu; N^3 -> (N/8)^3."""
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise DimensionError(f"stem expects a (1, N, N, N) input, got {x.shape}")
    out = x
    for i in range(1, STEM_LAYERS + 1):
        out = ad.relu(ad.conv3d(out, params[f"stem.conv{i}.weight"], params[f"stem.conv{i}.bias"]))
    return out


def patchify(f: Tensor, patch: int) -> Tensor:
    """Split (C, M, M, M) into non-overlapping patch^3 blocks, enumerated
    z-major then y then x, each flattened channel-last."""
    c, mz, my, mx = f.shape
    if mz != my or my != mx:
        raise DimensionError(f"patchify expects a cubic feature map, got {f.shape}")
    if patch < 1 or mz % patch != 0:
        raise DimensionError(f"feature extent {mz} not divisible by patch {patch}")
    nb = mz // patch
    blocks = ad.reshape(f, (c, nb, patch, nb, patch, nb, patch))
    ordered = ad.transpose(blocks, (1, 3, 5, 2, 4, 6, 0))
    return ad.reshape(ordered, (nb ** 3, patch ** 3 * c))


def embed_demographics(record: DemographicsRecord, params: Mapping[str, Tensor]) -> Tensor:
    """One linear layer on the raw 7-vector; no standardization."""
    vec = Tensor(
        record.as_vector().reshape(1, DEMOGRAPHICS_WIDTH).astype(_param_dtype(params))
    )
    return linear(vec, params["demo_embed.weight"], params["demo_embed.bias"])


def assemble_sequence(
    patch_tokens: Tensor, demo_token: Tensor | None, positional: Tensor
) -> Tensor:
    """Concatenate the optional demographics token ahead of the patch tokens,
    then add the learnable positional table element-wise."""
    seq = patch_tokens if demo_token is None else ad.concat_rows(demo_token, patch_tokens)
    if positional.shape != seq.shape:
        raise DimensionError(
            f"positional table {positional.shape} does not match sequence {seq.shape}"
        )
    return ad.add(seq, positional)


def multi_head_attention(
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    heads: int,
    return_weights: bool = False,
):
    """Scaled dot-product self-attention across parallel head subspaces."""
    if x.data.ndim != 2:
        raise DimensionError(f"attention expects (T, D) input, got {x.shape}")
    t, d = x.shape
    if d % heads != 0:
        raise DimensionError(f"embed dim {d} not divisible by heads {heads}")
    dk = d // heads
    q = ad.matmul(x, wq)
    k = ad.matmul(x, wk)
    v = ad.matmul(x, wv)
    qh = ad.transpose(ad.reshape(q, (t, heads, dk)), (1, 0, 2))  # (H, T, dk)
    kt = ad.transpose(ad.reshape(k, (t, heads, dk)), (1, 2, 0))  # (H, dk, T)
    vh = ad.transpose(ad.reshape(v, (t, heads, dk)), (1, 0, 2))  # (H, T, dk)
    scores = ad.scale(ad.matmul(qh, kt), 1.0 / math.sqrt(dk))
    weights = ad.softmax_lastdim(scores)
    ctx = ad.matmul(weights, vh)
    merged = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (t, d))
    out = ad.matmul(merged, wo)
    if return_weights:
        return out, weights.data
    return out


def transformer_block(x: Tensor, params: Mapping[str, Tensor], prefix: str, heads: int) -> Tensor:
    """Pre-norm residual block: attention sublayer then gelu MLP sublayer."""
    normed = ad.layer_norm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.shift"])
    attended = multi_head_attention(
        normed,
        params[f"{prefix}.attn.wq"],
        params[f"{prefix}.attn.wk"],
        params[f"{prefix}.attn.wv"],
        params[f"{prefix}.attn.wo"],
        heads,
    )
    x = ad.add(x, attended)
    normed = ad.layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.shift"])
    hidden = ad.gelu(linear(normed, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"]))
    return ad.add(x, linear(hidden, params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"]))


def regression_head(x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Mean-pool tokens, then three linear layers with relu between."""
    pooled = ad.reshape(ad.mean_axis0(x), (1, x.shape[-1]))
    h = ad.relu(linear(pooled, params["head.w1"], params["head.b1"]))
    h = ad.relu(linear(h, params["head.w2"], params["head.b2"]))
    return linear(h, params["head.w3"], params["head.b3"])


def encode_and_regress(seq: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    for b in range(cfg.blocks):
        seq = transformer_block(seq, params, f"block{b}", cfg.heads)
    return regression_head(seq, params)


def _check_input(vol: Volume, cfg: ModelConfig) -> None:
    if vol.intensity != NORM255:
        raise ContractError("model input must be a normalized volume")
    n = cfg.input_cube
    if vol.dims != (n, n, n):
        raise ContractError(f"volume dims {vol.dims} do not match input cube {n}")


def _volume_tensor(vol: Volume, cfg: ModelConfig, dtype) -> Tensor:
    data = vol.values.astype(dtype) * np.asarray(cfg.input_scale, dtype=dtype)
    return Tensor(data.reshape((1,) + vol.dims))


def forward(
    vol: Volume,
    demo: DemographicsRecord | None,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
) -> Tensor:
    """Full pipeline: volume (+ optional demographics) to a (1, 1) liter
    prediction, recorded on the active tape."""
    _check_input(vol, cfg)
    if cfg.arch == "cnn":
        return cnn_baseline_forward(vol, params, cfg)
    dtype = _param_dtype(params)
    x = _volume_tensor(vol, cfg, dtype)
    features = cnn_stem(x, params)
    tokens = patchify(features, cfg.patch)
    embedded = linear(tokens, params["patch_embed.weight"], params["patch_embed.bias"])
    demo_token = None
    if cfg.use_demographics:
        if demo is None:
            raise ContractError("model configured with demographics but none provided")
        demo_token = embed_demographics(demo, params)
    seq = assemble_sequence(embedded, demo_token, params["pos_embed"])
    return encode_and_regress(seq, params, cfg)


def cnn_baseline_forward(
    vol: Volume, params: Mapping[str, Tensor], cfg: ModelConfig
) -> Tensor:
    """Stem + global average pool + the same 3-linear-layer head; no
    attention and no demographics."""
    _check_input(vol, cfg)
    dtype = _param_dtype(params)
    x = _volume_tensor(vol, cfg, dtype)
    features = cnn_stem(x, params)
    c = features.shape[0]
    flat = ad.transpose(ad.reshape(features, (c, cfg.feature_grid ** 3)), (1, 0))
    pooled = ad.reshape(ad.mean_axis0(flat), (1, c))
    h = ad.relu(linear(pooled, params["head.w1"], params["head.b1"]))
    h = ad.relu(linear(h, params["head.w2"], params["head.b2"]))
    return linear(h, params["head.w3"], params["head.b3"])


def predict(
    vol: Volume,
    demo: DemographicsRecord | None,
    params: Mapping[str, Tensor],
    cfg: ModelConfig,
) -> float:
    """Inference-only forward returning the prediction in liters."""
    return float(forward(vol, demo, params, cfg).data.reshape(()))


def stack_predictions(preds: list[Tensor]) -> Tensor:
    out = preds[0]
    for p in preds[1:]:
        out = ad.concat_rows(out, p)
    return out


def mae_loss(pred: Tensor, actual: Tensor | np.ndarray | float) -> Tensor:
    """Mean absolute error over the batch, in liters."""
    if not isinstance(actual, Tensor):
        arr = np.asarray(actual, dtype=pred.dtype).reshape(pred.shape)
        actual = Tensor(arr)
    if actual.shape != pred.shape:
        raise DimensionError(f"prediction {pred.shape} vs actual {actual.shape}")
    return ad.mean_(ad.abs_(ad.sub(pred, actual)))
