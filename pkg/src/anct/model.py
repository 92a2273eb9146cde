"""Attention-enhanced multi-task network for nodule attribute scoring.

Data flow for one nodule with ``M`` slices::

    volume (M, 64, 64, 1)
      -> backbone: 4 x (conv3x3 -> ReLU -> maxpool2x2), GAP     xg (M, d)
      -> slice attention (or uniform 1/M)                       alpha (M)
      -> weighted sum                                           fc (d)
      -> per-attribute specialisation, ReLU                     xs (9, d)
         -> auxiliary heads (training only)                     y_aux (9)
      -> cross-attribute attention, raw weights                 Q (9, 9), fs = Q @ xs
      -> per-attribute two-layer heads, sigmoid                 y (9)

Without cross-attribute attention the heads read ``fc`` directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, asdict
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .attributes import ATTRIBUTE_INDEX, ATTRIBUTE_NAMES, NUM_ATTRIBUTES
from .autodiff import Param, ShapeError, Tensor, UsageError

CHANNEL_PRESETS = {
    "paper": (32, 64, 128, 256),
    "tiny": (8, 16, 32, 64),
}
INPUT_SIZE = 64


class ValidationError(ValueError):
    pass


@dataclass
class ModelConfig:
    enable_sam: bool = True
    enable_caam: bool = True
    enable_ascmm: bool = True
    channel_preset: str = "paper"
    attention_hidden: int = 128
    head_hidden: int = 128
    lam: float = 0.1
    active_attributes: tuple[str, ...] = ATTRIBUTE_NAMES

    def __post_init__(self):
        self.active_attributes = tuple(self.active_attributes)
        if self.channel_preset not in CHANNEL_PRESETS:
            raise ValidationError(f"unknown channel preset {self.channel_preset!r}")
        if self.enable_ascmm and not self.enable_caam:
            raise ValidationError("enable_ascmm requires enable_caam")
        if self.lam < 0:
            raise ValidationError(f"lambda must be non-negative, got {self.lam}")
        if not self.active_attributes:
            raise ValidationError("active_attributes must not be empty")
        unknown = [a for a in self.active_attributes if a not in ATTRIBUTE_INDEX]
        if unknown:
            raise ValidationError(f"unknown attributes: {unknown}")
        if len(set(self.active_attributes)) != len(self.active_attributes):
            raise ValidationError("active_attributes contains duplicates")

    @property
    def channels(self) -> tuple[int, ...]:
        return CHANNEL_PRESETS[self.channel_preset]

    @property
    def content_dim(self) -> int:
        return self.channels[-1]

    @property
    def active_indices(self) -> np.ndarray:
        return np.array(sorted(ATTRIBUTE_INDEX[a] for a in self.active_attributes), dtype=np.intp)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["active_attributes"] = list(self.active_attributes)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown model config keys: {sorted(extra)}")
        return cls(**dict(d))


# Parameter groups, in the fixed draw order. Every group is always drawn so
# ablation variants built from the same seed share all common weights.
GROUPS = ("backbone", "sam", "spec", "aux", "caam", "head")


def param_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """``(name, shape, init kind)`` for every parameter, in draw order."""
    d = config.content_dim
    a = config.attention_hidden
    hh = config.head_hidden
    K = NUM_ATTRIBUTES
    layout = []
    cin = 1
    for i, cout in enumerate(config.channels):
        layout.append((f"backbone.conv{i}.kernel", (3, 3, cin, cout), "he"))
        layout.append((f"backbone.conv{i}.bias", (cout,), "zero"))
        cin = cout
    layout += [
        ("sam.W0", (a, d), "glorot"),
        ("sam.b0", (a,), "zero"),
        ("sam.W1", (1, a), "glorot"),
        ("sam.b1", (1,), "zero"),
        ("spec.W", (K, d, d), "glorot"),
        ("spec.b", (K, d), "zero"),
        ("aux.W", (K, 1, d), "glorot"),
        ("aux.b", (K, 1), "zero"),
        ("caam.W0", (K, a, d), "glorot"),
        ("caam.b0", (K, a), "zero"),
        ("caam.W1", (K, 1, a), "glorot"),
        ("caam.b1", (K, 1), "zero"),
        ("head.W1", (K, hh, d), "glorot"),
        ("head.b1", (K, hh), "zero"),
        ("head.W2", (K, 1, hh), "glorot"),
        ("head.b2", (K, 1), "zero"),
    ]
    return layout


def init_model_params(config: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Param]:
    rng = np.random.default_rng(seed)
    return {
        name: ad.init_params(name, shape, kind, rng, dtype=dtype)
        for name, shape, kind in param_layout(config)
    }


def active_groups(config: ModelConfig) -> tuple[str, ...]:
    groups = ["backbone"]
    if config.enable_sam:
        groups.append("sam")
    if config.enable_caam:
        groups += ["spec", "caam"]
    if config.enable_ascmm:
        groups.append("aux")
    groups.append("head")
    return tuple(groups)


def active_params(params: Mapping[str, Param], config: ModelConfig) -> list[Param]:
    """Parameters that receive gradients under ``config``."""
    groups = set(active_groups(config))
    return [p for name, p in params.items() if name.split(".", 1)[0] in groups]


@dataclass
class ForwardRecord:
    """All intermediates of one nodule's forward pass.

    Tensor fields stay attached to the tape for the loss; use
    :meth:`to_numpy` for analytics.
    """

    xg: Tensor
    alpha: Tensor
    fc: Tensor
    final: Tensor
    xs: Tensor | None = None
    aux: Tensor | None = None
    caam: Tensor | None = None
    fs: Tensor | None = None
    sam_enabled: bool = True
    caam_enabled: bool = True

    @property
    def num_slices(self) -> int:
        return self.xg.shape[0]

    def caam_matrix(self) -> np.ndarray:
        if self.caam is None:
            return np.zeros((NUM_ATTRIBUTES, NUM_ATTRIBUTES))
        return np.asarray(self.caam.data, dtype=np.float64)

    def to_numpy(self) -> dict[str, np.ndarray | None | bool]:
        def arr(t):
            return None if t is None else np.asarray(t.data, dtype=np.float64)

        return {
            "xg": arr(self.xg),
            "alpha": arr(self.alpha),
            "fc": arr(self.fc),
            "xs": arr(self.xs),
            "aux": arr(self.aux),
            "caam": self.caam_matrix(),
            "fs": arr(self.fs),
            "final": arr(self.final),
            "sam_enabled": self.sam_enabled,
            "caam_enabled": self.caam_enabled,
        }


def _p(params: Mapping[str, Param], name: str) -> Tensor:
    return params[name].value


def as_volume_tensor(volume, dtype=np.float32) -> Tensor:
    """Accept ``(M, 64, 64)`` or ``(M, 64, 64, 1)`` arrays/tensors."""
    if isinstance(volume, Tensor):
        data = volume.data
    else:
        data = np.asarray(volume, dtype=dtype)
    if data.ndim == 3:
        data = data[..., None]
    if data.ndim != 4 or data.shape[1:] != (INPUT_SIZE, INPUT_SIZE, 1) or data.shape[0] < 1:
        raise ShapeError(f"volume must be (M, 64, 64[, 1]) with M >= 1, got {data.shape}")
    if isinstance(volume, Tensor) and volume.data.ndim == 4:
        return volume
    return Tensor(data, dtype=data.dtype)


def backbone_forward(volume, params: Mapping[str, Param], config: ModelConfig) -> Tensor:
    """Slices in the batch axis through four conv blocks, then GAP: ``(M, d)``."""
    x = as_volume_tensor(volume, dtype=_p(params, "backbone.conv0.kernel").dtype)
    for i in range(len(config.channels)):
        x = ad.conv2d(x, _p(params, f"backbone.conv{i}.kernel"), _p(params, f"backbone.conv{i}.bias"))
        x = ad.relu(x)
        x = ad.maxpool2d(x)
    return ad.global_avg_pool(x)


def sam_weights(xg: Tensor, params: Mapping[str, Param]) -> Tensor:
    """Softmax over per-slice scores from a two-layer scorer."""
    h = ad.relu(ad.linear(xg, _p(params, "sam.W0"), _p(params, "sam.b0")))
    p = ad.linear(h, _p(params, "sam.W1"), _p(params, "sam.b1"))
    return ad.softmax_vector(ad.reshape(p, (xg.shape[0],)))


def uniform_weights(m: int, dtype=np.float32) -> Tensor:
    return Tensor(np.full(m, 1.0 / m, dtype=dtype))


def aggregate_content(xg: Tensor, alpha: Tensor) -> Tensor:
    return ad.weighted_sum_rows(xg, alpha)


def specialise(fc: Tensor, params: Mapping[str, Param]) -> Tensor:
    """``xs[t] = ReLU(W_t fc + b_t)`` for each attribute: ``(9, d)``."""
    d = fc.shape[0]
    z = ad.grouped_linear(ad.reshape(fc, (1, d)), _p(params, "spec.W"), _p(params, "spec.b"))
    return ad.relu(ad.reshape(z, (NUM_ATTRIBUTES, d)))


def _rowwise_heads(features: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    # features (9, d): each attribute's head reads its own row.
    T, d = features.shape
    z = ad.grouped_linear(ad.reshape(features, (T, 1, d)), weight, bias)
    return ad.reshape(z, (T, weight.shape[1]))


def ascmm_aux_predict(xs: Tensor, params: Mapping[str, Param], config: ModelConfig) -> Tensor:
    if not config.enable_ascmm:
        raise UsageError("auxiliary heads requested with enable_ascmm off")
    z = _rowwise_heads(xs, _p(params, "aux.W"), _p(params, "aux.b"))
    return ad.sigmoid(ad.reshape(z, (NUM_ATTRIBUTES,)))


def caam_apply(xs: Tensor, params: Mapping[str, Param], config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Raw cross-attribute weights ``Q`` (row t scores every xs_k) and ``fs = Q @ xs``."""
    if not config.enable_caam:
        raise UsageError("cross-attribute attention requested with enable_caam off")
    K = NUM_ATTRIBUTES
    h = ad.relu(ad.grouped_linear(xs, _p(params, "caam.W0"), _p(params, "caam.b0")))  # (T, K, a)
    q = ad.grouped_linear(h, _p(params, "caam.W1"), _p(params, "caam.b1"))  # (T, K, 1)
    Q = ad.reshape(q, (K, K))
    return Q, ad.matmul(Q, xs)


def predict_heads(features: Tensor, params: Mapping[str, Param]) -> Tensor:
    """Two dense layers per attribute, sigmoid output.

    ``features`` is ``(9, d)`` (one row per attribute) or ``(d,)`` shared by
    every attribute.
    """
    K = NUM_ATTRIBUTES
    W1, b1 = _p(params, "head.W1"), _p(params, "head.b1")
    if features.data.ndim == 1:
        d = features.shape[0]
        h = ad.grouped_linear(ad.reshape(features, (1, d)), W1, b1)
        h = ad.reshape(h, (K, W1.shape[1]))
    elif features.shape[0] == K:
        h = _rowwise_heads(features, W1, b1)
    else:
        raise ShapeError(f"head features must be (d,) or (9, d), got {features.shape}")
    h = ad.relu(h)
    z = _rowwise_heads(h, _p(params, "head.W2"), _p(params, "head.b2"))
    return ad.sigmoid(ad.reshape(z, (K,)))


def forward_full(
    volume,
    params: Mapping[str, Param],
    config: ModelConfig,
    compute_aux: bool = True,
) -> ForwardRecord:
    xg = backbone_forward(volume, params, config)
    m = xg.shape[0]
    alpha = sam_weights(xg, params) if config.enable_sam else uniform_weights(m, xg.dtype)
    fc = aggregate_content(xg, alpha)
    rec = ForwardRecord(
        xg=xg,
        alpha=alpha,
        fc=fc,
        final=None,
        sam_enabled=config.enable_sam,
        caam_enabled=config.enable_caam,
    )
    if config.enable_caam:
        xs = specialise(fc, params)
        rec.xs = xs
        if config.enable_ascmm and compute_aux:
            rec.aux = ascmm_aux_predict(xs, params, config)
        rec.caam, rec.fs = caam_apply(xs, params, config)
        rec.final = predict_heads(rec.fs, params)
    else:
        rec.final = predict_heads(fc, params)
    return rec


def compute_loss(record: ForwardRecord, target, config: ModelConfig) -> Tensor:
    """``lam * ||t - y_aux||^2 + ||t - y||^2`` over the active attributes of one nodule."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != (NUM_ATTRIBUTES,):
        raise ValidationError(f"target must have {NUM_ATTRIBUTES} entries, got {t.shape}")
    if not np.all(np.isfinite(t)) or np.any(t < 0) or np.any(t > 1):
        raise ValidationError("normalised targets must lie in [0, 1]")
    idx = config.active_indices
    subset = len(idx) < NUM_ATTRIBUTES
    dtype = record.final.dtype

    def part(pred: Tensor) -> Tensor:
        if subset:
            return ad.mse_loss(ad.take(pred, idx), Tensor(t[idx].astype(dtype)))
        return ad.mse_loss(pred, Tensor(t.astype(dtype)))

    loss = part(record.final)
    if config.enable_ascmm:
        if record.aux is None:
            raise UsageError("loss with ASCMM enabled needs auxiliary predictions")
        loss = ad.add(ad.scale(part(record.aux), config.lam), loss)
    return loss


@dataclass
class Model:
    """Config plus named parameters."""

    config: ModelConfig
    params: dict[str, Param] = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Model":
        return cls(config, init_model_params(config, seed, dtype=dtype))

    def forward(self, volume, compute_aux: bool = True) -> ForwardRecord:
        return forward_full(volume, self.params, self.config, compute_aux=compute_aux)

    def loss(self, record: ForwardRecord, target) -> Tensor:
        return compute_loss(record, target, self.config)

    def trainable(self) -> list[Param]:
        return active_params(self.params, self.config)

    def predict(self, volume) -> np.ndarray:
        """Normalised predictions in [0, 1], no recording."""
        with ad.no_record():
            rec = self.forward(volume, compute_aux=False)
        return np.asarray(rec.final.data, dtype=np.float64)

    def astype(self, dtype) -> "Model":
        return Model(
            self.config,
            {n: Param(n, Tensor(p.data.astype(dtype), requires_grad=True)) for n, p in self.params.items()},
        )
