"""BandRouteNet: band-wise routed denoising plus a full-band conditioner."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .exceptions import ConfigError, ShapeError
from .layers import (
    GRU,
    Conv1d,
    DepthwisePointwise,
    FeedForward,
    Inception1D,
    LayerNorm,
    Module,
    MultiHeadSelfAttention,
    film_modulate,
    gelu,
    mhsa_over_bands,
    sigmoid,
    take,
)
from .spectral import BandSpec, band_decompose, build_masks
from .tensor import Tensor, no_grad

__all__ = [
    "Ablation",
    "ModelConfig",
    "FullbandOutputs",
    "BandLatents",
    "Diagnostics",
    "BandRouteNet",
    "count_params",
    "expected_param_count",
    "routing_heatmap",
]

_DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class Ablation:
    """Component switches used for ablation runs; all off means the full model."""

    no_fullband: bool = False
    route_all_one: bool = False
    no_cross_band: bool = False
    no_band_embedding: bool = False

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "Ablation":
        valid = {f.name for f in dataclasses.fields(cls)}
        bad = [n for n in names if n not in valid]
        if bad:
            raise ConfigError(f"unknown ablation flag(s) {bad}; choose from {sorted(valid)}")
        return cls(**{n: True for n in names})

    def active(self) -> List[str]:
        return [f.name for f in dataclasses.fields(self) if getattr(self, f.name)]


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    heads: int = 4
    encoder_stages: int = 2
    blocks_per_stage: int = 2
    band_spec: BandSpec = field(default_factory=BandSpec)
    ablation: Ablation = field(default_factory=Ablation)
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        C = self.channels
        if C <= 0 or C % 8:
            raise ConfigError(f"channels must be a positive multiple of 8, got {C}")
        if self.heads <= 0 or C % self.heads:
            raise ConfigError(f"channels {C} not divisible by heads={self.heads}")
        if self.encoder_stages < 1 or self.blocks_per_stage < 1:
            raise ConfigError("encoder_stages and blocks_per_stage must be >= 1")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")

    @property
    def K(self) -> int:
        return self.band_spec.K

    @property
    def T(self) -> int:
        return self.band_spec.segment_length

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "heads": self.heads,
            "encoder_stages": self.encoder_stages,
            "blocks_per_stage": self.blocks_per_stage,
            "band_spec": self.band_spec.to_dict(),
            "ablation": dataclasses.asdict(self.ablation),
            "dtype": self.dtype,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "band_spec" in d and isinstance(d["band_spec"], dict):
            d["band_spec"] = BandSpec.from_dict(d["band_spec"])
        if "ablation" in d and isinstance(d["ablation"], dict):
            d["ablation"] = Ablation(**d["ablation"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def toy(cls, channels=8, T=32, edges=(0.0, 8.0, 30.0, 128.0), heads=2, **kw) -> "ModelConfig":
        spec = BandSpec.even(list(edges), segment_length=T)
        return cls(channels=channels, heads=heads, band_spec=spec, **kw)


# ---------------------------------------------------------------------------
# sub-networks
# ---------------------------------------------------------------------------


def _stage_widths(cfg: ModelConfig):
    C, S = cfg.channels, cfg.encoder_stages
    enc = [C // 2] * (S - 1) + [C]
    dec = [C // 2] * S
    return enc, dec


class Encoder(Module):
    """Stacked Inception1D stages lifting one input channel to C channels."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        enc, _ = _stage_widths(cfg)
        self.blocks = []
        cin = 1
        for s, width in enumerate(enc):
            for b in range(cfg.blocks_per_stage):
                blk = Inception1D(cin, width, rng, dtype=cfg.np_dtype)
                self.add_module(f"stage{s}_block{b}", blk)
                self.blocks.append(blk)
                cin = width

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class Decoder(Module):
    """Inception1D stages narrowing C channels, then a pointwise head to 1."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        _, dec = _stage_widths(cfg)
        self.blocks = []
        cin = cfg.channels
        for s, width in enumerate(dec):
            for b in range(cfg.blocks_per_stage):
                blk = Inception1D(cin, width, rng, dtype=cfg.np_dtype)
                self.add_module(f"stage{s}_block{b}", blk)
                self.blocks.append(blk)
                cin = width
        self.head = Conv1d(cin, 1, 1, rng, dtype=cfg.np_dtype)

    def forward(self, z: Tensor) -> Tensor:
        for blk in self.blocks:
            z = blk(z)
        return self.head(z)


@dataclass
class FullbandOutputs:
    d_f: Tensor
    lambda_gate: Tensor
    tau: Tensor
    psi: Tensor
    z_f: Tensor
    h_f: Tensor


class FullbandConditioner(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        C, dt = cfg.channels, cfg.np_dtype
        self.encoder = Encoder(cfg, rng)
        self.norm = LayerNorm(C, dt)
        self.gru = GRU(C, C, rng, dt)
        self.temporal_conv = Conv1d(C, C, 3, rng, dtype=dt)
        self.decoder = Decoder(cfg, rng)
        self.gate_conv = Conv1d(C, C, 3, rng, dtype=dt)
        self.gate_norm = LayerNorm(C, dt)
        self.gate_out = Conv1d(C, 1, 1, rng, dtype=dt)
        self.proj = Conv1d(C, 2 * C, 1, rng, dtype=dt)
        self.C = C

    def forward(self, x: Tensor) -> FullbandOutputs:
        h_f = self.encoder(x)
        z_f = self.temporal_conv(self.gru(self.norm(h_f)))
        d_f = self.decoder(z_f)
        lam = sigmoid(self.gate_out(gelu(self.gate_norm(self.gate_conv(z_f)))))
        tp = self.proj(z_f)
        tau = take(tp, 1, 0, self.C)
        psi = take(tp, 1, self.C, 2 * self.C)
        return FullbandOutputs(d_f=d_f, lambda_gate=lam, tau=tau, psi=psi, z_f=z_f, h_f=h_f)


class ArtifactRouter(Module):
    """Soft mask in [0, 1]: local depthwise-pointwise branch plus a global
    pooled branch (broadcast over time), summed before the sigmoid."""

    def __init__(self, C, rng, dtype):
        super().__init__()
        self.local = DepthwisePointwise(C, rng, kernel=5, dtype=dtype)
        self.global1 = Conv1d(C, C, 1, rng, dtype=dtype)
        self.global2 = Conv1d(C, C, 1, rng, dtype=dtype)

    def forward(self, e: Tensor) -> Tensor:
        pooled = e.mean(axis=2, keepdims=True)
        glob = self.global2(gelu(self.global1(pooled)))
        return sigmoid(self.local(e) + glob)


class BandDenoiser(Module):
    def __init__(self, C, rng, dtype):
        super().__init__()
        self.pre = Conv1d(C, C, 3, rng, dtype=dtype)
        self.gru = GRU(C, C, rng, dtype)
        self.post = Conv1d(C, C, 3, rng, dtype=dtype)

    def forward(self, e: Tensor) -> Tensor:
        return e + self.post(self.gru(gelu(self.pre(e))))


class CrossBandFusion(Module):
    """Temporal mixing inside each band, then attention across bands per step."""

    def __init__(self, C, heads, rng, dtype):
        super().__init__()
        self.temporal = DepthwisePointwise(C, rng, kernel=5, dtype=dtype)
        self.attn_norm = LayerNorm(C, dtype)
        self.attn = MultiHeadSelfAttention(C, heads, rng, dtype)
        self.ffn_norm = LayerNorm(C, dtype)
        self.ffn = FeedForward(C, 2 * C, rng, dtype)

    def temporal_mix(self, Z: Tensor) -> Tensor:
        B, K, C, T = Z.shape
        flat = Z.reshape(B * K, C, T)
        return (flat + self.temporal(flat)).reshape(B, K, C, T)

    def band_mix(self, Zt: Tensor) -> Tensor:
        B, K, C, T = Zt.shape
        tokens = Zt.transpose(0, 3, 1, 2).reshape(B * T, K, C)
        a = tokens + mhsa_over_bands(self.attn_norm(tokens, axis=-1), self.attn)
        out = a + self.ffn(self.ffn_norm(a, axis=-1))
        return out.reshape(B, T, K, C).transpose(0, 2, 3, 1)

    def forward(self, Z: Tensor) -> Tensor:
        return self.band_mix(self.temporal_mix(Z))


@dataclass
class BandLatents:
    u: Tensor
    u_tilde: Tensor
    e: Tensor
    g: Tensor
    f: Tensor
    z: Tensor


@dataclass
class Diagnostics:
    """Plain arrays captured during a forward pass."""

    gates: np.ndarray  # B x K x C x T
    lambda_gate: np.ndarray  # B x 1 x T
    d_f: np.ndarray  # B x 1 x T
    band_outputs: np.ndarray  # B x K x T
    y_band: np.ndarray  # B x 1 x T
    band_inputs: np.ndarray  # B x K x T
    band_names: List[str] = field(default_factory=list)


class BandRouteNet(Module):
    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        C, K, dt = cfg.channels, cfg.K, cfg.np_dtype
        self.masks = build_masks(cfg.band_spec)
        self.fullband = FullbandConditioner(cfg, rng)
        self.band_encoder = Encoder(cfg, rng)
        bound = 1.0 / np.sqrt(C)
        self.band_embedding = Tensor(rng.uniform(-bound, bound, size=(K, C)).astype(dt), requires_grad=True)
        self.router = ArtifactRouter(C, rng, dt)
        self.denoiser = BandDenoiser(C, rng, dt)
        self.fusion = CrossBandFusion(C, cfg.heads, rng, dt)
        self.band_decoder = Decoder(cfg, rng)

    # -- pieces -------------------------------------------------------------

    def _as_input(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.config.np_dtype))
        if x.ndim != 3 or x.shape[1] != 1:
            raise ShapeError(f"expected input of shape B x 1 x T, got {x.shape}")
        if x.shape[2] != self.config.T:
            raise ShapeError(f"segment length {x.shape[2]} != configured T={self.config.T}")
        return x

    def decompose(self, x: Tensor) -> np.ndarray:
        """B x 1 x T -> B x K x T band signals (not differentiated)."""
        bands = band_decompose(x.data[:, 0, :], self.config.band_spec, self.masks)
        return bands.astype(self.config.np_dtype)

    def fullband_condition(self, x) -> FullbandOutputs:
        return self.fullband(self._as_input(x))

    def _embedding(self, k=None) -> Optional[Tensor]:
        if self.config.ablation.no_band_embedding:
            return None
        return self.band_embedding

    def band_adapter(
        self,
        x_k,
        k: int,
        tau: Optional[Tensor],
        psi: Optional[Tensor],
        force_gate: Optional[float] = None,
    ) -> BandLatents:
        """Encode, embed, modulate and route a single band x_k (B x 1 x T)."""
        if not 0 <= k < self.config.K:
            raise ShapeError(f"band index {k} out of range for K={self.config.K}")
        x_k = x_k if isinstance(x_k, Tensor) else Tensor(np.asarray(x_k, dtype=self.config.np_dtype))
        u = self.band_encoder(x_k)
        emb = self._embedding()
        if emb is not None:
            b_k = take(emb, 0, k, k + 1).reshape(1, -1, 1)
            u_t = u + b_k
        else:
            u_t = u
        e = u_t if tau is None else film_modulate(u_t, tau, psi)
        return self._route(u, u_t, e, force_gate)

    def _route(self, u, u_t, e, force_gate) -> BandLatents:
        abl = self.config.ablation
        if force_gate is not None:
            g = Tensor(np.full(e.shape, force_gate, dtype=e.dtype))
        elif abl.route_all_one:
            g = Tensor(np.ones(e.shape, dtype=e.dtype))
        else:
            g = self.router(e)
        f = self.denoiser(e)
        z = (1.0 - g) * e + g * f
        return BandLatents(u=u, u_tilde=u_t, e=e, g=g, f=f, z=z)

    def cross_band_fuse(self, Z: Tensor) -> Tensor:
        if self.config.ablation.no_cross_band:
            return Z
        return self.fusion(Z)

    # -- full model ---------------------------------------------------------

    def forward(self, x, force_gate: Optional[float] = None, return_latents: bool = False):
        """Denoise B x 1 x T input; returns (y_hat, Diagnostics)."""
        x = self._as_input(x)
        cfg = self.config
        B, _, T = x.shape
        K, C = cfg.K, cfg.channels
        bands = self.decompose(x)

        fb = None if cfg.ablation.no_fullband else self.fullband(x)

        u = self.band_encoder(Tensor(bands.reshape(B * K, 1, T))).reshape(B, K, C, T)
        emb = self._embedding()
        u_t = u + emb.reshape(1, K, C, 1) if emb is not None else u
        if fb is not None:
            e = film_modulate(u_t, fb.tau.reshape(B, 1, C, T), fb.psi.reshape(B, 1, C, T))
        else:
            e = u_t
        lat = self._route(
            u.reshape(B * K, C, T), u_t.reshape(B * K, C, T), e.reshape(B * K, C, T), force_gate
        )
        Z = lat.z.reshape(B, K, C, T)
        Zp = self.cross_band_fuse(Z)
        y_k = self.band_decoder(Zp.reshape(B * K, C, T)).reshape(B, K, T)
        y_band = y_k.sum(axis=1, keepdims=True)
        if fb is not None:
            y_hat = y_band + fb.lambda_gate * fb.d_f
            lam, d_f = fb.lambda_gate.data, fb.d_f.data
        else:
            y_hat = y_band
            lam = np.zeros((B, 1, T), dtype=cfg.np_dtype)
            d_f = np.zeros((B, 1, T), dtype=cfg.np_dtype)
        diag = Diagnostics(
            gates=lat.g.data.reshape(B, K, C, T),
            lambda_gate=lam,
            d_f=d_f,
            band_outputs=y_k.data,
            y_band=y_band.data,
            band_inputs=bands,
            band_names=cfg.band_spec.names,
        )
        if return_latents:
            return y_hat, diag, lat, Z, Zp
        return y_hat, diag

    def predict(self, x, batch_size: int = 64) -> np.ndarray:
        """Tape-free inference over B x T or B x 1 x T arrays; returns B x T."""
        x = np.asarray(x, dtype=self.config.np_dtype)
        if x.ndim == 2:
            x = x[:, None, :]
        outs = []
        with no_grad():
            for i in range(0, len(x), batch_size):
                y, _ = self.forward(x[i : i + batch_size])
                outs.append(y.data[:, 0, :])
        return np.concatenate(outs, axis=0) if outs else np.zeros((0, self.config.T))


# ---------------------------------------------------------------------------
# introspection
# ---------------------------------------------------------------------------


def count_params(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter total, layer by layer."""
    C, K = cfg.channels, cfg.K

    def conv(cin, cout, k, groups=1):
        return cout * (cin // groups) * k + cout

    def inception(cin, cout):
        q = cout // 4
        return conv(cin, q, 1) + conv(cin, q, 3) + conv(cin, q, 5) + conv(cin, q, 1)

    def stack(cin, widths):
        total = 0
        for w in widths:
            for _ in range(cfg.blocks_per_stage):
                total += inception(cin, w)
                cin = w
        return total, cin

    enc_w, dec_w = _stage_widths(cfg)
    enc, _ = stack(1, enc_w)
    dec_blocks, dec_out = stack(C, dec_w)
    dec = dec_blocks + conv(dec_out, 1, 1)
    norm = 2 * C
    gru = 3 * C * C + 3 * C * C + 6 * C
    linear = C * C + C

    fullband = enc + norm + gru + conv(C, C, 3) + dec + conv(C, C, 3) + norm + conv(C, 1, 1) + conv(C, 2 * C, 1)
    router = conv(C, C, 5, groups=C) + conv(C, C, 1) + 2 * conv(C, C, 1)
    denoiser = 2 * conv(C, C, 3) + gru
    ffn = (C * 2 * C + 2 * C) + (2 * C * C + C)
    fusion = conv(C, C, 5, groups=C) + conv(C, C, 1) + norm + 4 * linear + norm + ffn
    return fullband + enc + K * C + router + denoiser + fusion + dec


def routing_heatmap(diag: Diagnostics, index: Optional[int] = 0) -> np.ndarray:
    """Channel-averaged routing mask: K x T for one sample (B x K x T if index is None)."""
    heat = diag.gates.mean(axis=2)
    return heat if index is None else heat[index]
