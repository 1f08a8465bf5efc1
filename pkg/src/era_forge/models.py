"""The three era-recognition networks built from :mod:`era_forge.nncore` layers.

* ``audio-cnn``: conv encoder -> h_a -> classifier.
* ``audio-suc``: same encoder plus an EC projection head on h_a.
* ``audioart-mmc``: encoder and biography projection feed a transformer fusion
  module whose output h_m drives the classifier, the EC head and the MMC views.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .nncore import (
    ELU,
    AvgPool2x2,
    BatchNorm2d,
    ConfigError,
    Conv3x3,
    GlobalAvgPool,
    L2Normalize,
    Linear,
    MHABlock,
    Param,
    ParamStore,
    Sequential,
    ShapeError,
    load_checkpoint,
    save_checkpoint,
)

VARIANTS = ("audio-cnn", "audio-suc", "audioart-mmc")


@dataclass
class AudioEncoderConfig:
    block_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 128, 64])
    embed_dim: int = 64
    n_classes: int = 64
    n_mels: int = 224
    n_frames: int = 1024
    in_channels: int = 1

    def validate(self) -> None:
        if len(self.block_channels) < 1:
            raise ConfigError("encoder needs at least one block")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        depth = 2 ** len(self.block_channels)
        if self.n_mels < depth or self.n_frames < depth:
            raise ConfigError(
                f"input {self.n_mels}x{self.n_frames} too small for {len(self.block_channels)} pooling stages "
                f"(need >= {depth} per side)"
            )

    def pooled_shape(self) -> tuple[int, int]:
        h, w = self.n_mels, self.n_frames
        for _ in self.block_channels:
            h, w = h // 2, w // 2
        return h, w


@dataclass
class FusionConfig:
    n_blocks: int = 2
    heads: int = 4
    d_k: int = 32


@dataclass
class ModelConfig:
    variant: str = "audio-cnn"
    encoder: AudioEncoderConfig = field(default_factory=AudioEncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    d_z: int = 32
    d_bio: int = 384
    dtype: str = "float32"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        self.encoder.validate()
        if self.variant == "audioart-mmc":
            width = 2 * self.encoder.embed_dim
            if self.fusion.heads * self.fusion.d_k != width:
                raise ConfigError(
                    f"heads*d_k = {self.fusion.heads * self.fusion.d_k} must equal 2*d_h = {width}"
                )
            if self.fusion.n_blocks < 1:
                raise ConfigError("fusion needs at least one transformer block")
            if self.d_bio < 1:
                raise ConfigError("d_bio must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = AudioEncoderConfig(**d.get("encoder", {}))
        d["fusion"] = FusionConfig(**d.get("fusion", {}))
        return cls(**d)

    @property
    def uses_ec(self) -> bool:
        return self.variant != "audio-cnn"

    @property
    def uses_mmc(self) -> bool:
        return self.variant == "audioart-mmc"


def build_encoder(cfg: AudioEncoderConfig, rng: np.random.Generator, dtype) -> Sequential:
    layers = []
    c_in = cfg.in_channels
    for c_out in cfg.block_channels:
        layers += [Conv3x3(c_in, c_out, rng, dtype), BatchNorm2d(c_out, dtype), ELU(), AvgPool2x2()]
        c_in = c_out
    layers += [GlobalAvgPool(), Linear(c_in, cfg.embed_dim, rng, dtype)]
    return Sequential(layers)


def projection_head(d_in: int, d_out: int, rng, dtype, linear_only: bool = False) -> Sequential:
    """g_theta: linear -> ELU -> linear -> L2 normalize.

    ``linear_only`` drops the nonlinearity and biases, which makes the head
    scale-invariant; used for diagnostics.
    """
    if linear_only:
        return Sequential([Linear(d_in, d_in, rng, dtype, bias=False),
                           Linear(d_in, d_out, rng, dtype, bias=False), L2Normalize()])
    return Sequential([Linear(d_in, d_in, rng, dtype), ELU(), Linear(d_in, d_out, rng, dtype), L2Normalize()])


class FusionModule:
    """f_E: two-token transformer over (audio, text) lifted to width 2*d_h, mean-pooled back to d_h."""

    def __init__(self, d_h: int, cfg: FusionConfig, rng: np.random.Generator, dtype):
        width = 2 * d_h
        if cfg.heads * cfg.d_k != width:
            raise ConfigError(f"heads*d_k = {cfg.heads * cfg.d_k} must equal 2*d_h = {width}")
        self.d_h, self.width = d_h, width
        self.lift_a = Linear(d_h, width, rng, dtype)
        self.lift_t = Linear(d_h, width, rng, dtype)
        self.modality = Param.of((0.1 * rng.standard_normal((2, width))).astype(dtype))
        self.blocks = Sequential([MHABlock(width, cfg.heads, cfg.d_k, rng, dtype) for _ in range(cfg.n_blocks)])
        self.out = Linear(width, d_h, rng, dtype)

    def named_params(self, prefix: str = "") -> list[tuple[str, Param]]:
        out = [(f"{prefix}lift_a.{k}", p) for k, p in self.lift_a.params.items()]
        out += [(f"{prefix}lift_t.{k}", p) for k, p in self.lift_t.params.items()]
        out.append((f"{prefix}modality", self.modality))
        out += self.blocks.named_params(f"{prefix}blocks.")
        out += [(f"{prefix}out.{k}", p) for k, p in self.out.params.items()]
        return out

    def attention(self) -> list[np.ndarray]:
        return [blk.last_attention for blk in self.blocks.layers]

    def forward(self, a: np.ndarray, t: np.ndarray, train: bool = True) -> np.ndarray:
        if a.shape != t.shape or a.shape[-1] != self.d_h:
            raise ShapeError(f"fuse expects matching [B,{self.d_h}] inputs, got {a.shape} and {t.shape}")
        tok_a = self.lift_a.forward(a, train) + self.modality.value[0]
        tok_t = self.lift_t.forward(t, train) + self.modality.value[1]
        tokens = self.blocks.forward(np.stack([tok_a, tok_t], axis=1), train)
        return self.out.forward(tokens.mean(axis=1), train)

    def backward(self, dh: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dpooled = self.out.backward(dh)
        dtok = self.blocks.backward(np.repeat(dpooled[:, None, :] / 2.0, 2, axis=1))
        self.modality.grad += dtok.sum(axis=0)
        return self.lift_a.backward(dtok[:, 0]), self.lift_t.backward(dtok[:, 1])


@dataclass
class Outputs:
    logits: np.ndarray
    h_a: np.ndarray
    z: np.ndarray | None = None
    t: np.ndarray | None = None
    h_m: np.ndarray | None = None
    anchors: np.ndarray | None = None  # [B, d_h] f_T(t_i), unit norm
    views: np.ndarray | None = None  # [B, 1+K, d_h] unit-norm f_E views; column 0 is the matched pair
    view_mask: np.ndarray | None = None  # [B, 1+K] bool

    @property
    def a(self) -> np.ndarray:
        return self.h_a

    @property
    def s(self) -> np.ndarray | None:
        return None if self.t is None else np.concatenate([self.h_a, self.t], axis=-1)


class EraModel:
    """One of the three variants with cached forward state and a manual backward.

    ``forward`` must precede ``backward``; gradients accumulate into :attr:`params`.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(seed)
        enc = cfg.encoder
        d_h = enc.embed_dim
        self.encoder = build_encoder(enc, rng, self.dtype)
        self.classifier = Linear(d_h, enc.n_classes, rng, self.dtype)
        self.ec_head = projection_head(d_h, cfg.d_z, rng, self.dtype) if cfg.uses_ec else None
        if cfg.uses_mmc:
            self.text_proj = Linear(cfg.d_bio, d_h, rng, self.dtype)
            self.fusion = FusionModule(d_h, cfg.fusion, rng, self.dtype)
            self.mmc_head = Sequential([Linear(d_h, d_h, rng, self.dtype), L2Normalize()])
            self.view_norm = L2Normalize()
        else:
            self.text_proj = self.fusion = self.mmc_head = self.view_norm = None
        self.params = ParamStore(self._named_params())
        self._state = None

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def _named_params(self):
        out = self.encoder.named_params("encoder.")
        out += [(f"classifier.{k}", p) for k, p in self.classifier.params.items()]
        if self.ec_head is not None:
            out += self.ec_head.named_params("ec_head.")
        if self.cfg.uses_mmc:
            out += [(f"text_proj.{k}", p) for k, p in self.text_proj.params.items()]
            out += self.fusion.named_params("fusion.")
            out += self.mmc_head.named_params("mmc_head.")
        return out

    def _buffers(self):
        return self.encoder.named_buffers("encoder.")

    # -- forward / backward ---------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        if x.ndim == 3:
            x = x[:, None]
        enc = self.cfg.encoder
        if x.ndim != 4 or x.shape[1] != enc.in_channels or x.shape[2] != enc.n_mels:
            raise ShapeError(f"expected input [B,{enc.in_channels},{enc.n_mels},frames], got {list(x.shape)}")
        return x.astype(self.dtype, copy=False)

    def forward(
        self,
        x: np.ndarray,
        bio: np.ndarray | None = None,
        negatives: np.ndarray | None = None,
        train: bool = True,
    ) -> Outputs:
        """Run the network.

        ``x`` is ``[B, n_mels, frames]`` or ``[B, 1, n_mels, frames]``; ``bio`` the raw
        biography vectors ``[B, d_bio]`` (MMC variant only); ``negatives`` an optional
        ``[B, K]`` index array of text-shuffle partners (``-1`` = unused slot).
        """
        x = self._check_input(x)
        h_a = self.encoder.forward(x, train)
        out = Outputs(logits=None, h_a=h_a)
        state = {"pairs": None, "batch": x.shape[0]}
        if self.cfg.uses_mmc:
            if bio is None:
                raise ValueError("audioart-mmc needs biography embeddings")
            bio = np.asarray(bio, dtype=self.dtype)
            if bio.shape != (x.shape[0], self.cfg.d_bio):
                raise ShapeError(f"bio must be [B,{self.cfg.d_bio}], got {list(bio.shape)}")
            t = self.text_proj.forward(bio, train)
            B = x.shape[0]
            audio_idx = np.arange(B)
            text_idx = np.arange(B)
            if negatives is not None:
                negatives = np.asarray(negatives, dtype=np.int64).reshape(B, -1)
                rows, cols = np.nonzero(negatives >= 0)
                audio_idx = np.concatenate([audio_idx, rows])
                text_idx = np.concatenate([text_idx, negatives[rows, cols]])
            hm_all = self.fusion.forward(h_a[audio_idx], t[text_idx], train)
            out.t, out.h_m = t, hm_all[:B]
            head_in = out.h_m
            state.update(audio_idx=audio_idx, text_idx=text_idx, n_pairs=len(audio_idx))
            if negatives is not None:
                K = negatives.shape[1]
                pair_of = np.full((B, 1 + K), -1, dtype=np.int64)
                pair_of[:, 0] = np.arange(B)
                pair_of[rows, 1 + cols] = B + np.arange(len(rows))
                views_flat = self.view_norm.forward(hm_all, train)
                mask = pair_of >= 0
                views = np.zeros((B, 1 + K, self.cfg.encoder.embed_dim), dtype=self.dtype)
                views[mask] = views_flat[pair_of[mask]]
                out.views, out.view_mask = views, mask
                out.anchors = self.mmc_head.forward(t, train)
                state["pairs"] = pair_of
        else:
            head_in = h_a
        out.logits = self.classifier.forward(head_in, train)
        if self.ec_head is not None:
            out.z = self.ec_head.forward(head_in, train)
        self._state = state
        return out

    def backward(self, dlogits=None, dz=None, danchors=None, dviews=None) -> None:
        if self._state is None:
            raise RuntimeError("no cached activations (backward called before forward)")
        st = self._state
        dhead = 0.0
        if dlogits is not None:
            dhead = dhead + self.classifier.backward(np.asarray(dlogits, dtype=self.dtype))
        if dz is not None and self.ec_head is not None:
            dhead = dhead + self.ec_head.backward(np.asarray(dz, dtype=self.dtype))
        d_h = self.cfg.encoder.embed_dim
        if not self.cfg.uses_mmc:
            if not np.isscalar(dhead):
                self.encoder.backward(dhead)
            return
        B = st["batch"]
        dh_all = np.zeros((st["n_pairs"], d_h), dtype=self.dtype)
        if not np.isscalar(dhead):
            dh_all[:B] += dhead
        dt = np.zeros((B, d_h), dtype=self.dtype)
        if st["pairs"] is not None:
            if dviews is not None:
                pair_of = st["pairs"]
                mask = pair_of >= 0
                dflat = np.zeros_like(dh_all)
                np.add.at(dflat, pair_of[mask], np.asarray(dviews, dtype=self.dtype)[mask])
                dh_all += self.view_norm.backward(dflat)
            if danchors is not None:
                dt += self.mmc_head.backward(np.asarray(danchors, dtype=self.dtype))
        da_pairs, dt_pairs = self.fusion.backward(dh_all)
        da = np.zeros((B, d_h), dtype=self.dtype)
        np.add.at(da, st["audio_idx"], da_pairs)
        np.add.at(dt, st["text_idx"], dt_pairs)
        self.text_proj.backward(dt)
        self.encoder.backward(da)

    def zero_grad(self) -> None:
        self.params.zero_grad()

    # -- inference helpers ----------------------------------------------------

    def predict_logits(self, x: np.ndarray, bio: np.ndarray | None = None) -> np.ndarray:
        return self.forward(x, bio, train=False).logits

    def embeddings(self, x: np.ndarray, bio: np.ndarray | None = None) -> dict[str, np.ndarray]:
        out = self.forward(x, bio, train=False)
        emb = {"h_a": out.h_a}
        if out.h_m is not None:
            emb["h_m"] = out.h_m
            emb["t"] = out.t
        if out.z is not None:
            emb["z"] = out.z
        return emb

    # -- persistence ----------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {k: p.value for k, p in self.params.items()}
        for name, layer, key in self._buffers():
            arrays[name] = layer.buffers[key]
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if arrays[k].shape != p.value.shape:
                raise ShapeError(f"{k}: checkpoint shape {arrays[k].shape} != model shape {p.value.shape}")
            p.value[...] = arrays[k]
        for name, layer, key in self._buffers():
            layer.buffers[key] = np.asarray(arrays[name], dtype=self.dtype).copy()

    def copy_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def layer_specs(self) -> dict:
        specs = {"encoder": self.encoder.spec(), "classifier": self.classifier.spec()}
        if self.ec_head is not None:
            specs["ec_head"] = self.ec_head.spec()
        if self.cfg.uses_mmc:
            specs["text_proj"] = self.text_proj.spec()
            specs["fusion"] = self.fusion.blocks.spec()
            specs["mmc_head"] = self.mmc_head.spec()
        return specs

    def save(self, path, extra: dict | None = None) -> None:
        header = {"model": self.cfg.to_dict(), "layers": self.layer_specs()}
        if extra:
            header.update(extra)
        save_checkpoint(path, header, self.state_arrays())

    @classmethod
    def load(cls, path) -> tuple["EraModel", dict]:
        header, arrays = load_checkpoint(path)
        model = cls(ModelConfig.from_dict(header["model"]))
        model.load_state_arrays(arrays)
        return model, header

    def set_dtype(self, dtype) -> None:
        """Cast every parameter and buffer (e.g. to float64 for gradient checks)."""
        self.dtype = np.dtype(dtype)
        self.cfg.dtype = self.dtype.name
        for seq in (self.encoder, self.ec_head, self.mmc_head):
            if seq is not None:
                seq.astype(self.dtype)
        self.classifier.astype(self.dtype)
        if self.cfg.uses_mmc:
            self.text_proj.astype(self.dtype)
            for lin in (self.fusion.lift_a, self.fusion.lift_t, self.fusion.out):
                lin.astype(self.dtype)
            self.fusion.blocks.astype(self.dtype)
            m = self.fusion.modality
            m.value, m.grad = m.value.astype(self.dtype), m.grad.astype(self.dtype)


def build_model(cfg: ModelConfig, seed: int = 0) -> EraModel:
    return EraModel(cfg, seed)


def build_audio_cnn(enc: AudioEncoderConfig, seed: int = 0, dtype: str = "float32") -> EraModel:
    return EraModel(ModelConfig("audio-cnn", enc, dtype=dtype), seed)
