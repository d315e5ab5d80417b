"""Dual U-Net backbone.

Two structurally identical U-Nets built from one config: a reference net
(feature extractor, clean product in, hidden states out) and a generation
net (denoiser) whose input conv takes one extra channel for the placement
mask. Attention blocks fuse the generation stream with reference tokens
captured at the matching site; a consumption counter enforces that every
site uses its pyramid entry exactly once per forward.

Parameters live in a per-net name->Tensor store so checkpointing, gradient
checking (which swaps in float64 twins), and the trainable/frozen partition
all work off plain names.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import Tensor
from .errors import InvalidConfigError, InvalidShapeError, WiringError
from .fusion import FusionSite, fused_attention, merge_heads, split_heads


@dataclass
class UNetConfig:
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    blocks_per_level: int = 1
    attention_levels: tuple | None = None  # None -> attention at every level
    latent_channels: int = 3
    time_dim: int = 64
    n_heads: int = 4
    token_dim: int = 16
    scene_vocab: int = 10
    scene_tokens_per_sample: int = 3
    ff_mult: int = 2
    norm_groups: int = 8

    def levels(self) -> int:
        return len(self.channel_mults)

    def channels_at(self, level: int) -> int:
        return self.base_channels * self.channel_mults[level]

    def attn_at(self, level: int) -> bool:
        return self.attention_levels is None or level in tuple(self.attention_levels)

    def validate(self):
        if self.base_channels < 1 or self.blocks_per_level < 1:
            raise InvalidConfigError("base_channels and blocks_per_level must be >= 1")
        for lv in range(self.levels()):
            c = self.channels_at(lv)
            if self.attn_at(lv) and c % self.n_heads:
                raise InvalidConfigError(
                    f"head dim must divide channels: level {lv} has {c} channels, {self.n_heads} heads"
                )
        if self.time_dim % 2:
            raise InvalidConfigError("time_dim must be even")


def norm_group_count(channels: int, preferred: int = 8) -> int:
    """preferred groups, or `channels` when the channel count is smaller."""
    g = preferred if channels >= preferred else channels
    if channels % g:
        raise InvalidConfigError(f"{g} norm groups do not divide {channels} channels")
    return g


def sinusoidal_embedding(t: np.ndarray, dim: int, dtype) -> np.ndarray:
    """Standard sin/cos positional features for integer timesteps."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / max(half - 1, 1))
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    return emb.astype(dtype)


class ParamStore:
    """Flat name -> Tensor map; layers read through it on every access so a
    whole parameter set can be swapped (checkpoint load, f64 grad check)."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.rng = rng
        self.dtype = dtype
        self._d: dict[str, Tensor] = {}

    def add(self, name: str, arr: np.ndarray) -> str:
        if name in self._d:
            raise WiringError(f"duplicate parameter name {name}")
        self._d[name] = Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True)
        return name

    def __getitem__(self, name: str) -> Tensor:
        return self._d[name]

    def __contains__(self, name):
        return name in self._d

    def names(self):
        return list(self._d)

    def tensors(self) -> dict[str, Tensor]:
        return dict(self._d)

    def load_tensors(self, tensors: dict[str, Tensor]):
        for name, t in tensors.items():
            if name not in self._d:
                raise WiringError(f"unknown parameter name {name}")
            self._d[name] = t

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True):
        for name, arr in arrays.items():
            if name not in self._d:
                raise WiringError(f"unknown parameter name {name}")
            cur = self._d[name]
            if cur.data.shape != arr.shape:
                raise WiringError(f"shape mismatch loading {name}: {cur.data.shape} vs {arr.shape}")
            cur.data = np.asarray(arr, dtype=self.dtype)
        if strict:
            missing = set(self._d) - set(arrays)
            if missing:
                raise WiringError(f"missing parameters in load: {sorted(missing)[:4]}...")


# ---------------------------------------------------------------------------
# layers (thin name-holders; parameters live in the store)


class _Conv:
    def __init__(self, st: ParamStore, name, cin, cout, k=3, stride=1, zero=False):
        self.st, self.stride, self.pad = st, stride, k // 2
        std = math.sqrt(2.0 / (cin * k * k))
        w = np.zeros((cout, cin, k, k)) if zero else st.rng.standard_normal((cout, cin, k, k)) * std
        self.w = st.add(f"{name}.w", w)
        self.b = st.add(f"{name}.b", np.zeros(cout))

    def __call__(self, x):
        return ops.conv2d(x, self.st[self.w], self.st[self.b], self.stride, self.pad)


class _Dense:
    def __init__(self, st: ParamStore, name, din, dout, bias=True):
        self.st = st
        std = 1.0 / math.sqrt(din)
        self.w = st.add(f"{name}.w", st.rng.standard_normal((din, dout)) * std)
        self.b = st.add(f"{name}.b", np.zeros(dout)) if bias else None

    def __call__(self, x):
        y = ops.matmul(x, self.st[self.w])
        return ops.add(y, self.st[self.b]) if self.b else y


class _GroupNorm:
    def __init__(self, st: ParamStore, name, channels, preferred_groups):
        self.st = st
        self.groups = norm_group_count(channels, preferred_groups)
        self.g = st.add(f"{name}.g", np.ones(channels))
        self.b = st.add(f"{name}.b", np.zeros(channels))

    def __call__(self, x):
        return ops.group_norm(x, self.st[self.g], self.st[self.b], self.groups)


class _LayerNorm:
    def __init__(self, st: ParamStore, name, dim):
        self.st = st
        self.g = st.add(f"{name}.g", np.ones(dim))
        self.b = st.add(f"{name}.b", np.zeros(dim))

    def __call__(self, x):
        return ops.layer_norm(x, self.st[self.g], self.st[self.b])


class _ResBlock:
    def __init__(self, st, name, cin, cout, tdim, groups):
        self.gn1 = _GroupNorm(st, f"{name}.gn1", cin, groups)
        self.conv1 = _Conv(st, f"{name}.conv1", cin, cout)
        self.temb = _Dense(st, f"{name}.temb", tdim, cout)
        self.gn2 = _GroupNorm(st, f"{name}.gn2", cout, groups)
        self.conv2 = _Conv(st, f"{name}.conv2", cout, cout)
        self.skip = _Conv(st, f"{name}.skip", cin, cout, k=1) if cin != cout else None

    def __call__(self, x, temb):
        h = self.conv1(ops.silu(self.gn1(x)))
        tproj = self.temb(ops.silu(temb))
        b, c = tproj.data.shape
        h = ops.add(h, ops.reshape(tproj, (b, c, 1, 1)))
        h = self.conv2(ops.silu(self.gn2(h)))
        return ops.add(h, self.skip(x) if self.skip else x)


class _SceneAttention:
    """Cross-attention from spatial tokens onto the scene token embeddings."""

    def __init__(self, st, name, channels, token_dim, n_heads):
        self.st, self.n_heads = st, n_heads
        sq = 1.0 / math.sqrt(channels)
        sk = 1.0 / math.sqrt(token_dim)
        self.wq = st.add(f"{name}.wq", st.rng.standard_normal((channels, channels)) * sq)
        self.wk = st.add(f"{name}.wk", st.rng.standard_normal((token_dim, channels)) * sk)
        self.wv = st.add(f"{name}.wv", st.rng.standard_normal((token_dim, channels)) * sk)
        self.wo = st.add(f"{name}.wo", st.rng.standard_normal((channels, channels)) * sq)

    def __call__(self, x, scene_emb):
        q = split_heads(ops.matmul(x, self.st[self.wq]), self.n_heads)
        k = split_heads(ops.matmul(scene_emb, self.st[self.wk]), self.n_heads)
        v = split_heads(ops.matmul(scene_emb, self.st[self.wv]), self.n_heads)
        out = merge_heads(ops.scaled_dot_attention(q, k, v))
        return ops.matmul(out, self.st[self.wo])


class _TransformerBlock:
    """Pre-norm: fused attention -> scene cross-attention -> feed-forward,
    each residual. The reference pass runs it with no reference tokens and
    no scene tokens (fusion degenerates to self-attention, scene sublayer
    is skipped)."""

    def __init__(self, st, name, channels, cfg: UNetConfig):
        self.name = name
        self.st = st
        self.channels = channels
        self.n_heads = cfg.n_heads
        self.fusion_strength = 1.0
        self.ln1 = _LayerNorm(st, f"{name}.ln1", channels)
        sq = 1.0 / math.sqrt(channels)
        for p in ("wq", "wk", "wv", "wkref", "wvref", "wo"):
            st.add(f"{name}.afm.{p}", st.rng.standard_normal((channels, channels)) * sq)
        self.ln2 = _LayerNorm(st, f"{name}.ln2", channels)
        self.scene = _SceneAttention(st, f"{name}.scene", channels, cfg.token_dim, cfg.n_heads)
        self.ln3 = _LayerNorm(st, f"{name}.ln3", channels)
        self.ff1 = _Dense(st, f"{name}.ff.fc1", channels, cfg.ff_mult * channels)
        self.ff2 = _Dense(st, f"{name}.ff.fc2", cfg.ff_mult * channels, channels)

    def site(self) -> FusionSite:
        st, n = self.st, self.name
        return FusionSite(wq=st[f"{n}.afm.wq"], wk=st[f"{n}.afm.wk"], wv=st[f"{n}.afm.wv"],
                          wkref=st[f"{n}.afm.wkref"], wvref=st[f"{n}.afm.wvref"],
                          wo=st[f"{n}.afm.wo"], n_heads=self.n_heads,
                          strength=self.fusion_strength)

    def __call__(self, x, ref_tokens, scene_emb, capture_to=None):
        b, c, h, w = x.data.shape
        tokens = ops.transpose(ops.reshape(x, (b, c, h * w)), (0, 2, 1))
        normed = self.ln1(tokens)
        if capture_to is not None:
            capture_to[self.name] = normed
        tokens = ops.add(tokens, fused_attention(normed, ref_tokens, self.site()))
        if scene_emb is not None:
            tokens = ops.add(tokens, self.scene(self.ln2(tokens), scene_emb))
        ff = self.ff2(ops.silu(self.ff1(self.ln3(tokens))))
        tokens = ops.add(tokens, ff)
        return ops.reshape(ops.transpose(tokens, (0, 2, 1)), (b, c, h, w))


# ---------------------------------------------------------------------------


class UNet:
    """One U-Net stream; `in_channels` differs between the pair."""

    def __init__(self, cfg: UNetConfig, in_channels: int, rng: np.random.Generator,
                 zero_out: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.in_channels = in_channels
        self.store = ParamStore(rng)
        st = self.store
        g = cfg.norm_groups
        L = cfg.levels()

        self.in_conv = _Conv(st, "in_conv", in_channels, cfg.base_channels)
        self.time_fc1 = _Dense(st, "time.fc1", cfg.time_dim, cfg.time_dim)
        self.time_fc2 = _Dense(st, "time.fc2", cfg.time_dim, cfg.time_dim)
        st.add("scene_embed.table",
               rng.standard_normal((cfg.scene_vocab, cfg.token_dim)) / math.sqrt(cfg.token_dim))

        self.down, self.down_tfm = [], {}
        ch = cfg.base_channels
        for lv in range(L):
            cout = cfg.channels_at(lv)
            blocks = []
            for j in range(cfg.blocks_per_level):
                blocks.append(_ResBlock(st, f"down{lv}.res{j}", ch if j == 0 else cout,
                                        cout, cfg.time_dim, g))
            self.down.append(blocks)
            if cfg.attn_at(lv):
                self.down_tfm[lv] = _TransformerBlock(st, f"down{lv}.tfm", cout, cfg)
            ch = cout

        self.mid_res0 = _ResBlock(st, "mid.res0", ch, ch, cfg.time_dim, g)
        self.mid_tfm = _TransformerBlock(st, "mid.tfm", ch, cfg)
        self.mid_res1 = _ResBlock(st, "mid.res1", ch, ch, cfg.time_dim, g)

        self.up, self.up_tfm = [], {}
        for lv in reversed(range(L)):
            cskip = cfg.channels_at(lv)
            cout = cfg.channels_at(lv)
            blocks = [_ResBlock(st, f"up{lv}.res0", ch + cskip, cout, cfg.time_dim, g)]
            self.up.append((lv, blocks))
            if cfg.attn_at(lv):
                self.up_tfm[lv] = _TransformerBlock(st, f"up{lv}.tfm", cout, cfg)
            ch = cout

        self.out_gn = _GroupNorm(st, "out.gn", ch, g)
        self.out_conv = _Conv(st, "out.conv", ch, cfg.latent_channels, zero=zero_out)

        self.site_names = [f"down{lv}.tfm" for lv in range(L) if cfg.attn_at(lv)]
        self.site_names.append("mid.tfm")
        self.site_names += [f"up{lv}.tfm" for lv in reversed(range(L)) if cfg.attn_at(lv)]

    # -- introspection ------------------------------------------------------

    def blocks_with_attention(self):
        out = {}
        for lv, blk in self.down_tfm.items():
            out[blk.name] = blk
        out[self.mid_tfm.name] = self.mid_tfm
        for lv, blk in self.up_tfm.items():
            out[blk.name] = blk
        return out

    def set_fusion_strength(self, value: float):
        for blk in self.blocks_with_attention().values():
            if value < 0:
                raise InvalidConfigError(f"fusion strength must be >= 0, got {value}")
            blk.fusion_strength = float(value)

    def fusion_strengths(self):
        return {n: b.fusion_strength for n, b in self.blocks_with_attention().items()}

    @property
    def dtype(self):
        return self.store["in_conv.w"].data.dtype

    # -- forward ------------------------------------------------------------

    def _check_spatial(self, x):
        L = self.cfg.levels()
        h, w = x.data.shape[2], x.data.shape[3]
        div = 2 ** (L - 1)
        if h % div or w % div:
            raise InvalidShapeError(f"spatial size {h}x{w} not divisible by {div}")

    def _time_features(self, t):
        emb = Tensor(sinusoidal_embedding(t, self.cfg.time_dim, self.dtype))
        return self.time_fc2(ops.silu(self.time_fc1(emb)))

    def _scene_features(self, scene_ids, batch):
        if scene_ids is None:
            return None
        ids = np.asarray(scene_ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[0] != batch:
            raise InvalidShapeError(f"scene ids must be (B, k), got {ids.shape}")
        return ops.embedding(self.store["scene_embed.table"], ids)

    def forward(self, x: Tensor, t, scene_ids=None, pyramid: dict | None = None,
                capture: bool = False):
        """Run the net. With capture=True, returns (eps_hat, captured dict of
        pre-projection tokens per attention site); otherwise consumes
        `pyramid` entries (exactly one per site) and returns eps_hat."""
        if x.data.shape[1] != self.in_channels:
            raise InvalidShapeError(f"expected {self.in_channels} input channels, got {x.data.shape[1]}")
        self._check_spatial(x)
        captured = {} if capture else None
        consumed = []

        def ref_for(name):
            if capture or pyramid is None:
                return None
            if name not in pyramid:
                raise WiringError(f"pyramid entry missing for attention site {name}")
            consumed.append(name)
            return pyramid[name]

        temb = self._time_features(np.asarray(t))
        scene = self._scene_features(scene_ids, x.data.shape[0])
        h = self.in_conv(x)
        skips = []
        for lv, blocks in enumerate(self.down):
            for blk in blocks:
                h = blk(h, temb)
            if lv in self.down_tfm:
                tb = self.down_tfm[lv]
                h = tb(h, ref_for(tb.name), scene, capture_to=captured)
            skips.append(h)
            if lv < len(self.down) - 1:
                h = ops.avgpool2x(h)

        h = self.mid_res0(h, temb)
        h = self.mid_tfm(h, ref_for(self.mid_tfm.name), scene, capture_to=captured)
        h = self.mid_res1(h, temb)

        for lv, blocks in self.up:
            h = ops.concat([h, skips[lv]], axis=1)
            for blk in blocks:
                h = blk(h, temb)
            if lv in self.up_tfm:
                tb = self.up_tfm[lv]
                h = tb(h, ref_for(tb.name), scene, capture_to=captured)
            if lv > 0:
                h = ops.upsample2x(h)

        out = self.out_conv(ops.silu(self.out_gn(h)))
        if capture:
            return out, captured
        if pyramid is not None:
            missing = [n for n in self.site_names if n not in consumed]
            extra = [n for n in pyramid if n not in self.site_names]
            if missing or extra:
                raise WiringError(f"pyramid mismatch: missing {missing}, extra {extra}")
        return out


# ---------------------------------------------------------------------------


def concat_mask_input(z_t: Tensor, mask_latent: Tensor) -> Tensor:
    """Channel-concatenate the placement mask after the latent channels."""
    if z_t.data.shape[0] != mask_latent.data.shape[0] or z_t.data.shape[2:] != mask_latent.data.shape[2:]:
        raise InvalidShapeError(
            f"mask spatial dims {mask_latent.data.shape} do not match latent {z_t.data.shape}"
        )
    if mask_latent.data.shape[1] != 1:
        raise InvalidShapeError("mask must have a single channel")
    if mask_latent.data.min() < 0.0 or mask_latent.data.max() > 1.0:
        raise InvalidShapeError("mask values must lie in [0, 1]")
    return ops.concat([z_t, mask_latent], axis=1)


def downsample_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Area-average a (B,1,H,W) mask down to (B,1,h,w)."""
    b, c, H, W = mask.shape
    if H % h or W % w:
        raise InvalidConfigError(f"mask size {H}x{W} not an integer multiple of {h}x{w}")
    fh, fw = H // h, W // w
    return mask.reshape(b, c, h, fh, w, fw).mean(axis=(3, 5))


class DualUNet:
    """Reference + generation U-Net pair with the trainable/frozen partition."""

    PARTITION_MODES = ("paper-faithful", "full")

    def __init__(self, cfg: UNetConfig, seed: int = 0, zero_out: bool = True):
        self.cfg = cfg
        root = np.random.SeedSequence(seed)
        ref_rng, gen_rng = (np.random.default_rng(s) for s in root.spawn(2))
        self.ref = UNet(cfg, cfg.latent_channels, ref_rng, zero_out=zero_out)
        self.gen = UNet(cfg, cfg.latent_channels + 1, gen_rng, zero_out=zero_out)
        self.partition_mode = "full"

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out = {f"ref.{k}": v for k, v in self.ref.store.tensors().items()}
        out.update({f"gen.{k}": v for k, v in self.gen.store.tensors().items()})
        return out

    def load_param_tensors(self, tensors: dict[str, Tensor]):
        self.ref.store.load_tensors({k[4:]: v for k, v in tensors.items() if k.startswith("ref.")})
        self.gen.store.load_tensors({k[4:]: v for k, v in tensors.items() if k.startswith("gen.")})

    def load_param_arrays(self, arrays: dict[str, np.ndarray], strict=True):
        self.ref.store.load_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("ref.")}, strict)
        self.gen.store.load_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("gen.")}, strict)

    def count_params(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def afm_param_names(self):
        return [n for n in self.parameters() if n.startswith("gen.") and ".afm." in n]

    # -- partition ----------------------------------------------------------

    def partition(self, mode: str) -> dict[str, bool]:
        """Map every parameter name to its trainable tag."""
        if mode not in self.PARTITION_MODES:
            raise InvalidConfigError(f"unknown partition mode {mode!r}")
        tags = {}
        for name in self.parameters():
            if mode == "full":
                tags[name] = True
            else:
                tags[name] = (
                    name.startswith("ref.")
                    or name.startswith("gen.in_conv.")
                    or (name.startswith("gen.") and ".afm." in name)
                )
        return tags

    def apply_partition(self, mode: str) -> dict[str, bool]:
        tags = self.partition(mode)
        for name, t in self.parameters().items():
            t.requires_grad = tags[name]
        self.partition_mode = mode
        return tags

    # -- forward passes -----------------------------------------------------

    def ref_forward(self, product: Tensor) -> dict[str, Tensor]:
        """Single pass over the clean product latent at timestep index 0;
        returns the pre-projection token pyramid keyed by attention site."""
        t0 = np.zeros(product.data.shape[0], dtype=np.int64)
        _, pyramid = self.ref.forward(product, t0, scene_ids=None, capture=True)
        return pyramid

    def gen_forward(self, z_t: Tensor, mask_latent: Tensor, t, scene_ids,
                    pyramid: dict[str, Tensor]) -> Tensor:
        x = concat_mask_input(z_t, mask_latent)
        return self.gen.forward(x, t, scene_ids=scene_ids, pyramid=pyramid)

    def set_fusion_strength(self, value: float):
        self.gen.set_fusion_strength(value)

    def fusion_strengths(self):
        return self.gen.fusion_strengths()
