"""CMRCNet: ViT image encoder, projection heads, and the masked cross-modal
reconstruction branch.

Tensor names used below follow the method's notation:

========================  ==========================================
``f_img``                 ViT output, B x T x vit_dim
``f_img_proj``            pooled + projected image embedding, B x P
``f_gene``                projected gene embedding, B x P
``f_gene_tokens``         SNN-mapped expression, B x tokens x D
``f_img_masked``          mapped + masked image features, B x T x D
``f_att``                 initial cross-attention output
``f_fuse``                output of the two fusion blocks
``f_r``                   token-mean of ``f_fuse``, B x D
========================  ==========================================
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as tc
from .errors import ConfigError, ShapeError
from .rng import make_rng
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    vit_patch: int = 16
    vit_dim: int = 64
    vit_depth: int = 4
    vit_heads: int = 4
    vit_mlp_ratio: int = 4
    proj_dim: int = 64
    gene_dim: int = 64
    snn_hidden: int = 512
    recon_tokens: int = 8
    recon_dim: int = 64
    mask_rate: float = 0.5
    mask_mode: str = "element"
    recon_loss: str = "mse"
    recon_target: str = "image"
    fusion_heads: int = 8
    init_xattn_heads: int = 4
    proj_dropout: float = 0.1
    snn_dropout: float = 0.25
    detach_recon_target: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.vit_patch) ** 2 + 1

    @property
    def recon_enabled(self) -> bool:
        return self.recon_target != "off"

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        for name in ("image_size", "vit_patch", "vit_dim", "vit_depth", "vit_heads", "proj_dim", "gene_dim"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        need(self.image_size % self.vit_patch == 0, "image_size must be divisible by vit_patch")
        need(self.vit_dim % self.vit_heads == 0, "vit_dim must be divisible by vit_heads")
        need(0.0 <= self.mask_rate < 1.0, f"mask_rate must lie in [0, 1), got {self.mask_rate}")
        need(0.0 <= self.proj_dropout < 1.0, "proj_dropout must lie in [0, 1)")
        need(0.0 <= self.snn_dropout < 1.0, "snn_dropout must lie in [0, 1)")
        need(self.mask_mode in ("element", "token"), f"unknown mask_mode {self.mask_mode!r}")
        need(self.recon_loss in ("mse", "cosine"), f"unknown recon_loss {self.recon_loss!r}")
        need(self.recon_target in ("image", "gene", "off"), f"unknown recon_target {self.recon_target!r}")
        if self.recon_enabled:
            need(
                self.snn_hidden == self.recon_tokens * self.recon_dim,
                f"snn_hidden ({self.snn_hidden}) must equal recon_tokens*recon_dim "
                f"({self.recon_tokens}*{self.recon_dim})",
            )
            need(self.recon_dim == self.proj_dim, "recon_dim must equal proj_dim (F_r is compared to a projected embedding)")
            need(self.recon_dim % self.init_xattn_heads == 0, "recon_dim must be divisible by init_xattn_heads")
            need(self.recon_dim % self.fusion_heads == 0, "recon_dim must be divisible by fusion_heads")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        base = dict(
            image_size=224, vit_patch=32, vit_dim=768, vit_depth=12, vit_heads=12,
            proj_dim=256, snn_hidden=2048, recon_tokens=8, recon_dim=256,
        )
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------- layers


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    x = rng.standard_normal(shape)
    while True:
        bad = np.abs(x) > 2.0
        if not bad.any():
            break
        x[bad] = rng.standard_normal(int(bad.sum()))
    return (x * std).astype(dtype)


class Module:
    """Minimal parameter container; attributes that are parameters, modules
    or lists of modules are discovered in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{name}.{i}.")


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng, dtype, bias: bool = True):
        self.weight = Tensor(_trunc_normal(rng, (n_in, n_out), 0.02, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype), requires_grad=True) if bias else None

    def __call__(self, x) -> Tensor:
        return tc.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype):
        self.weight = Tensor(np.ones(dim, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return tc.layer_norm(x, self.weight, self.bias)


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return tc.transpose(tc.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return tc.reshape(tc.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int, return_weights: bool = False):
    """Multi-head scaled dot-product attention on already-projected q, k, v."""
    d = q.shape[-1]
    if d % heads:
        raise ConfigError(f"width {d} not divisible by {heads} heads")
    dk = d // heads
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = tc.scale(tc.matmul(qh, tc.transpose(kh)), 1.0 / math.sqrt(dk))
    weights = tc.softmax(scores, axis=-1)
    out = merge_heads(tc.matmul(weights, vh))
    return (out, weights) if return_weights else out


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng, dtype):
        if dim % heads:
            raise ConfigError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        d = x.shape[-1]
        qkv = self.qkv(x)
        q = tc.slice_last(qkv, 0, d)
        k = tc.slice_last(qkv, d, 2 * d)
        v = tc.slice_last(qkv, 2 * d, 3 * d)
        return self.proj(attend(q, k, v, self.heads))


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng, dtype):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(tc.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng, dtype):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = SelfAttention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, dim * mlp_ratio, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = tc.add(x, self.attn(self.norm1(x)))
        return tc.add(x, self.mlp(self.norm2(x)))


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """B x H x W x C -> B x (H/p * W/p) x (p*p*C), patches in row-major order."""
    b, h, w, c = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * c)


class VisionTransformer(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.patch = cfg.vit_patch
        self.image_size = cfg.image_size
        t = cfg.num_tokens
        self.patch_embed = Linear(cfg.vit_patch * cfg.vit_patch * 3, cfg.vit_dim, rng, dtype)
        self.cls_token = Tensor(_trunc_normal(rng, (1, 1, cfg.vit_dim), 0.02, dtype), requires_grad=True)
        self.pos_embed = Tensor(_trunc_normal(rng, (1, t, cfg.vit_dim), 0.02, dtype), requires_grad=True)
        self.blocks = [Block(cfg.vit_dim, cfg.vit_heads, cfg.vit_mlp_ratio, rng, dtype) for _ in range(cfg.vit_depth)]
        self.norm = LayerNorm(cfg.vit_dim, dtype)

    def __call__(self, images: np.ndarray) -> Tensor:
        if images.ndim != 4 or images.shape[1:] != (self.image_size, self.image_size, 3):
            raise ShapeError(
                f"expected patches of shape B x {self.image_size} x {self.image_size} x 3, got {images.shape}"
            )
        tokens = self.patch_embed(Tensor(patchify(images.astype(self.cls_token.dtype, copy=False), self.patch)))
        cls = tc.broadcast_to(self.cls_token, (images.shape[0], 1, self.cls_token.shape[-1]))
        x = tc.add(tc.concat([cls, tokens], axis=1), self.pos_embed)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class ProjectionHead(Module):
    """FC -> GELU -> FC -> dropout -> LayerNorm."""

    def __init__(self, n_in: int, n_out: int, dropout: float, rng, dtype):
        self.fc1 = Linear(n_in, n_out, rng, dtype)
        self.fc2 = Linear(n_out, n_out, rng, dtype)
        self.norm = LayerNorm(n_out, dtype)
        self.dropout = dropout

    def __call__(self, x, train: bool = False, rng=None) -> Tensor:
        h = self.fc2(tc.gelu(self.fc1(x)))
        h = tc.dropout(h, self.dropout, rng, train)
        return self.norm(h)


class SNNMapper(Module):
    """FC -> SELU -> AlphaDropout, reshaped into gene tokens."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.fc = Linear(cfg.gene_dim, cfg.snn_hidden, rng, dtype)
        self.tokens = cfg.recon_tokens
        self.dim = cfg.recon_dim
        self.rate = cfg.snn_dropout

    def __call__(self, expr, train: bool = False, rng=None) -> Tensor:
        h = tc.alpha_dropout(tc.selu(self.fc(expr)), self.rate, rng, train)
        return tc.reshape(h, (h.shape[0], self.tokens, self.dim))


class CrossAttention(Module):
    """Queries from the image stream, keys/values from gene tokens.

    With ``residual_value`` an image-side value map is added to the attended
    output, so the result never depends on the gene stream alone.
    """

    def __init__(self, dim: int, heads: int, rng, dtype, residual_value: bool = False):
        if dim % heads:
            raise ConfigError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(dim, dim, rng, dtype, bias=False)
        self.wk = Linear(dim, dim, rng, dtype, bias=False)
        self.wv = Linear(dim, dim, rng, dtype, bias=False)
        self.wo = Linear(dim, dim, rng, dtype, bias=False)
        self.wv_img = Linear(dim, dim, rng, dtype, bias=False) if residual_value else None

    def __call__(self, x_img: Tensor, gene_tokens: Tensor, return_weights: bool = False):
        q = self.wq(x_img)
        k = self.wk(gene_tokens)
        v = self.wv(gene_tokens)
        att, w = attend(q, k, v, self.heads, return_weights=True)
        out = self.wo(att)
        if self.wv_img is not None:
            out = tc.add(out, self.wv_img(x_img))
        return (out, w) if return_weights else out


class FusionBlock(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.block = Block(cfg.recon_dim, cfg.fusion_heads, cfg.vit_mlp_ratio, rng, dtype)
        self.xattn = CrossAttention(cfg.recon_dim, cfg.fusion_heads, rng, dtype, residual_value=True)

    def __call__(self, x: Tensor, gene_tokens: Tensor) -> Tensor:
        return self.xattn(self.block(x), gene_tokens)


def mask_features(x, rate: float, rng: np.random.Generator, mode: str = "element"):
    """Zero a fixed fraction of each sample's feature grid.

    Element mode zeroes exactly ``round(rate * T * D)`` scalar entries per
    batch element; token mode zeroes ``round(rate * T)`` whole tokens.
    Returns ``(masked, mask)`` where ``mask`` is True at zeroed entries.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"mask rate must lie in [0, 1), got {rate}")
    x = tc.as_tensor(x)
    b, t, d = x.shape
    mask = np.zeros((b, t, d), dtype=bool)
    if mode == "element":
        n = int(math.floor(rate * t * d + 0.5))
        for i in range(b):
            mask[i].reshape(-1)[rng.permutation(t * d)[:n]] = True
    elif mode == "token":
        n = int(math.floor(rate * t + 0.5))
        for i in range(b):
            mask[i, rng.permutation(t)[:n], :] = True
    else:
        raise ConfigError(f"unknown mask mode {mode!r}")
    if not mask.any():
        return x, mask
    return tc.where_mask(x, ~mask), mask


@dataclass
class ForwardOutputs:
    f_img: Tensor
    f_img_proj: Tensor
    f_gene: Tensor
    f_gene_tokens: Tensor | None = None
    f_img_mapped: Tensor | None = None
    f_img_masked: Tensor | None = None
    mask: np.ndarray | None = None
    f_att: Tensor | None = None
    f_fuse: Tensor | None = None
    f_r: Tensor | None = None


class CmrcModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        rng = make_rng(seed)
        self.vit = VisionTransformer(cfg, rng, dtype)
        self.img_head = ProjectionHead(cfg.vit_dim, cfg.proj_dim, cfg.proj_dropout, rng, dtype)
        self.gene_head = ProjectionHead(cfg.gene_dim, cfg.proj_dim, cfg.proj_dropout, rng, dtype)
        if cfg.recon_enabled:
            self.recon_in = Linear(cfg.vit_dim, cfg.recon_dim, rng, dtype)
            self.snn = SNNMapper(cfg, rng, dtype)
            self.init_xattn = CrossAttention(cfg.recon_dim, cfg.init_xattn_heads, rng, dtype)
            self.fusion = [FusionBlock(cfg, rng, dtype) for _ in range(2)]

    @property
    def dtype(self):
        return self.vit.cls_token.dtype

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())

    def astype(self, dtype) -> "CmrcModel":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ConfigError(f"parameter set mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ConfigError(f"{name}: stored shape {arr.shape} != expected {p.shape}")
            p.data = np.asarray(arr, dtype=p.dtype).copy()

    # -- the operations of the forward pass

    def encode_image(self, patches: np.ndarray) -> Tensor:
        return self.vit(np.asarray(patches))

    def project_image(self, f_img, train: bool = False, rng=None) -> Tensor:
        return self.img_head(tc.mean(f_img, axis=1), train, rng)

    def encode_genes(self, expr, train: bool = False, rng=None) -> Tensor:
        expr = tc.as_tensor(np.asarray(expr.data if isinstance(expr, Tensor) else expr, dtype=self.dtype))
        if expr.ndim != 2 or expr.shape[1] != self.cfg.gene_dim:
            raise ShapeError(f"expected expression of shape B x {self.cfg.gene_dim}, got {expr.shape}")
        return self.gene_head(expr, train, rng)

    def snn_map(self, expr, train: bool = False, rng=None) -> Tensor:
        if not self.cfg.recon_enabled:
            raise ConfigError("reconstruction branch disabled (recon_target='off')")
        expr = tc.as_tensor(np.asarray(expr.data if isinstance(expr, Tensor) else expr, dtype=self.dtype))
        return self.snn(expr, train, rng)

    def embed_images(self, patches: np.ndarray) -> np.ndarray:
        """Eval-mode image embeddings (B x proj_dim) for retrieval."""
        return self.project_image(self.encode_image(patches)).data

    def embed_genes(self, expr: np.ndarray) -> np.ndarray:
        return self.encode_genes(expr).data

    def forward(self, patches: np.ndarray, expr, mode: str = "train", rng=None) -> ForwardOutputs:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        patches = np.asarray(patches)
        if patches.shape[0] != np.shape(expr.data if isinstance(expr, Tensor) else expr)[0]:
            raise ShapeError("patch and expression batch sizes differ")
        train = mode == "train"
        if rng is None:
            rng = make_rng(0)
        cfg = self.cfg
        f_img = self.encode_image(patches)
        f_img_proj = self.project_image(f_img, train, rng)
        f_gene = self.encode_genes(expr, train, rng)
        out = ForwardOutputs(f_img=f_img, f_img_proj=f_img_proj, f_gene=f_gene)
        if not cfg.recon_enabled:
            return out
        out.f_gene_tokens = self.snn_map(expr, train, rng)
        out.f_img_mapped = self.recon_in(f_img)
        out.f_img_masked, out.mask = mask_features(out.f_img_mapped, cfg.mask_rate, rng, cfg.mask_mode)
        out.f_att = self.init_xattn(out.f_img_masked, out.f_gene_tokens)
        x = out.f_att
        for blk in self.fusion:
            x = blk(x, out.f_gene_tokens)
        out.f_fuse = x
        out.f_r = tc.mean(x, axis=1)
        return out


def model_forward(model: CmrcModel, patches, expr, mode: str = "train", rng=None) -> ForwardOutputs:
    return model.forward(patches, expr, mode, rng)
