"""End-to-end network: convolutional stem with a miniature feature-pyramid
merge, three agglomerative encoder stages plus global contextual blocks,
a query-based decoder (stacked transformer layers or the MLP ablation), and
the HOI prediction heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .agglomerate import agglomerate
from .attention import (FeedForward, GlobalBlock, IwinBlock, LayerNorm,
                        MultiHeadAttention, _init_linear, grid_coords,
                        sincos_encoding)
from .config import RunConfig
from .core import (ContractError, Tensor, broadcast_to, conv2d, linear,
                   mean_, mul, relu, reshape, sigmoid, transpose, concat)
from .windowing import predict_offsets

QUERY_DIM = 256

BLOCK_NUMBERS = {"S": (1, 1, 1, 1), "B": (1, 1, 3, 2)}


@dataclass
class ModelConfig:
    variant: str = "S"
    d_c: int = 32
    num_queries: int = 10
    decoder: str = "stacked"
    decoder_depth: int = 6
    num_object_classes: int = 8
    num_interaction_classes: int = 4
    scale_sets: tuple = ((5, 7), (5, 7), (3, 5))

    def __post_init__(self):
        if self.variant not in BLOCK_NUMBERS:
            raise ContractError(f"variant must be S or B, got {self.variant!r}")
        if self.decoder not in ("stacked", "mlp"):
            raise ContractError(f"decoder must be stacked or mlp, got {self.decoder!r}")
        if self.decoder == "stacked" and self.decoder_depth not in (2, 4, 6):
            raise ContractError(f"stacked decoder depth must be 2, 4 or 6, got {self.decoder_depth}")
        if len(self.scale_sets) != 3:
            raise ContractError("scale_sets needs one scale set per stage")

    @property
    def block_numbers(self) -> tuple[int, int, int, int]:
        return BLOCK_NUMBERS[self.variant]

    @classmethod
    def from_run_config(cls, rc: RunConfig) -> "ModelConfig":
        return cls(variant=rc.variant, d_c=rc.d_c, num_queries=rc.num_queries,
                   decoder=rc.decoder, decoder_depth=rc.decoder_depth,
                   num_object_classes=rc.num_object_classes,
                   num_interaction_classes=rc.num_interaction_classes,
                   scale_sets=rc.parsed_scale_sets())


@dataclass
class HoiPrediction:
    """One decoded query: boxes are (cx, cy, w, h) normalized to [0, 1]."""

    human_box: np.ndarray
    object_box: np.ndarray
    human_logits: np.ndarray        # 2-way; index 1 = human present
    object_logits: np.ndarray       # last index = no-object background
    interaction_logits: np.ndarray  # last index = no-interaction background


@dataclass
class PredictionSet:
    """Batched, differentiable head outputs; one prediction per query."""

    human_boxes: Tensor             # (B, N, 4)
    object_boxes: Tensor
    human_logits: Tensor            # (B, N, 2)
    object_logits: Tensor           # (B, N, K+1)
    interaction_logits: Tensor      # (B, N, R+1)

    @property
    def batch_size(self) -> int:
        return self.human_boxes.shape[0]

    @property
    def num_queries(self) -> int:
        return self.human_boxes.shape[1]

    def instances(self, b: int = 0) -> list[HoiPrediction]:
        """Detached per-query records for one image."""
        return [HoiPrediction(human_box=self.human_boxes.data[b, i].copy(),
                              object_box=self.object_boxes.data[b, i].copy(),
                              human_logits=self.human_logits.data[b, i].copy(),
                              object_logits=self.object_logits.data[b, i].copy(),
                              interaction_logits=self.interaction_logits.data[b, i].copy())
                for i in range(self.num_queries)]


def _init_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    fan_in = cin * k * k
    fan_out = cout * k * k
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(cout, cin, k, k))


class Stem:
    """Two stride-2 conv+ReLU layers (strides 2 and 4), a stride-8 layer, and a
    weighted merge of the upsampled stride-8 map into the stride-4 map."""

    def __init__(self, d_c: int, rng: np.random.Generator):
        c1 = max(d_c // 2, 8)
        self.w1 = Tensor(_init_conv(rng, c1, 3, 3), requires_grad=True)
        self.b1 = Tensor(np.zeros(c1), requires_grad=True)
        self.w2 = Tensor(_init_conv(rng, d_c, c1, 3), requires_grad=True)
        self.b2 = Tensor(np.zeros(d_c), requires_grad=True)
        self.w3 = Tensor(_init_conv(rng, d_c, d_c, 3), requires_grad=True)
        self.b3 = Tensor(np.zeros(d_c), requires_grad=True)
        self.merge_hi = Tensor(np.array(1.0), requires_grad=True)
        self.merge_lo = Tensor(np.array(1.0), requires_grad=True)

    def parameters(self):
        return {"conv1.w": self.w1, "conv1.b": self.b1,
                "conv2.w": self.w2, "conv2.b": self.b2,
                "conv3.w": self.w3, "conv3.b": self.b3,
                "merge.hi": self.merge_hi, "merge.lo": self.merge_lo}

    def __call__(self, img: Tensor) -> Tensor:
        batched = img.ndim == 4
        x = img if batched else img.reshape((1,) + img.shape)
        H, W = x.shape[2], x.shape[3]
        if H % 4 or W % 4:
            raise ContractError(f"stem needs extents divisible by 4, got {H}x{W}")
        s2 = relu(conv2d(x, self.w1, self.b1, stride=2, padding=1))
        s4 = relu(conv2d(s2, self.w2, self.b2, stride=2, padding=1))
        s8 = relu(conv2d(s4, self.w3, self.b3, stride=2, padding=1))
        up = core_upsample_crop(s8, H // 4, W // 4)
        out = mul(s4, self.merge_hi) + mul(up, self.merge_lo)
        return out if batched else out.reshape(out.shape[1:])


def core_upsample_crop(x: Tensor, h: int, w: int) -> Tensor:
    from .core import upsample2x
    up = upsample2x(x)
    if up.shape[-2] == h and up.shape[-1] == w:
        return up
    return up[:, :, :h, :w]


class Agglomeration:
    """Stage-ending 2x2 irregular-window fusion with its own offset predictor."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.offset_w = Tensor(np.zeros((2, dim, 3, 3)), requires_grad=True)
        self.offset_b = Tensor(np.zeros(2), requires_grad=True)
        self.w = Tensor(_init_linear(rng, 4 * dim, 2 * dim).T.copy(), requires_grad=True)

    def parameters(self):
        return {"offset.w": self.offset_w, "offset.b": self.offset_b, "w": self.w}

    def offsets(self, z: Tensor) -> Tensor:
        return predict_offsets(z, self.offset_w, self.offset_b)

    def __call__(self, z: Tensor, regular: bool = False) -> Tensor:
        f_o = None if regular else self.offsets(z)
        return agglomerate(z, f_o, self.w)


class DecoderLayer:
    """Self-attention over queries, cross-attention to memory, FFN; pre-LN."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, 8, rng)
        self.norm2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, 8, rng)
        self.norm3 = LayerNorm(dim)
        self.ffn = FeedForward(dim, 4 * dim, rng)

    def parameters(self):
        params = {}
        for prefix, module in (("norm1", self.norm1), ("self", self.self_attn),
                               ("norm2", self.norm2), ("cross", self.cross_attn),
                               ("norm3", self.norm3), ("ffn", self.ffn)):
            for k, v in module.parameters().items():
                params[f"{prefix}.{k}"] = v
        return params

    def __call__(self, q: Tensor, memory: Tensor, mem_pe: np.ndarray | None) -> Tensor:
        n = self.norm1(q)
        q = q + self.self_attn(n, n)
        q = q + self.cross_attn(self.norm2(q), memory, k_pe=mem_pe)
        q = q + self.ffn(self.norm3(q))
        return q


class MlpDecoder:
    """Ablation decoder: each query is concatenated with the mean-pooled
    memory and pushed through two dense layers with a ReLU."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden: int = 512):
        self.w1 = Tensor(_init_linear(rng, 2 * dim, hidden), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(_init_linear(rng, hidden, dim), requires_grad=True)
        self.b2 = Tensor(np.zeros(dim), requires_grad=True)

    def parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def __call__(self, q: Tensor, memory: Tensor) -> Tensor:
        B, N, C = q.shape
        pooled = mean_(memory, axis=1, keepdims=True)
        cat = concat([q, broadcast_to(pooled, (B, N, C))], axis=2)
        return linear(relu(linear(cat, self.w1, self.b1)), self.w2, self.b2)


class BoxMlp:
    """3-layer perceptron ending in sigmoid box coordinates."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.w1 = Tensor(_init_linear(rng, dim, dim), requires_grad=True)
        self.b1 = Tensor(np.zeros(dim), requires_grad=True)
        self.w2 = Tensor(_init_linear(rng, dim, dim), requires_grad=True)
        self.b2 = Tensor(np.zeros(dim), requires_grad=True)
        self.w3 = Tensor(_init_linear(rng, dim, 4), requires_grad=True)
        self.b3 = Tensor(np.zeros(4), requires_grad=True)

    def parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(linear(x, self.w1, self.b1))
        h = relu(linear(h, self.w2, self.b2))
        return sigmoid(linear(h, self.w3, self.b3))


class PredictionHeads:
    def __init__(self, num_object_classes: int, num_interaction_classes: int,
                 rng: np.random.Generator, dim: int = QUERY_DIM):
        self.hbox = BoxMlp(dim, rng)
        self.obox = BoxMlp(dim, rng)
        self.hcls_w = Tensor(_init_linear(rng, dim, 2), requires_grad=True)
        self.hcls_b = Tensor(np.zeros(2), requires_grad=True)
        self.ocls_w = Tensor(_init_linear(rng, dim, num_object_classes + 1), requires_grad=True)
        self.ocls_b = Tensor(np.zeros(num_object_classes + 1), requires_grad=True)
        self.icls_w = Tensor(_init_linear(rng, dim, num_interaction_classes + 1), requires_grad=True)
        self.icls_b = Tensor(np.zeros(num_interaction_classes + 1), requires_grad=True)

    def parameters(self):
        params = {}
        for k, v in self.hbox.parameters().items():
            params[f"hbox.{k}"] = v
        for k, v in self.obox.parameters().items():
            params[f"obox.{k}"] = v
        params.update({"hcls.w": self.hcls_w, "hcls.b": self.hcls_b,
                       "ocls.w": self.ocls_w, "ocls.b": self.ocls_b,
                       "icls.w": self.icls_w, "icls.b": self.icls_b})
        return params

    def __call__(self, decoded: Tensor) -> PredictionSet:
        batched = decoded.ndim == 3
        d = decoded if batched else decoded.reshape((1,) + decoded.shape)
        return PredictionSet(
            human_boxes=self.hbox(d),
            object_boxes=self.obox(d),
            human_logits=linear(d, self.hcls_w, self.hcls_b),
            object_logits=linear(d, self.ocls_w, self.ocls_b),
            interaction_logits=linear(d, self.icls_w, self.icls_b),
        )


class IwinModel:
    """Full network; forward maps (B, 3, H, W) images to a PredictionSet."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.stem = Stem(cfg.d_c, rng)
        blocks = cfg.block_numbers
        self.stages: list[tuple[list[IwinBlock], Agglomeration]] = []
        dim = cfg.d_c
        for i in range(3):
            stage_blocks = [IwinBlock(dim, cfg.scale_sets[i], rng) for _ in range(blocks[i])]
            self.stages.append((stage_blocks, Agglomeration(dim, rng)))
            dim *= 2
        self.enc_dim = dim
        self.global_blocks = [GlobalBlock(dim, rng) for _ in range(blocks[3])]
        if dim != QUERY_DIM:
            self.mem_proj_w = Tensor(_init_linear(rng, dim, QUERY_DIM), requires_grad=True)
            self.mem_proj_b = Tensor(np.zeros(QUERY_DIM), requires_grad=True)
        else:
            self.mem_proj_w = None
            self.mem_proj_b = None
        self.queries = Tensor(rng.normal(0.0, 0.02, (cfg.num_queries, QUERY_DIM)),
                              requires_grad=True)
        if cfg.decoder == "stacked":
            self.decoder_layers = [DecoderLayer(QUERY_DIM, rng) for _ in range(cfg.decoder_depth)]
            self.mlp_decoder = None
        else:
            self.decoder_layers = None
            self.mlp_decoder = MlpDecoder(QUERY_DIM, rng)
        self.heads = PredictionHeads(cfg.num_object_classes, cfg.num_interaction_classes, rng)
        self.last_encode_trace: list[dict] = []

    # -- parameter bookkeeping -------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for k, v in self.stem.parameters().items():
            params[f"stem.{k}"] = v
        for i, (stage_blocks, agg) in enumerate(self.stages, start=1):
            for b, block in enumerate(stage_blocks):
                for k, v in block.parameters().items():
                    params[f"stage{i}.block{b}.{k}"] = v
            for k, v in agg.parameters().items():
                params[f"stage{i}.agg.{k}"] = v
        for g, block in enumerate(self.global_blocks):
            for k, v in block.parameters().items():
                params[f"global{g}.{k}"] = v
        if self.mem_proj_w is not None:
            params["memproj.w"] = self.mem_proj_w
            params["memproj.b"] = self.mem_proj_b
        params["queries"] = self.queries
        if self.decoder_layers is not None:
            for d, layer in enumerate(self.decoder_layers):
                for k, v in layer.parameters().items():
                    params[f"decoder{d}.{k}"] = v
        else:
            for k, v in self.mlp_decoder.parameters().items():
                params[f"mlpdec.{k}"] = v
        for k, v in self.heads.parameters().items():
            params[f"heads.{k}"] = v
        return params

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ContractError(f"checkpoint mismatch: missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractError(f"checkpoint shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def save(self, path) -> None:
        checkpoint.save_tensors(path, self.state_dict())

    def load(self, path) -> None:
        self.load_state_dict(checkpoint.load_tensors(path))

    # -- forward ------------------------------------------------------------

    def encode(self, zb: Tensor) -> tuple[Tensor, tuple[int, int]]:
        """Agglomerative tokenization then global contextual modeling.

        Returns (B, T, C_enc) tokens and the final token grid shape.
        """
        batched = zb.ndim == 4
        z = zb if batched else zb.reshape((1,) + zb.shape)
        trace = []
        for i, (stage_blocks, agg) in enumerate(self.stages, start=1):
            trace.append({"stage": i, "tokens": (z.shape[2], z.shape[3]), "dim": z.shape[1]})
            for block in stage_blocks:
                z = block(z)
            z = agg(z)
        trace.append({"stage": "global", "tokens": (z.shape[2], z.shape[3]), "dim": z.shape[1]})
        self.last_encode_trace = trace
        B, C, h, w = z.shape
        tokens = transpose(reshape(z, (B, C, h * w)), (0, 2, 1))
        for block in self.global_blocks:
            tokens = block(tokens, (h, w))
        if not batched:
            tokens = tokens.reshape(tokens.shape[1:])
        return tokens, (h, w)

    def decode(self, memory: Tensor, grid_hw: tuple[int, int]) -> Tensor:
        batched = memory.ndim == 3
        mem = memory if batched else memory.reshape((1,) + memory.shape)
        if self.mem_proj_w is not None:
            mem = linear(mem, self.mem_proj_w, self.mem_proj_b)
        B = mem.shape[0]
        q = broadcast_to(reshape(self.queries, (1,) + self.queries.shape),
                         (B,) + self.queries.shape)
        if self.decoder_layers is not None:
            mem_pe = sincos_encoding(grid_coords(*grid_hw), QUERY_DIM)
            for layer in self.decoder_layers:
                q = layer(q, mem, mem_pe)
        else:
            q = self.mlp_decoder(q, mem)
        return q if batched else q.reshape(q.shape[1:])

    def forward(self, images: Tensor) -> PredictionSet:
        batched = images.ndim == 4
        x = images if batched else images.reshape((1,) + images.shape)
        zb = self.stem(x)
        tokens, grid_hw = self.encode(zb)
        decoded = self.decode(tokens, grid_hw)
        return self.heads(decoded)
