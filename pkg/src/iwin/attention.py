"""Window-based and global multi-head self-attention, and the attention block
that runs several irregular window scales in parallel and merges them.

Position information enters as fixed sinusoidal encodings of the regular
anchor coordinates, added to queries and keys only (inside attention).
Window attention uses window-local anchor coordinates so the computation is
identical for every window; global attention uses the full token grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (ContractError, DimensionError, Tensor, concat, count_macs,
                   layer_norm, linear, matmul, mul, relu, reshape,
                   scaled_dot_attention, transpose)
from .windowing import WindowSet, gather_windows, partition, predict_offsets, scatter_windows


def default_num_heads(dim: int) -> int:
    return 8 if dim >= 64 else 4


@dataclass
class AttentionConfig:
    dim: int
    num_heads: int
    scale_set: tuple[int, ...]

    def __post_init__(self):
        if self.dim % self.num_heads:
            raise ContractError(f"dim {self.dim} not divisible by {self.num_heads} heads")
        if not self.scale_set:
            raise ContractError("scale_set must be nonempty")

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @property
    def ffn_hidden(self) -> int:
        return 4 * self.dim


@dataclass
class ComplexityReport:
    kind: str
    H: int
    W: int
    C: int
    S_w: int
    formula_flops: int
    measured_macs: int
    measured_attn_macs: int


def sincos_encoding(coords: np.ndarray, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding of (y, x) coordinates -> (P, dim).

    Half the channels encode x, half encode y, each as interleaved sin/cos.
    """
    if dim % 4:
        raise ContractError(f"position encoding needs dim divisible by 4, got {dim}")
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(0, half, 2) / half))
    out = np.zeros((len(coords), dim))
    for k, axis in enumerate((1, 0)):          # x first, then y
        angles = coords[:, axis:axis + 1] * freqs[None, :]
        out[:, k * half + 0:(k + 1) * half:2] = np.sin(angles)
        out[:, k * half + 1:(k + 1) * half:2] = np.cos(angles)
    return out


def grid_coords(h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([yy.reshape(-1), xx.reshape(-1)], axis=1).astype(np.float64)


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class MultiHeadAttention:
    """Projection weights for one attention module (shared by W-MSA and G-MSA)."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator,
                 kv_dim: int | None = None):
        kv_dim = kv_dim or dim
        self.dim = dim
        self.num_heads = num_heads
        self.wq = Tensor(_init_linear(rng, dim, dim), requires_grad=True)
        self.wk = Tensor(_init_linear(rng, kv_dim, dim), requires_grad=True)
        self.wv = Tensor(_init_linear(rng, kv_dim, dim), requires_grad=True)
        self.wo = Tensor(_init_linear(rng, dim, dim), requires_grad=True)
        self.bq = Tensor(np.zeros(dim), requires_grad=True)
        self.bk = Tensor(np.zeros(dim), requires_grad=True)
        self.bv = Tensor(np.zeros(dim), requires_grad=True)
        self.bo = Tensor(np.zeros(dim), requires_grad=True)

    def parameters(self):
        return {"wq": self.wq, "bq": self.bq, "wk": self.wk, "bk": self.bk,
                "wv": self.wv, "bv": self.bv, "wo": self.wo, "bo": self.bo}

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask: np.ndarray | None = None,
                 q_pe: np.ndarray | None = None, k_pe: np.ndarray | None = None) -> Tensor:
        """Scaled dot-product attention over stacked windows.

        q_in: (G, Tq, C); kv_in: (G, Tk, Ckv); mask: (G, Tk) with 1 = valid.
        Position encodings are added to the query/key inputs only.
        """
        G, Tq, _ = q_in.shape
        Tk = kv_in.shape[1]

        if q_pe is not None and q_in is kv_in and np.array_equal(q_pe, k_pe):
            qx = kx = q_in + Tensor(q_pe)
        else:
            qx = q_in + Tensor(q_pe) if q_pe is not None else q_in
            kx = kv_in + Tensor(k_pe) if k_pe is not None else kv_in

        q = linear(qx, self.wq, self.bq)
        k = linear(kx, self.wk, self.bk)
        v = linear(kv_in, self.wv, self.bv)

        out = scaled_dot_attention(q, k, v, self.num_heads, mask=mask)
        out = linear(out, self.wo, self.bo)
        if mask is not None:
            out = mul(out, Tensor(mask.reshape(G, Tq, 1)))
        return out


def w_msa(windows: Tensor, mask: np.ndarray | None, attn: MultiHeadAttention,
          window_size: int) -> Tensor:
    """Per-window multi-head self-attention on (nw, S*S, C) stacks.

    Masked slots receive zero attention weight and produce zero output.
    """
    if windows.ndim != 3:
        raise DimensionError(f"w_msa expects (num_windows, tokens, dim), got {windows.shape}")
    if windows.shape[2] != attn.dim:
        raise DimensionError(f"token dim {windows.shape[2]} != attention dim {attn.dim}")
    S = window_size
    if windows.shape[1] != S * S:
        raise DimensionError(f"{windows.shape[1]} tokens per window, expected {S * S}")
    pe = sincos_encoding(grid_coords(S, S), attn.dim)
    return attn(windows, windows, mask=mask, q_pe=pe, k_pe=pe)


def g_msa(tokens: Tensor, attn: MultiHeadAttention, grid_hw: tuple[int, int]) -> Tensor:
    """Full-sequence attention: one window covering the whole token grid."""
    if tokens.ndim != 2:
        raise DimensionError(f"g_msa expects (tokens, dim), got {tokens.shape}")
    h, w = grid_hw
    pe = sincos_encoding(grid_coords(h, w), attn.dim)
    stacked = tokens.reshape((1,) + tokens.shape)
    return attn(stacked, stacked, q_pe=pe, k_pe=pe).reshape(tokens.shape)


def channel_linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """1x1 convolution: (B, Cin, H, W) @ (Cin, Cout) -> (B, Cout, H, W)."""
    B, Cin, H, W = x.shape
    t = transpose(reshape(x, (B, Cin, H * W)), (0, 2, 1))
    t = linear(t, w, b)
    return reshape(transpose(t, (0, 2, 1)), (B, w.shape[1], H, W))


class FeedForward:
    """Two dense layers with a ReLU in between."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.w1 = Tensor(_init_linear(rng, dim, hidden), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(_init_linear(rng, hidden, dim), requires_grad=True)
        self.b2 = Tensor(np.zeros(dim), requires_grad=True)

    def parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def __call__(self, x: Tensor) -> Tensor:
        return linear(relu(linear(x, self.w1, self.b1)), self.w2, self.b2)


class LayerNorm:
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class IwinBlock:
    """Multi-scale irregular window attention block.

    Per scale: predict offsets, partition, gather, LN, W-MSA, scatter back.
    The per-scale maps are merged by a 1x1 convolution, added to the input,
    and a pre-LN FFN with second residual finishes the block.
    """

    def __init__(self, dim: int, scale_set: tuple[int, ...], rng: np.random.Generator,
                 num_heads: int | None = None):
        self.cfg = AttentionConfig(dim, num_heads or default_num_heads(dim), tuple(scale_set))
        self.offset_w = []
        self.offset_b = []
        self.norms = []
        self.attns = []
        for _ in self.cfg.scale_set:
            self.offset_w.append(Tensor(np.zeros((2, dim, 3, 3)), requires_grad=True))
            self.offset_b.append(Tensor(np.zeros(2), requires_grad=True))
            self.norms.append(LayerNorm(dim))
            self.attns.append(MultiHeadAttention(dim, self.cfg.num_heads, rng))
        n = len(self.cfg.scale_set)
        self.merge_w = Tensor(_init_linear(rng, n * dim, dim), requires_grad=True)
        self.merge_b = Tensor(np.zeros(dim), requires_grad=True)
        self.ffn_norm = LayerNorm(dim)
        self.ffn = FeedForward(dim, self.cfg.ffn_hidden, rng)

    def parameters(self):
        params = {}
        for i, s in enumerate(self.cfg.scale_set):
            params[f"scale{s}.offset.w"] = self.offset_w[i]
            params[f"scale{s}.offset.b"] = self.offset_b[i]
            for k, v in self.norms[i].parameters().items():
                params[f"scale{s}.norm.{k}"] = v
            for k, v in self.attns[i].parameters().items():
                params[f"scale{s}.attn.{k}"] = v
        params["merge.w"] = self.merge_w
        params["merge.b"] = self.merge_b
        for k, v in self.ffn_norm.parameters().items():
            params[f"ffn_norm.{k}"] = v
        for k, v in self.ffn.parameters().items():
            params[f"ffn.{k}"] = v
        return params

    def __call__(self, z: Tensor, regular: bool = False) -> Tensor:
        batched = z.ndim == 4
        zb = z if batched else z.reshape((1,) + z.shape)
        B, C, H, W = zb.shape
        branches = []
        for i, S in enumerate(self.cfg.scale_set):
            f_o = None if regular else predict_offsets(zb, self.offset_w[i], self.offset_b[i])
            ws = partition(zb, f_o, S)
            g = gather_windows(zb, ws)                        # (B, nw, S*S, C)
            gn = self.norms[i](g)
            nw = ws.num_windows
            flat = reshape(gn, (B * nw, S * S, C))
            mask = np.broadcast_to(ws.valid.astype(np.float64), (B, nw, S * S))
            out = w_msa(flat, mask.reshape(B * nw, S * S), self.attns[i], S)
            branches.append(scatter_windows(reshape(out, (B, nw, S * S, C)), ws))
        merged = channel_linear(concat(branches, axis=1), self.merge_w, self.merge_b)
        x = zb + merged
        t = transpose(reshape(x, (B, C, H * W)), (0, 2, 1))
        t = t + self.ffn(self.ffn_norm(t))
        out = reshape(transpose(t, (0, 2, 1)), (B, C, H, W))
        return out if batched else out.reshape((C, H, W))


class GlobalBlock:
    """Global self-attention with the same pre-LN residual macro-structure."""

    def __init__(self, dim: int, rng: np.random.Generator, num_heads: int | None = None):
        self.dim = dim
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads or default_num_heads(dim), rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, 4 * dim, rng)

    def parameters(self):
        params = {}
        for k, v in self.norm1.parameters().items():
            params[f"norm1.{k}"] = v
        for k, v in self.attn.parameters().items():
            params[f"attn.{k}"] = v
        for k, v in self.norm2.parameters().items():
            params[f"norm2.{k}"] = v
        for k, v in self.ffn.parameters().items():
            params[f"ffn.{k}"] = v
        return params

    def __call__(self, tokens: Tensor, grid_hw: tuple[int, int]) -> Tensor:
        batched = tokens.ndim == 3
        tb = tokens if batched else tokens.reshape((1,) + tokens.shape)
        pe = sincos_encoding(grid_coords(*grid_hw), self.dim)
        n = self.norm1(tb)
        x = tb + self.attn(n, n, q_pe=pe, k_pe=pe)
        x = x + self.ffn(self.norm2(x))
        return x if batched else x.reshape(x.shape[1:])


# -- complexity accounting ----------------------------------------------------


def formula_flops(kind: str, H: int, W: int, C: int, S_w: int = 0) -> int:
    """Closed-form multiply-accumulate counts for the attention path."""
    if kind == "g":
        return 4 * H * W * C * C + 2 * (H * W) ** 2 * C
    if kind == "w":
        return 4 * H * W * C * C + 2 * S_w * S_w * H * W * C
    raise ContractError(f"kind must be 'g' or 'w', got {kind!r}")


def complexity(kind: str, H: int, W: int, C: int, S_w: int = 0) -> ComplexityReport:
    """Formula count vs. MACs measured on an instrumented reference forward.

    Only the attention path is counted: query/key/value/output projections
    plus the two attention products, biases excluded.
    """
    if H < 1 or W < 1 or C < 1:
        raise ContractError("H, W, C must be positive")
    kind = kind.lower()
    fl = formula_flops(kind, H, W, C, S_w)
    rng = np.random.default_rng(0)
    attn = MultiHeadAttention(C, default_num_heads(C), rng)

    if kind == "g":
        tokens = Tensor(rng.standard_normal((H * W, C)))
        with count_macs() as total:
            g_msa(tokens, attn, (H, W))
        one = Tensor(rng.standard_normal((1, H * W, C)))
        q = linear(one, attn.wq)
        with count_macs() as attn_only:
            a = matmul(q, transpose(q, (0, 2, 1)))
            matmul(a, q)
    else:
        if S_w < 1:
            raise ContractError("S_w must be >= 1 for window attention")
        z = Tensor(rng.standard_normal((C, H, W)))
        ws = partition(z, None, S_w)
        windows = gather_windows(z, ws)
        flat = reshape(windows, (ws.num_windows, S_w * S_w, C))
        mask = ws.valid.astype(np.float64)
        with count_macs() as total:
            w_msa(flat, mask, attn, S_w)
        q = linear(flat, attn.wq)
        with count_macs() as attn_only:
            a = matmul(q, transpose(q, (0, 2, 1)))
            matmul(a, q)

    return ComplexityReport(kind=kind, H=H, W=W, C=C, S_w=S_w, formula_flops=fl,
                            measured_macs=total.total,
                            measured_attn_macs=attn_only.total)
