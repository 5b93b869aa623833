"""Attention-based target grouping.

A convolutional extractor summarises the lane topology (RT) and the
background-vehicle counts (BV) into a traffic feature F. Multi-head
attention between pursuer and evader embeddings, each extended with F,
produces the N x M group attention matrix W_g; each pursuer chases the
evader with the largest weight in its row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .neural import (
    NetParams,
    attention_backward,
    attention_forward,
    conv2d_backward,
    conv2d_forward,
    conv_output_size,
    uniform_init,
)
from .roadnet import Location, RoadNetwork, code_width, lane_code


def embedding_width(L: int) -> int:
    return code_width(L) + 1


def location_embedding(net: RoadNetwork, loc: Location) -> np.ndarray:
    """Lane code bits followed by the offset as a fraction of the lane length."""
    bits = lane_code(loc.lane, net.L).astype(np.float64)
    return np.append(bits, loc.offset / net.lanes[loc.lane].length)


@dataclass
class TrafficFeature:
    F: np.ndarray
    cache: tuple | None = field(default=None, repr=False)


@dataclass
class GroupAttention:
    W_g: np.ndarray
    targets: np.ndarray
    head_weights: np.ndarray
    cache: tuple | None = field(default=None, repr=False)

    @property
    def groups(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for n, m in enumerate(self.targets):
            out.setdefault(int(m), []).append(n)
        return out


def masked_argmax(rows: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Row-wise argmax over active columns, lowest index on ties."""
    if not np.any(active):
        raise ValueError("no active evaders to target")
    masked = np.where(active[None, :], rows, -np.inf)
    return np.argmax(masked, axis=1)


class CognitionModel:
    """Parameter layout and forward/backward passes for the cognition module."""

    def __init__(self, L: int, M: int, f_dim: int = 32, heads: int = 4, d_k: int = 16,
                 conv_channels: int = 4, kernel: int = 3, stride: int = 2):
        if L < kernel:
            raise ValueError(f"need at least {kernel} lanes for the {kernel}x{kernel} convolution")
        self.L, self.M = int(L), int(M)
        self.f_dim, self.heads, self.d_k = int(f_dim), int(heads), int(d_k)
        self.conv_channels, self.kernel, self.stride = int(conv_channels), int(kernel), int(stride)
        side = conv_output_size(self.L, self.kernel, self.stride)
        self.conv_flat = self.conv_channels * side * side
        self.emb = embedding_width(self.L)
        self.d_in = self.emb + self.f_dim

    def param_specs(self):
        c, k, h = self.conv_channels, self.kernel, self.heads
        return [
            ("conv.weight", (c, 1, k, k)),
            ("conv.bias", (c,)),
            ("feature.weight", (self.conv_flat + self.L, self.f_dim)),
            ("feature.bias", (self.f_dim,)),
            ("attn.query", (h, self.d_in, self.d_k)),
            ("attn.key", (h, self.d_in, self.d_k)),
            ("attn.out.weight", (h * self.M, self.M)),
            ("attn.out.bias", (self.M,)),
        ]

    def init(self, rng: np.random.Generator) -> NetParams:
        k2 = self.kernel * self.kernel
        fan = {
            "conv.weight": k2, "conv.bias": k2,
            "feature.weight": self.conv_flat + self.L, "feature.bias": self.conv_flat + self.L,
            "attn.query": self.d_in, "attn.key": self.d_in,
            "attn.out.weight": self.heads * self.M, "attn.out.bias": self.heads * self.M,
        }
        return uniform_init(self.param_specs(), fan, rng)

    # -- traffic feature ----------------------------------------------------

    def conv_features(self, params: NetParams, RT: np.ndarray):
        """Flattened ReLU(conv(RT)); constant for a fixed map and fixed parameters."""
        RT = np.asarray(RT, dtype=np.float64)
        if RT.shape != (self.L, self.L):
            raise ValueError(f"RT has shape {RT.shape}, expected {(self.L, self.L)}")
        z, cols = conv2d_forward(RT[None], params["conv.weight"], params["conv.bias"], self.stride)
        return np.maximum(z, 0.0).reshape(-1), (z, cols)

    def extract_traffic_feature(self, RT, BV, params: NetParams, conv=None) -> TrafficFeature:
        BV = np.asarray(BV, dtype=np.float64)
        if BV.shape != (self.L,):
            raise ValueError(f"BV has shape {BV.shape}, expected ({self.L},)")
        if conv is None:
            conv = self.conv_features(params, RT)
        flat, conv_cache = conv
        x = np.concatenate([flat, BV])
        F = x @ params["feature.weight"] + params["feature.bias"]
        return TrafficFeature(F, (x, conv_cache))

    def traffic_feature_backward(self, params: NetParams, feature: TrafficFeature, grad_F, grads: NetParams):
        x, (z, cols) = feature.cache
        grads["feature.weight"] += np.outer(x, grad_F)
        grads["feature.bias"] += grad_F
        g_flat = params["feature.weight"][: self.conv_flat] @ grad_F
        g_z = g_flat.reshape(z.shape) * (z > 0.0)
        dw, db = conv2d_backward(cols, params["conv.weight"], g_z)
        grads["conv.weight"] += dw
        grads["conv.bias"] += db
        return grads

    # -- group attention ----------------------------------------------------

    def group_attention(self, emb_P: np.ndarray, emb_E: np.ndarray, F: np.ndarray, params: NetParams,
                        active: np.ndarray | None = None) -> GroupAttention:
        emb_P = np.atleast_2d(np.asarray(emb_P, dtype=np.float64))
        emb_E = np.atleast_2d(np.asarray(emb_E, dtype=np.float64))
        n, m = emb_P.shape[0], emb_E.shape[0]
        if m != self.M:
            raise ValueError(f"model built for {self.M} evaders, got {m}")
        if active is None:
            active = np.ones(m, dtype=bool)
        active = np.asarray(active, dtype=bool)
        if not active.any():
            raise ValueError("all evaders are captured")
        F = np.asarray(F, dtype=np.float64)
        XP = np.hstack([emb_P, np.broadcast_to(F, (n, F.size))])
        XE = np.hstack([emb_E, np.broadcast_to(F, (m, F.size))])
        heads = np.empty((self.heads, n, m))
        qs, ks = [], []
        for i in range(self.heads):
            q = XP @ params["attn.query"][i]
            k = XE @ params["attn.key"][i]
            heads[i] = attention_forward(q, k, active)
            qs.append(q)
            ks.append(k)
        concat = heads.transpose(1, 0, 2).reshape(n, self.heads * m)
        W_g = concat @ params["attn.out.weight"] + params["attn.out.bias"]
        targets = masked_argmax(W_g, active)
        return GroupAttention(W_g, targets, heads, (XP, XE, qs, ks, concat))

    def group_attention_backward(self, params: NetParams, ga: GroupAttention, grad_Wg, grads: NetParams):
        """Accumulate attention parameter gradients; returns dL/dF through queries and keys."""
        XP, XE, qs, ks, concat = ga.cache
        n, m = ga.W_g.shape
        grad_Wg = np.asarray(grad_Wg, dtype=np.float64)
        grads["attn.out.weight"] += concat.T @ grad_Wg
        grads["attn.out.bias"] += grad_Wg.sum(axis=0)
        g_concat = grad_Wg @ params["attn.out.weight"].T
        g_heads = g_concat.reshape(n, self.heads, m).transpose(1, 0, 2)
        gXP = np.zeros_like(XP)
        gXE = np.zeros_like(XE)
        for i in range(self.heads):
            gq, gk = attention_backward(qs[i], ks[i], ga.head_weights[i], g_heads[i])
            grads["attn.query"][i] += XP.T @ gq
            grads["attn.key"][i] += XE.T @ gk
            gXP += gq @ params["attn.query"][i].T
            gXE += gk @ params["attn.key"][i].T
        return gXP[:, self.emb:].sum(axis=0) + gXE[:, self.emb:].sum(axis=0)


def nearest_targets(dist: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Fallback assignment used when cognition is disabled: closest active evader."""
    return masked_argmax(-np.asarray(dist, dtype=np.float64), active)
