"""Variational per-modality encoders.

The graph modality uses two independent 2-layer, 2-head GATs (one for the
mean, one for the pre-softplus scale). Visual, attribute and relation
modalities share the FC -> ReLU -> {MLP_mu, MLP_sigma} shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

SIGMA_FLOOR = 1e-6
# initial bias of every sigma head: softplus(-5) ~ 7e-3, so training starts nearly deterministic
SIGMA_INIT_BIAS = -5.0
MODALITIES = ("g", "v", "a", "r")
NON_GRAPH = ("v", "a", "r")


def positive_scale(pre):
    return F.softplus(pre) + SIGMA_FLOOR


@dataclass
class GaussianEmbedding:
    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError(f"mu {tuple(self.mu.shape)} and sigma {tuple(self.sigma.shape)} differ in shape")

    def check(self):
        """Raise if the posterior is not a valid diagonal Gaussian."""
        if not torch.isfinite(self.mu).all():
            raise FloatingPointError("non-finite entries in mu")
        if not (torch.isfinite(self.sigma).all() and (self.sigma > 0).all()):
            raise FloatingPointError("sigma must be finite and strictly positive")
        return self

    def __getitem__(self, idx):
        return GaussianEmbedding(self.mu[idx], self.sigma[idx])


def edge_index_from_adjacency(adjacency):
    """(2, E) long tensor of (source, target) from a scipy sparse matrix."""
    coo = adjacency.tocoo()
    n = adjacency.shape[0]
    if not np.all(np.asarray(adjacency.diagonal()) != 0):
        raise ValueError("adjacency must carry a self-loop for every entity")
    edges = np.stack([coo.col, coo.row]).astype(np.int64)  # message j -> i for A[i, j]
    order = np.lexsort((edges[0], edges[1]))
    out = torch.from_numpy(edges[:, order].copy())
    if out.numel() and out.max() >= n:
        raise ValueError("edge index out of range")
    return out


def segment_softmax(scores, index, n_segments):
    """Softmax of ``scores`` (E, H) within groups given by ``index`` (E,)."""
    h = scores.shape[1]
    idx = index.unsqueeze(1).expand(-1, h)
    seg_max = torch.full((n_segments, h), -torch.inf, dtype=scores.dtype, device=scores.device)
    seg_max = seg_max.scatter_reduce(0, idx, scores.detach(), reduce="amax", include_self=True)
    ex = torch.exp(scores - seg_max[index])
    denom = torch.zeros((n_segments, h), dtype=scores.dtype, device=scores.device).index_add(0, index, ex)
    # NaN scores propagate; only a structurally empty group is an error
    if (denom == 0).any():
        raise RuntimeError("entity with an empty attention neighbourhood")
    return ex / denom[index]


class GATLayer(nn.Module):
    """Additive multi-head graph attention (LeakyReLU 0.2)."""

    def __init__(self, in_dim, out_dim, heads=2, concat=True, negative_slope=0.2):
        super().__init__()
        self.heads, self.out_dim, self.concat = heads, out_dim, concat
        self.lin = nn.Linear(in_dim, heads * out_dim, bias=False)
        self.att_src = nn.Parameter(torch.empty(heads, out_dim))
        self.att_dst = nn.Parameter(torch.empty(heads, out_dim))
        self.bias = nn.Parameter(torch.zeros(heads * out_dim if concat else out_dim))
        self.negative_slope = negative_slope
        nn.init.xavier_uniform_(self.lin.weight)
        nn.init.xavier_uniform_(self.att_src)
        nn.init.xavier_uniform_(self.att_dst)

    def attention(self, x, edge_index):
        """Returns (projected node features (n, H, F), coefficients (E, H))."""
        n = x.shape[0]
        h = self.lin(x).view(n, self.heads, self.out_dim)
        src, dst = edge_index
        a_src = (h * self.att_src).sum(-1)
        a_dst = (h * self.att_dst).sum(-1)
        scores = F.leaky_relu(a_src[src] + a_dst[dst], self.negative_slope)
        return h, segment_softmax(scores, dst, n)

    def forward(self, x, edge_index):
        n = x.shape[0]
        h, alpha = self.attention(x, edge_index)
        src, dst = edge_index
        msg = h[src] * alpha.unsqueeze(-1)
        out = torch.zeros_like(h).index_add(0, dst, msg)
        out = out.reshape(n, -1) if self.concat else out.mean(dim=1)
        return out + self.bias


class GAT(nn.Module):
    """Two GAT layers: heads concatenated after the first, averaged after the second."""

    def __init__(self, in_dim, hidden_dim, out_dim, heads=2, dropout=0.0):
        super().__init__()
        if hidden_dim % heads:
            raise ConfigError(f"hidden_dim {hidden_dim} not divisible by {heads} heads")
        self.layer1 = GATLayer(in_dim, hidden_dim // heads, heads, concat=True)
        self.layer2 = GATLayer(hidden_dim, out_dim, heads, concat=False)
        self.dropout = dropout

    def forward(self, x, edge_index):
        x = F.elu(self.layer1(x, edge_index))
        x = F.dropout(x, self.dropout, self.training)
        return self.layer2(x, edge_index)


class VariationalGraphEncoder(nn.Module):
    def __init__(self, in_dim, hidden_dim=300, out_dim=300, heads=2, dropout=0.0):
        super().__init__()
        self.gat_mu = GAT(in_dim, hidden_dim, out_dim, heads, dropout)
        self.gat_sigma = GAT(in_dim, hidden_dim, out_dim, heads, dropout)
        nn.init.constant_(self.gat_sigma.layer2.bias, SIGMA_INIT_BIAS)

    def forward(self, x_g, edge_index):
        mu = self.gat_mu(x_g, edge_index)
        sigma = positive_scale(self.gat_sigma(x_g, edge_index))
        return GaussianEmbedding(mu, sigma)


def _mlp(dim_in, dim_out):
    return nn.Sequential(nn.Linear(dim_in, dim_out), nn.ReLU(), nn.Linear(dim_out, dim_out))


class VariationalModalEncoder(nn.Module):
    """FC + ReLU interim layer followed by separate MLP heads for mu and sigma."""

    def __init__(self, in_dim, out_dim=100, hidden_dim=None):
        super().__init__()
        hidden_dim = hidden_dim or out_dim
        self.in_dim = in_dim
        self.fc = nn.Linear(in_dim, hidden_dim)
        self.mlp_mu = _mlp(hidden_dim, out_dim)
        self.mlp_sigma = _mlp(hidden_dim, out_dim)
        nn.init.constant_(self.mlp_sigma[2].bias, SIGMA_INIT_BIAS)

    def interim(self, x):
        return F.relu(self.fc(x))

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ConfigError(f"expected {self.in_dim} input columns, got {x.shape[-1]}")
        h = self.interim(x)
        return GaussianEmbedding(self.mlp_mu(h), positive_scale(self.mlp_sigma(h)))


class EncoderParams(nn.Module):
    """All encoder parameters; one instance is shared by both KGs.

    ``d_in`` maps each non-graph modality to its raw feature width.
    """

    def __init__(self, d_g, d_in, graph_hidden=300, graph_out=300, modal_out=100, heads=2, dropout=0.0):
        super().__init__()
        self.graph = VariationalGraphEncoder(d_g, graph_hidden, graph_out, heads, dropout)
        self.modal = nn.ModuleDict({m: VariationalModalEncoder(d_in[m], modal_out) for m in NON_GRAPH})
        self.graph_out, self.modal_out = graph_out, modal_out

    def out_dim(self, m):
        return self.graph_out if m == "g" else self.modal_out


def encode_graph(edge_index, x_g, params):
    if not torch.is_tensor(edge_index):
        edge_index = edge_index_from_adjacency(edge_index)
    enc = params.graph if isinstance(params, EncoderParams) else params
    return enc(x_g, edge_index)


def encode_modality(x_m, modality, params):
    if modality not in NON_GRAPH:
        raise ConfigError(f"unknown non-graph modality {modality!r}")
    return params.modal[modality](x_m)


def reparameterize(g, rng_seed=None, deterministic=False, generator=None, eps=None):
    """z = mu + sigma * eps with eps ~ N(0, I); returns mu when ``deterministic``.

    The noise comes from ``eps`` if given, else from ``generator``, else from a
    fresh generator seeded with ``rng_seed``.
    """
    if deterministic:
        return g.mu
    if eps is None:
        if generator is None:
            generator = torch.Generator().manual_seed(0 if rng_seed is None else int(rng_seed))
        eps = torch.randn(g.mu.shape, generator=generator, dtype=g.mu.dtype)
    return g.mu + g.sigma * eps
