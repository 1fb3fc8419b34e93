"""Masked attention encoder with pointer policy and critic heads (torch)."""

from __future__ import annotations

import json
import math
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

CKPT_MAGIC = b"ATTNEXPLORE-CKPT v1\n"
CHECK_FINITE = True


class CheckpointError(ValueError):
    pass


def assert_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if CHECK_FINITE and not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return t


@dataclass(frozen=True)
class NetConfig:
    d: int = 128
    heads: int = 8
    ffn: int = 512
    layers: int = 6
    node_dim: int = 4

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError("d must be divisible by the head count")


@contextmanager
def seeded(seed: int | None):
    """Deterministic parameter init without disturbing the global RNG."""
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        yield


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Softmax over the last axis; ``mask`` True entries get exactly zero weight."""
    if mask is not None:
        if mask.all(dim=-1).any():
            raise ValueError("a query row has every key masked")
        logits = logits.masked_fill(mask, float("-inf"))
    return torch.softmax(logits, dim=-1)


class AttentionLayer(nn.Module):
    """Pre-norm multi-head attention followed by a feed-forward sublayer."""

    def __init__(self, d: int, heads: int, ffn: int):
        super().__init__()
        if d % heads:
            raise ValueError("d must be divisible by the head count")
        self.d, self.heads = d, heads
        self.norm_q = nn.LayerNorm(d)
        self.norm_kv = nn.LayerNorm(d)
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.norm_ff = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ffn), nn.ReLU(), nn.Linear(ffn, d))

    def attend(self, hq, hkv, mask=None, normalize=True, return_weights=False):
        """Attention output before the residual and feed-forward steps.

        ``hq`` is ``(..., nq, d)``, ``hkv`` is ``(..., nk, d)``, ``mask`` is
        ``(..., nq, nk)`` with True meaning blocked.
        """
        if hq.shape[-1] != self.d or hkv.shape[-1] != self.d:
            raise ValueError("feature dimension mismatch")
        if mask is not None and tuple(mask.shape[-2:]) != (hq.shape[-2], hkv.shape[-2]):
            raise ValueError(f"mask shape {tuple(mask.shape)} does not fit ({hq.shape[-2]}, {hkv.shape[-2]})")
        if normalize:
            hq, hkv = self.norm_q(hq), self.norm_kv(hkv)
        dh = self.d // self.heads
        split = lambda x: x.unflatten(-1, (self.heads, dh)).transpose(-3, -2)
        q, k, v = split(self.wq(hq)), split(self.wk(hkv)), split(self.wv(hkv))
        if mask is not None and mask.all(dim=-1).any():
            raise ValueError("a query row has every key masked")
        if return_weights:
            u = q @ k.transpose(-1, -2) / math.sqrt(dh)
            w = masked_softmax(u, None if mask is None else mask.unsqueeze(-3))
            out = w @ v
        else:
            # fused kernel; its boolean mask marks the allowed pairs
            allowed = None if mask is None else ~mask.unsqueeze(-3)
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=allowed)
        out = out.transpose(-3, -2).flatten(-2)
        return (out, w) if return_weights else out

    def forward(self, hq, hkv, mask=None):
        h = hq + self.attend(hq, hkv, mask)
        return h + self.ff(self.norm_ff(h))


class Encoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.embed = nn.Linear(cfg.node_dim, cfg.d)
        self.layers = nn.ModuleList(AttentionLayer(cfg.d, cfg.heads, cfg.ffn) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.d)

    def forward(self, feats, mask):
        """Embed, then run the self-attention stack under ``mask`` (True = blocked)."""
        if feats.shape[-2] != mask.shape[-1] or mask.shape[-1] != mask.shape[-2]:
            raise ValueError(f"mask {tuple(mask.shape)} does not match {feats.shape[-2]} nodes")
        h = self.embed(feats)
        for layer in self.layers:
            h = layer(h, h, mask)
        return assert_finite(self.norm(h), "encoder output")


def gather_rows(h, idx):
    """``h[b, idx[b, j]]`` for batched ``h`` (B, N, d) and ``idx`` (B, K)."""
    return torch.gather(h, 1, idx.unsqueeze(-1).expand(*idx.shape, h.shape[-1]))


class _Head(nn.Module):
    """Shared decoder trunk: enhanced current-node features."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.encoder = Encoder(cfg)
        self.cross = AttentionLayer(cfg.d, cfg.heads, cfg.ffn)
        self.merge = nn.Linear(2 * cfg.d, cfg.d)

    def trunk(self, batch: "GraphBatch"):
        h = self.encoder(batch.features, batch.edge_mask)
        h_c = gather_rows(h, batch.current[:, None])                  # (B, 1, d)
        h_nb = gather_rows(h, batch.neighbors)                        # (B, K, d)
        ctx = self.cross(h_c, h, batch.node_pad[:, None, :])
        h_hat = self.merge(torch.cat([h_c, ctx], dim=-1))             # (B, 1, d)
        return h_hat, h_nb


class PolicyNet(_Head):
    def __init__(self, cfg: NetConfig = NetConfig(), seed: int | None = None):
        with seeded(seed):
            super().__init__(cfg)
            self.cfg = cfg
            self.pq = nn.Linear(cfg.d, cfg.d, bias=False)
            self.pk = nn.Linear(cfg.d, cfg.d, bias=False)

    def logits(self, batch: "GraphBatch") -> torch.Tensor:
        """Pointer logits over neighbour slots; padded slots are ``-inf``."""
        h_hat, h_nb = self.trunk(batch)
        u = (self.pq(h_hat) @ self.pk(h_nb).transpose(-1, -2)).squeeze(-2) / math.sqrt(self.cfg.d)
        if batch.nb_pad.all(dim=-1).any():
            raise ValueError("empty neighbour list")
        return u.masked_fill(batch.nb_pad, float("-inf"))

    def forward(self, batch: "GraphBatch"):
        """``(probs, log_probs)`` of shape (B, K); padded entries are 0 / 0."""
        lg = self.logits(batch)
        logp = torch.log_softmax(lg, dim=-1)
        probs = logp.exp()
        logp = logp.masked_fill(batch.nb_pad, 0.0)
        return assert_finite(probs, "policy"), logp


class QNet(_Head):
    def __init__(self, cfg: NetConfig = NetConfig(), seed: int | None = None, zero_head: bool = False):
        with seeded(seed):
            super().__init__(cfg)
            self.cfg = cfg
            self.value = nn.Linear(2 * cfg.d, 1)
        if zero_head:
            nn.init.zeros_(self.value.weight)
            nn.init.zeros_(self.value.bias)

    def forward(self, batch: "GraphBatch") -> torch.Tensor:
        """Q value per neighbour slot (B, K); padded slots are 0."""
        h_hat, h_nb = self.trunk(batch)
        if batch.nb_pad.all(dim=-1).any():
            raise ValueError("empty neighbour list")
        q = self.value(torch.cat([h_hat.expand_as(h_nb), h_nb], dim=-1)).squeeze(-1)
        return assert_finite(q.masked_fill(batch.nb_pad, 0.0), "critic")


# -- batching ---------------------------------------------------------------

@dataclass
class GraphBatch:
    features: torch.Tensor   # (B, N, 4)
    edge_mask: torch.Tensor  # (B, N, N) True = blocked
    node_pad: torch.Tensor   # (B, N) True = padding node
    current: torch.Tensor    # (B,) row of the robot's node
    neighbors: torch.Tensor  # (B, K) neighbour rows, padding points at row 0
    nb_pad: torch.Tensor     # (B, K) True = padding

    def __len__(self):
        return self.features.shape[0]

    def to(self, dtype):
        return GraphBatch(self.features.to(dtype), self.edge_mask, self.node_pad,
                          self.current, self.neighbors, self.nb_pad)


def adjacency_from_mask(mask: np.ndarray) -> list:
    """Per-row allowed keys of a dense edge mask, self excluded."""
    m = np.asarray(mask, dtype=bool)
    return [np.flatnonzero(~m[i] & (np.arange(len(m)) != i)) for i in range(len(m))]


def make_batch(features, adjacency, currents, neighbor_lists) -> GraphBatch:
    """Pad variable-size graphs to the batch maximum.

    ``adjacency[b][i]`` lists the rows node ``i`` of graph ``b`` attends to
    besides itself. Padded nodes only attend to themselves, so no row is
    ever fully masked and no real node can see them.
    """
    b = len(features)
    n = max(len(f) for f in features)
    k = max(len(x) for x in neighbor_lists)
    if k == 0:
        raise ValueError("empty neighbour list")
    feats = np.zeros((b, n, features[0].shape[1]), dtype=np.float32)
    emask = np.ones((b, n, n), dtype=bool)
    node_pad = np.ones((b, n), dtype=bool)
    nbs = np.zeros((b, k), dtype=np.int64)
    nb_pad = np.ones((b, k), dtype=bool)
    for i, (f, adj, nb) in enumerate(zip(features, adjacency, neighbor_lists)):
        m_ = len(f)
        if len(adj) != m_:
            raise ValueError("adjacency does not match the node count")
        feats[i, :m_] = f
        node_pad[i, :m_] = False
        rows = np.repeat(np.arange(m_), [len(a) for a in adj])
        cols = np.concatenate(adj).astype(np.int64) if m_ else np.zeros(0, np.int64)
        emask[i, rows, cols] = False
        nbs[i, :len(nb)] = nb
        nb_pad[i, :len(nb)] = False
    diag = np.arange(n)
    emask[:, diag, diag] = False
    t = torch.from_numpy
    return GraphBatch(t(feats), t(emask), t(node_pad),
                      torch.as_tensor(np.asarray(currents, dtype=np.int64)), t(nbs), t(nb_pad))


def collate(observations) -> GraphBatch:
    obs = list(observations)
    return make_batch([o.features for o in obs], [o.graph.adjacency for o in obs],
                      [o.current_row for o in obs], [o.neighbor_rows for o in obs])


# -- gradient checking ------------------------------------------------------

def gradient_check(loss_fn, params, step: float = 1e-5) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn()`` must return a scalar built from ``params`` (float64
    tensors with ``requires_grad``). Relative error is
    ``|a - f| / max(|a| + |f|, 1e-5)``.
    """
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise TypeError("gradient checks need float64 parameters")
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                fd = (up - down) / (2 * step)
                a = gflat[i].item()
                worst = max(worst, abs(a - fd) / max(abs(a) + abs(fd), 1e-5))
    return worst


# -- checkpoints ------------------------------------------------------------

def _named_arrays(modules: dict, optimizers: dict | None):
    out = {}
    for prefix, mod in modules.items():
        for name, t in mod.state_dict().items():
            out[f"{prefix}/{name}"] = t.detach().cpu().numpy()
    for oname, (opt, named) in (optimizers or {}).items():
        for pname, p in named:
            st = opt.state.get(p, {})
            for slot in ("exp_avg", "exp_avg_sq"):
                if slot in st:
                    out[f"opt/{oname}/{pname}/{slot}"] = st[slot].detach().cpu().numpy()
    return out


def save_checkpoint(path, modules: dict, state: dict, optimizers: dict | None = None) -> None:
    """Write a self-describing checkpoint.

    Layout: magic line, little-endian u64 manifest length, UTF-8 JSON
    manifest, then every tensor as little-endian float32 in manifest order.
    ``optimizers`` maps a name to ``(optimizer, [(param_name, param), ...])``.
    """
    arrays = _named_arrays(modules, optimizers)
    entries, offset = [], 0
    for name, a in arrays.items():
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += int(np.prod(a.shape, dtype=np.int64)) * 4
    manifest = json.dumps({"format": "ATTNEXPLORE-CKPT", "version": 1, "dtype": "<f4",
                           "tensors": entries, "state": state}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_checkpoint(path):
    """``(manifest, {name: float32 array})``."""
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not an ATTNEXPLORE-CKPT v1 file")
        (n,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(n))
        blob = fh.read()
    arrays = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
    return manifest, arrays


def load_module(module: nn.Module, arrays: dict, prefix: str) -> None:
    """Copy ``prefix/...`` arrays into ``module``; refuse on any shape difference."""
    own = module.state_dict()
    theirs = {k[len(prefix) + 1:]: v for k, v in arrays.items() if k.startswith(prefix + "/")}
    diff = []
    for k in sorted(set(own) | set(theirs)):
        a = tuple(own[k].shape) if k in own else None
        b = tuple(theirs[k].shape) if k in theirs else None
        if a != b:
            diff.append(f"{prefix}/{k}: model {a} vs checkpoint {b}")
    if diff:
        raise CheckpointError("architecture mismatch:\n  " + "\n  ".join(diff))
    module.load_state_dict({k: torch.from_numpy(np.array(v)).to(own[k].dtype) for k, v in theirs.items()})


def load_optimizer(opt, named, arrays: dict, oname: str, step: int) -> None:
    for pname, p in named:
        key = f"opt/{oname}/{pname}"
        if f"{key}/exp_avg" in arrays:
            opt.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": torch.from_numpy(np.array(arrays[f"{key}/exp_avg"])),
                "exp_avg_sq": torch.from_numpy(np.array(arrays[f"{key}/exp_avg_sq"])),
            }


def net_config_dict(cfg: NetConfig) -> dict:
    return asdict(cfg)
