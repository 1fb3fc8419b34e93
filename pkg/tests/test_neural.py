import math
import struct

import numpy as np
import pytest
import torch

from attnexplore.neural import (
    CKPT_MAGIC, AttentionLayer, CheckpointError, Encoder, NetConfig, PolicyNet, QNet, adjacency_from_mask,
    gradient_check, load_module, make_batch, masked_softmax, read_checkpoint, save_checkpoint,
)

TINY = NetConfig(d=8, heads=2, ffn=16, layers=2)


def eye_layer(d, heads=1):
    layer = AttentionLayer(d, heads, 4).double()
    with torch.no_grad():
        for w in (layer.wq, layer.wk, layer.wv):
            w.weight.copy_(torch.eye(d))
    return layer


def star_batch(n_leaves, feats=None, dtype=torch.float64):
    """Node 0 in the middle, every leaf linked only to it."""
    n = n_leaves + 1
    f = feats if feats is not None else np.random.default_rng(0).random((n, 4))
    adj = [list(range(1, n))] + [[0] for _ in range(n_leaves)]
    b = make_batch([f.astype(np.float32)], [[np.array(a) for a in adj]], [0], [np.arange(1, n)])
    b.features = torch.as_tensor(f, dtype=dtype)[None]
    return b


def test_single_node_attends_to_itself():
    layer = eye_layer(3)
    h = torch.tensor([[0.3, -1.0, 2.0]], dtype=torch.float64)
    out, w = layer.attend(h, h, torch.zeros(1, 1, dtype=torch.bool), normalize=False, return_weights=True)
    assert w.item() == 1.0
    assert torch.allclose(out, h)


def test_identical_keys_split_evenly():
    layer = eye_layer(2)
    q = torch.tensor([[1.0, 2.0]], dtype=torch.float64)
    kv = torch.tensor([[0.5, 0.5], [0.5, 0.5]], dtype=torch.float64)
    _, w = layer.attend(q, kv, normalize=False, return_weights=True)
    assert torch.allclose(w, torch.tensor([[[0.5, 0.5]]], dtype=torch.float64))


def test_hand_computed_two_node_attention():
    layer = AttentionLayer(2, 1, 4).double()
    wq = [[1.0, 2.0], [0.0, -1.0]]
    wk = [[0.5, 0.0], [1.0, 1.0]]
    wv = [[2.0, -1.0], [0.5, 0.25]]
    with torch.no_grad():
        layer.wq.weight.copy_(torch.tensor(wq))
        layer.wk.weight.copy_(torch.tensor(wk))
        layer.wv.weight.copy_(torch.tensor(wv))
    h = [[1.0, -2.0], [0.5, 3.0]]
    out = layer.attend(torch.tensor(h, dtype=torch.float64), torch.tensor(h, dtype=torch.float64), normalize=False)

    def mv(m, x):
        return [m[0][0] * x[0] + m[0][1] * x[1], m[1][0] * x[0] + m[1][1] * x[1]]

    q = [mv(wq, x) for x in h]
    k = [mv(wk, x) for x in h]
    v = [mv(wv, x) for x in h]
    for i in range(2):
        u = [(q[i][0] * k[j][0] + q[i][1] * k[j][1]) / math.sqrt(2) for j in range(2)]
        e = [math.exp(x - max(u)) for x in u]
        w = [x / sum(e) for x in e]
        want = [w[0] * v[0][c] + w[1] * v[1][c] for c in range(2)]
        assert out[i].tolist() == pytest.approx(want, abs=1e-12)


def test_fully_masked_row_is_an_error():
    layer = AttentionLayer(4, 1, 4)
    h = torch.randn(2, 4)
    with pytest.raises(ValueError):
        layer(h, h, torch.tensor([[True, True], [False, False]]))


def test_masked_softmax_gradients():
    logits = torch.randn(3, 5, dtype=torch.float64, requires_grad=True)
    mask = torch.tensor([[False, True, False, False, True]] * 3)
    weights = torch.randn(3, 5, dtype=torch.float64)
    err = gradient_check(lambda: (masked_softmax(logits, mask) * weights).sum(), [logits])
    assert err < 1e-5
    (masked_softmax(logits, mask) * weights).sum().backward()
    assert (logits.grad[mask] == 0).all()
    assert (masked_softmax(logits, mask)[mask] == 0).all()


def test_embed_layer_gradient():
    lin = torch.nn.Linear(4, 6).double()
    x = torch.randn(5, 4, dtype=torch.float64)
    assert gradient_check(lambda: (lin(x) ** 2).sum(), lin.parameters()) < 1e-6


def ring_mask(n):
    m = np.ones((n, n), dtype=bool)
    for i in range(n):
        m[i, i] = m[i, (i + 1) % n] = m[i, (i - 1) % n] = False
    return torch.from_numpy(m)


def test_two_layer_encoder_gradient():
    torch.manual_seed(0)
    enc = Encoder(TINY).double()
    x = torch.rand(4, 4, dtype=torch.float64)
    target = torch.randn(4, 8, dtype=torch.float64)
    err = gradient_check(lambda: ((enc(x, ring_mask(4)) - target) ** 2).sum(), enc.parameters())
    assert err < 1e-4


def test_encoder_shape_and_mask_checks():
    enc = Encoder(TINY)
    out = enc(torch.rand(1, 4), torch.zeros(1, 1, dtype=torch.bool))
    assert out.shape == (1, 8) and torch.isfinite(out).all()
    with pytest.raises(ValueError):
        enc(torch.rand(3, 4), torch.zeros(2, 2, dtype=torch.bool))


def test_encoder_permutation_equivariance():
    torch.manual_seed(1)
    enc = Encoder(NetConfig(d=16, heads=4, ffn=32, layers=3)).double()
    n = 7
    x = torch.rand(n, 4, dtype=torch.float64)
    m = ring_mask(n)
    perm = torch.randperm(n)
    out = enc(x, m)
    out_p = enc(x[perm], m[perm][:, perm])
    assert torch.allclose(out[perm], out_p, atol=1e-6)


def test_non_neighbours_have_zero_single_layer_gradient():
    torch.manual_seed(2)
    layer = AttentionLayer(8, 2, 16).double()
    n = 6
    m = ring_mask(n)
    x = torch.randn(n, 8, dtype=torch.float64, requires_grad=True)
    for i in range(n):
        (g,) = torch.autograd.grad(layer(x, x, m)[i].sum(), x)
        for j in range(n):
            if m[i, j]:
                assert (g[j] == 0).all()
            elif j == i:
                assert g[j].abs().sum() > 0


def test_information_needs_two_hops_on_a_path():
    torch.manual_seed(3)
    mask = torch.tensor([[False, False, True], [False, False, False], [True, False, False]])
    x = torch.rand(3, 4, dtype=torch.float64)
    x0 = x.clone()
    x0[2] = 0
    one = Encoder(NetConfig(d=8, heads=2, ffn=16, layers=1)).double()
    two = Encoder(NetConfig(d=8, heads=2, ffn=16, layers=2)).double()
    assert torch.equal(one(x, mask)[0], one(x0, mask)[0])
    assert not torch.allclose(two(x, mask)[0], two(x0, mask)[0])


def test_policy_simplex_and_support():
    torch.manual_seed(4)
    net = PolicyNet(TINY, seed=0).double()
    b = star_batch(5)
    p, logp = net(b)
    assert abs(p.sum().item() - 1) < 1e-6 and (p >= 0).all()
    assert p.shape == (1, 5)
    one = star_batch(1)
    assert net(one)[0].item() == pytest.approx(1.0)


def test_policy_and_critic_symmetry_for_duplicates():
    f = np.random.default_rng(5).random((4, 4))
    f[2] = f[1]
    b = star_batch(3, f)
    p, _ = PolicyNet(TINY, seed=1).double()(b)
    assert p[0, 0].item() == pytest.approx(p[0, 1].item(), abs=1e-12)
    q = QNet(TINY, seed=2).double()(b)
    assert q[0, 0].item() == pytest.approx(q[0, 1].item(), abs=1e-12)
    assert q.shape == (1, 3) and torch.isfinite(q).all()


def test_zero_head_critic_is_zero():
    q = QNet(TINY, seed=3, zero_head=True)(star_batch(4, dtype=torch.float32))
    assert (q == 0).all()


def test_empty_neighbour_list_is_an_error():
    with pytest.raises(ValueError):
        make_batch([np.zeros((1, 4), np.float32)], [[np.array([], dtype=np.int64)]], [0], [np.array([], dtype=np.int64)])


def test_full_stacks_pass_gradient_check():
    b = star_batch(3)
    pol = PolicyNet(TINY, seed=7).double()
    w = torch.tensor([[0.3, -1.2, 0.8]], dtype=torch.float64)
    assert gradient_check(lambda: (pol(b)[1] * w).sum(), pol.parameters()) < 1e-4
    crit = QNet(TINY, seed=8).double()
    assert gradient_check(lambda: (crit(b) * w).sum(), crit.parameters()) < 1e-4


def test_padding_does_not_change_results():
    rng = np.random.default_rng(6)
    graphs = []
    for n in (3, 6, 4):
        m = np.ones((n, n), dtype=bool)
        for i in range(n - 1):
            m[i, i + 1] = m[i + 1, i] = False
        graphs.append((rng.random((n, 4)).astype(np.float32), adjacency_from_mask(m), 1, np.array([0, 2])))
    pol = PolicyNet(TINY, seed=9)
    together = pol(make_batch(*zip(*graphs)))[0]
    for i, g in enumerate(graphs):
        alone = pol(make_batch(*zip(g)))[0]
        assert torch.allclose(together[i], alone[0], atol=1e-6)


def test_checkpoint_roundtrip_and_refusal(tmp_path):
    pol = PolicyNet(TINY, seed=10)
    path = tmp_path / "p.ckpt"
    save_checkpoint(path, {"policy": pol}, {"step": 3})
    raw = path.read_bytes()
    assert raw.startswith(CKPT_MAGIC)
    manifest, arrays = read_checkpoint(path)
    assert manifest["state"]["step"] == 3 and manifest["dtype"] == "<f4"
    # tensors are little-endian float32 right after the manifest
    (n,) = struct.unpack("<Q", raw[len(CKPT_MAGIC):len(CKPT_MAGIC) + 8])
    first = manifest["tensors"][0]
    start = len(CKPT_MAGIC) + 8 + n
    val = struct.unpack("<f", raw[start:start + 4])[0]
    assert val == arrays[first["name"]].ravel()[0]
    other = PolicyNet(TINY, seed=11)
    load_module(other, arrays, "policy")
    for a, b in zip(pol.parameters(), other.parameters()):
        assert torch.equal(a, b)
    wide = PolicyNet(NetConfig(d=16, heads=2, ffn=16, layers=2))
    with pytest.raises(CheckpointError, match="model .* vs checkpoint"):
        load_module(wide, arrays, "policy")
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "bad")
