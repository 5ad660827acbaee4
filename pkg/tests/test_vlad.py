"""NetVLAD/NeXtVLAD: loop oracles, parameter-count identities, masking."""

import numpy as np
import pytest

from nextvlad.autodiff import Tensor
from nextvlad.gradcheck import grad_check
from nextvlad.rng import Rng
from nextvlad.vlad import (
    FrameBatchView,
    NetVladConfig,
    NetVladParams,
    NeXtVladConfig,
    NeXtVladParams,
    netvlad_descriptor,
    netvlad_forward,
    nextvlad_aggregate,
    nextvlad_descriptor,
    nextvlad_forward,
    nextvlad_reference,
    param_count_netvlad,
    param_count_nextvlad,
)
from nextvlad.verify import (
    cast_params,
    nextvlad_params_from_netvlad,
    random_view,
    randomize_head_bn,
)


def netvlad_descriptor_loops(view, core):
    """Per-index oracle over frames, dims and clusters, float64."""
    import math

    frames = view.frames.data.astype(np.float64)
    mask = view.mask.data.astype(np.float64)
    w = core.assign_w.data.astype(np.float64)
    bias = core.assign_b.data.astype(np.float64)
    anchors = core.anchors.data.astype(np.float64)
    b_sz, m, n = frames.shape
    k = w.shape[0]
    out = np.zeros((b_sz, k * n))
    for b in range(b_sz):
        agg = np.zeros((k, n))
        for i in range(m):
            logits = [bias[ki] + sum(frames[b, i, j] * w[ki, j] for j in range(n))
                      for ki in range(k)]
            zmax = max(logits)
            exps = [math.exp(z - zmax) for z in logits]
            total = sum(exps)
            for ki in range(k):
                alpha = exps[ki] / total
                for j in range(n):
                    agg[ki, j] += mask[b, i] * alpha * (frames[b, i, j] - anchors[ki, j])
        for ki in range(k):
            norm = math.sqrt(sum(agg[ki, j] ** 2 for j in range(n)))
            denom = max(norm, 1e-12)
            for j in range(n):
                out[b, ki * n + j] = agg[ki, j] / denom
    return out


# ---------------------------------------------------------------------------
# parameter counts
# ---------------------------------------------------------------------------


def test_param_count_netvlad_large_config():
    cfg = NetVladConfig(input_dim=1024, clusters=128, hidden_dim=2048)
    assert param_count_netvlad(cfg) == 268_697_600


def test_param_count_netvlad_minimal():
    assert param_count_netvlad(NetVladConfig(input_dim=1, clusters=1, hidden_dim=1)) == 3


def test_param_count_nextvlad_large_config():
    cfg = NeXtVladConfig(input_dim=1024, clusters=128, hidden_dim=2048, groups=8, expansion=2)
    assert param_count_nextvlad(cfg) == 71_352_320


def test_param_count_nextvlad_minimal():
    cfg = NeXtVladConfig(input_dim=1, clusters=1, hidden_dim=1, groups=1, expansion=1)
    assert param_count_nextvlad(cfg) == 5


def test_param_ratio_roughly_four_times_smaller():
    net = param_count_netvlad(NetVladConfig(input_dim=1024, clusters=128, hidden_dim=2048))
    nxt = param_count_nextvlad(
        NeXtVladConfig(input_dim=1024, clusters=128, hidden_dim=2048, groups=8, expansion=2))
    assert abs(net / nxt - 3.77) < 0.01


def test_param_counts_equal_allocation_census_50_random_configs():
    rng = Rng(100)
    for _ in range(50):
        g = 1 + int(rng.integers(1, 4)[0])
        n = g * (1 + int(rng.integers(1, 6)[0]))
        k = 1 + int(rng.integers(1, 6)[0])
        h = 1 + int(rng.integers(1, 8)[0])
        lam = 1 + int(rng.integers(1, 3)[0])
        net_cfg = NetVladConfig(input_dim=n, clusters=k, hidden_dim=h)
        nxt_cfg = NeXtVladConfig(input_dim=n, clusters=k, hidden_dim=h, groups=g, expansion=lam)
        assert NetVladParams.create(net_cfg, None).weight_census() == param_count_netvlad(net_cfg)
        assert NeXtVladParams.create(nxt_cfg, None).weight_census() == param_count_nextvlad(nxt_cfg)


def test_nextvlad_divisibility_enforced():
    with pytest.raises(ValueError, match="divisible"):
        NeXtVladConfig(input_dim=5, clusters=2, hidden_dim=4, groups=3, expansion=2)


# ---------------------------------------------------------------------------
# NetVLAD forward
# ---------------------------------------------------------------------------


def test_netvlad_all_masked_descriptor_is_zero():
    rng = Rng(20)
    cfg = NetVladConfig(input_dim=4, clusters=3, hidden_dim=2)
    params = NetVladParams.create(cfg, rng)
    frames = rng.normal((2, 3, 4), dtype=np.float32)
    view = FrameBatchView.from_lengths(frames, [0, 0])
    desc = netvlad_descriptor(view, params.core)
    assert np.array_equal(desc.data, np.zeros((2, 12), dtype=np.float32))


def test_netvlad_anchor_coincidence_gives_zero():
    rng = Rng(21)
    cfg = NetVladConfig(input_dim=3, clusters=2, hidden_dim=2)
    params = NetVladParams.create(cfg, rng)
    x = rng.normal((3,), dtype=np.float32)
    params.core.anchors.data = np.stack([x, x])  # every anchor equals the frame
    view = FrameBatchView.from_lengths(x.reshape(1, 1, 3), [1])
    desc = netvlad_descriptor(view, params.core)
    assert np.abs(desc.data).max() < 1e-7


def test_netvlad_matches_loop_oracle():
    rng = Rng(22)
    cfg = NetVladConfig(input_dim=4, clusters=2, hidden_dim=3)
    params64 = cast_params(NetVladParams.create(cfg, rng), np.float64)
    view64 = random_view(rng, 1, 3, 4, lengths=[3])
    expected = netvlad_descriptor_loops(view64, params64.core)
    got = netvlad_descriptor(view64, params64.core).data
    assert np.abs(got - expected).max() < 1e-12

    params32 = cast_params(params64, np.float32)
    view32 = FrameBatchView(frames=Tensor(view64.frames.data.astype(np.float32)),
                            mask=Tensor(view64.mask.data.astype(np.float32)),
                            lengths=view64.lengths)
    got32 = netvlad_descriptor(view32, params32.core).data
    assert np.abs(got32 - expected).max() < 1e-6


# ---------------------------------------------------------------------------
# NeXtVLAD forward
# ---------------------------------------------------------------------------


def test_nextvlad_closed_attention_zeroes_descriptor():
    rng = Rng(23)
    cfg = NeXtVladConfig(input_dim=4, clusters=2, hidden_dim=2, groups=2, expansion=2)
    params = NeXtVladParams.create(cfg, rng)
    params.core.attn_w.data = np.zeros_like(params.core.attn_w.data)
    params.core.attn_b.data = np.full_like(params.core.attn_b.data, -1e9)
    view = random_view(rng, 2, 3, 4, dtype=np.float32)
    desc = nextvlad_descriptor(view, params.core)
    assert np.abs(desc.data).max() == 0.0


def test_nextvlad_reduces_to_netvlad():
    rng = Rng(24)
    net_cfg = NetVladConfig(input_dim=5, clusters=3, hidden_dim=4)
    net = cast_params(NetVladParams.create(net_cfg, rng), np.float64)
    randomize_head_bn(net, rng)
    nxt = nextvlad_params_from_netvlad(net)
    view = random_view(rng, 3, 4, 5)
    a = netvlad_forward(view, net, training=False).data
    b = nextvlad_forward(view, nxt, training=False).data
    assert np.abs(a - b).max() < 1e-6


def test_nextvlad_matches_reference_oracle():
    rng = Rng(25)
    cfg = NeXtVladConfig(input_dim=4, clusters=2, hidden_dim=3, groups=2, expansion=2)
    params = cast_params(NeXtVladParams.create(cfg, rng), np.float64)
    randomize_head_bn(params, rng)
    view = random_view(rng, 2, 3, 4)
    expected = nextvlad_reference(view, params)
    got = nextvlad_forward(view, params, training=False).data
    assert np.abs(got - expected).max() < 1e-12


def test_reference_size_bound():
    rng = Rng(26)
    cfg = NeXtVladConfig(input_dim=64, clusters=64, hidden_dim=2, groups=1, expansion=2)
    params = NeXtVladParams.create(cfg, rng)
    view = random_view(rng, 1, 16, 64, dtype=np.float32)  # 16*1*64*128 > 1e5
    with pytest.raises(ValueError, match="size bound"):
        nextvlad_reference(view, params)


def test_nextvlad_zero_weights_closed_form():
    # zero weights: attention sigmoid(0) = 1/2, assignment uniform over K
    rng = Rng(27)
    cfg = NeXtVladConfig(input_dim=4, clusters=2, hidden_dim=2, groups=2, expansion=1)
    params = cast_params(NeXtVladParams.create(cfg, rng), np.float64)
    for t in (params.core.expand_w, params.core.attn_w, params.core.assign_w,
              params.core.anchors):
        t.data = np.zeros_like(t.data)
    params.core.expand_w.data = np.eye(4)
    view = random_view(rng, 1, 3, 4, lengths=[3])
    agg = nextvlad_aggregate(view, params.core).data  # (1, K, D)
    x = view.frames.data[0].reshape(3, 2, 2)  # (M, G, D)
    expected = 0.5 * (1.0 / cfg.clusters) * x.sum(axis=(0, 1))
    for k in range(cfg.clusters):
        assert np.abs(agg[0, k] - expected).max() < 1e-12


def test_nextvlad_single_group_single_cluster_hand_expansion():
    # one group, one cluster: aggregate = 1/2 * (sum_i x_i - M*c)
    rng = Rng(28)
    cfg = NeXtVladConfig(input_dim=3, clusters=1, hidden_dim=2, groups=1, expansion=1)
    params = cast_params(NeXtVladParams.create(cfg, rng), np.float64)
    params.core.expand_w.data = np.eye(3)
    params.core.expand_b.data = np.zeros(3)
    params.core.attn_w.data = np.zeros_like(params.core.attn_w.data)
    params.core.attn_b.data = np.zeros_like(params.core.attn_b.data)
    m = 4
    view = random_view(rng, 1, m, 3, lengths=[m])
    agg = nextvlad_aggregate(view, params.core).data[0, 0]
    c = params.core.anchors.data[0]
    expected = 0.5 * (view.frames.data[0].sum(axis=0) - m * c)
    assert np.abs(agg - expected).max() < 1e-12


def test_assignment_normalizes_over_clusters_not_groups():
    # with zero assignment weights the per-group softmax must give 1/K, not 1/(G*K)
    rng = Rng(29)
    cfg = NeXtVladConfig(input_dim=4, clusters=4, hidden_dim=2, groups=2, expansion=1)
    params = cast_params(NeXtVladParams.create(cfg, rng), np.float64)
    params.core.assign_w.data = np.zeros_like(params.core.assign_w.data)
    params.core.assign_b.data = np.zeros_like(params.core.assign_b.data)
    params.core.anchors.data = np.zeros_like(params.core.anchors.data)
    params.core.attn_b.data = np.full_like(params.core.attn_b.data, 1e9)  # gate open
    view = random_view(rng, 1, 2, 4, lengths=[2])
    agg = nextvlad_aggregate(view, params.core).data
    x = view.frames.data[0] @ params.core.expand_w.data + params.core.expand_b.data
    grouped = x.reshape(2, 2, 2).sum(axis=(0, 1))  # sum over frames and groups
    for k in range(cfg.clusters):
        assert np.abs(agg[0, k] - grouped / cfg.clusters).max() < 1e-12


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------


def _append_junk(view, extra, rng):
    b, m, n = view.frames.shape
    junk = (rng.uniform((b, extra, n)) * 20 - 10).astype(view.frames.data.dtype)
    frames = np.concatenate([view.frames.data, junk], axis=1)
    return FrameBatchView.from_lengths(frames, view.lengths)


@pytest.mark.parametrize("trial", range(5))
def test_mask_invariance(trial):
    rng = Rng(1000 + trial)
    cfg = NeXtVladConfig(input_dim=6, clusters=3, hidden_dim=4, groups=2, expansion=2)
    params = NeXtVladParams.create(cfg, rng)
    view = random_view(rng, 3, 5, 6, dtype=np.float32)
    base = nextvlad_descriptor(view, params.core).data
    extra = 1 + int(rng.integers(1, 10)[0])
    padded = _append_junk(view, extra, rng)
    got = nextvlad_descriptor(padded, params.core).data
    assert np.abs(got - base).max() < 1e-6


def test_permutation_of_valid_frames_is_invariant():
    rng = Rng(31)
    cfg = NeXtVladConfig(input_dim=4, clusters=2, hidden_dim=3, groups=2, expansion=2)
    params = NeXtVladParams.create(cfg, rng)
    frames = rng.normal((1, 5, 4), dtype=np.float32)
    view = FrameBatchView.from_lengths(frames, [5])
    base = nextvlad_descriptor(view, params.core).data
    perm = Rng(32).permutation(5)
    shuffled = FrameBatchView.from_lengths(frames[:, perm], [5])
    got = nextvlad_descriptor(shuffled, params.core).data
    assert np.abs(got - base).max() < 1e-6


def test_intra_normalized_blocks_have_unit_or_zero_norm():
    rng = Rng(33)
    cfg = NeXtVladConfig(input_dim=4, clusters=3, hidden_dim=2, groups=2, expansion=2)
    params = NeXtVladParams.create(cfg, rng)
    view = random_view(rng, 2, 4, 4, dtype=np.float32, lengths=[4, 0])
    desc = nextvlad_descriptor(view, params.core).data.reshape(2, 3, -1)
    norms = np.linalg.norm(desc, axis=-1)
    assert np.abs(norms[0] - 1.0).max() < 1e-5  # real video: unit blocks
    assert np.abs(norms[1]).max() == 0.0  # fully masked video: zero blocks


def test_both_forwards_grad_check_end_to_end():
    rng = Rng(34)
    net_cfg = NetVladConfig(input_dim=3, clusters=2, hidden_dim=2)
    net = cast_params(NetVladParams.create(net_cfg, rng), np.float64)
    view = random_view(rng, 2, 3, 3)
    leaves = [view.frames] + [t for _, t in sorted(net.named_parameters().items())]
    report = grad_check(lambda *_: netvlad_forward(view, net, training=True), leaves)
    assert report.passed, str(report)

    nxt_cfg = NeXtVladConfig(input_dim=4, clusters=2, hidden_dim=2, groups=2, expansion=2)
    nxt = cast_params(NeXtVladParams.create(nxt_cfg, rng), np.float64)
    view = random_view(rng, 2, 3, 4)
    leaves = [view.frames] + [t for _, t in sorted(nxt.named_parameters().items())]
    report = grad_check(lambda *_: nextvlad_forward(view, nxt, training=True), leaves)
    assert report.passed, str(report)


def test_frame_dim_mismatch_raises():
    rng = Rng(35)
    cfg = NeXtVladConfig(input_dim=4, clusters=2, hidden_dim=2, groups=2, expansion=2)
    params = NeXtVladParams.create(cfg, rng)
    view = random_view(rng, 1, 2, 5, dtype=np.float32)
    with pytest.raises(ValueError, match="dim"):
        nextvlad_descriptor(view, params.core)
