"""Self-check suites behind the ``verify`` CLI command.

Three families: gradient checks of the differentiable primitives and the
end-to-end forward, equivalence of the vectorized NeXtVLAD against its
nested-loop reference (plus the collapse to NetVLAD at one group and no
expansion), and the GAP metric against its brute-force oracle.  Each check
returns (name, passed, detail).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .gradcheck import grad_check
from .metrics import PredictionSet, gap_at_20, gap_reference
from .rng import Rng
from .vlad import (
    FrameBatchView,
    NetVladConfig,
    NetVladParams,
    NeXtVladConfig,
    NeXtVladParams,
    netvlad_forward,
    nextvlad_forward,
    nextvlad_reference,
    param_count_netvlad,
    param_count_nextvlad,
)


def random_view(rng: Rng, b: int, m: int, n: int, dtype=np.float64,
                lengths=None) -> FrameBatchView:
    frames = rng.normal((b, m, n), dtype=dtype)
    if lengths is None:
        lengths = 1 + rng.integers(b, m)
    return FrameBatchView.from_lengths(frames, lengths)


def cast_params(params, dtype):
    """Recursively cast every parameter tensor and BN buffer of a param
    bundle to ``dtype`` (fresh tensors, same values)."""
    import copy

    out = copy.deepcopy(params)
    stack = [out]
    while stack:
        obj = stack.pop()
        for name in getattr(obj, "__dataclass_fields__", {}):
            value = getattr(obj, name)
            if isinstance(value, Tensor):
                setattr(obj, name, Tensor(value.data.astype(dtype), requires_grad=value.requires_grad))
            elif isinstance(value, BatchNormState):
                value.running_mean = value.running_mean.astype(dtype)
                value.running_var = value.running_var.astype(dtype)
            elif isinstance(value, list):
                stack.extend(v for v in value if hasattr(v, "__dataclass_fields__"))
            elif hasattr(value, "__dataclass_fields__"):
                stack.append(value)
    return out


def nextvlad_params_from_netvlad(net: NetVladParams) -> NeXtVladParams:
    """Embed NetVLAD weights into a NeXtVLAD block with one group, no
    expansion (identity), and the attention gate saturated open."""
    from .vlad import NeXtVladCore

    n = net.core.assign_w.shape[1]
    k = net.core.assign_w.shape[0]
    dtype = net.core.assign_w.dtype
    core = NeXtVladCore(
        expand_w=ad.parameter(np.eye(n, dtype=dtype)),
        expand_b=ad.parameter(np.zeros(n, dtype=dtype)),
        attn_w=ad.parameter(np.zeros((n, 1), dtype=dtype)),
        attn_b=ad.parameter(np.full(1, 1e9, dtype=dtype)),
        assign_w=ad.parameter(net.core.assign_w.data.T.copy()),
        assign_b=ad.parameter(net.core.assign_b.data.copy()),
        anchors=ad.parameter(net.core.anchors.data.copy()),
        groups=1,
    )
    import copy

    return NeXtVladParams(core=core, head=copy.deepcopy(net.head))


def randomize_head_bn(params, rng: Rng) -> None:
    """Give the reduction head's BN a non-identity inference transform so
    equivalence checks exercise it."""
    bn = params.head.bn
    h = bn.gamma.size
    bn.gamma.data = (0.5 + rng.uniform((h,))).astype(bn.gamma.dtype)
    bn.beta.data = rng.normal((h,)).astype(bn.beta.dtype)
    bn.state.running_mean[...] = rng.normal((h,)).astype(bn.state.running_mean.dtype)
    bn.state.running_var[...] = (0.5 + rng.uniform((h,))).astype(bn.state.running_var.dtype)


def random_prediction_set(rng: Rng, max_videos: int = 6, num_classes: int = 12) -> PredictionSet:
    preds = PredictionSet()
    n_videos = 1 + int(rng.integers(1, max_videos)[0])
    for v in range(n_videos):
        n_labels = int(rng.integers(1, 4)[0])  # 0..3 true labels
        labels = rng.choice_without_replacement(num_classes, n_labels).tolist()
        n_preds = 1 + int(rng.integers(1, min(num_classes, 20))[0])
        classes = rng.choice_without_replacement(num_classes, n_preds)
        confs = rng.uniform((n_preds,))
        preds.add_video(f"v{v}", labels, list(zip(classes.tolist(), confs.tolist())))
    if preds.total_true_labels() == 0:
        preds.add_video("pad", [0], [(0, 0.5)])
    return preds


# ---------------------------------------------------------------------------
# check suites
# ---------------------------------------------------------------------------


def gradient_checks(seed: int = 0) -> list:
    rng = Rng(seed)
    results = []

    def check(name, fn, *tensors, **kw):
        report = grad_check(fn, tensors, **kw)
        results.append((f"grad {name}", report.passed, str(report)))

    t = lambda *shape: Tensor(rng.normal(shape))  # noqa: E731
    check("matmul", ad.MATMUL, t(3, 4), t(4, 2))
    check("einsum bmk,bmn->bkn", lambda a, b: ad.einsum2("bmk,bmn->bkn", a, b), t(2, 3, 4), t(2, 3, 5))
    check("softmax", lambda x: ad.softmax(x, axis=-1), t(3, 5))
    check("sigmoid", ad.SIGMOID, t(4,))
    check("softplus", ad.SOFTPLUS, t(6,))
    check("l2_normalize", lambda x: ad.l2_normalize(x, axis=-1), t(3, 4))
    check("reduce_sum", lambda x: ad.reduce_sum(x, axes=(0, 2)), t(2, 3, 4))
    check("concat+narrow", lambda a, b: ad.narrow(ad.concat([a, b], axis=1), 1, 2, 3), t(2, 3), t(2, 4))

    bn_state = BatchNormState(4, dtype=np.float64)
    check("batch_norm train",
          lambda x, g, b: ad.batch_norm(x, g, b, bn_state, training=True),
          t(5, 4), Tensor(1.0 + rng.uniform((4,))), t(4,))
    check("dropout frozen mask",
          lambda x: ad.dropout(x, 0.4, Rng(123), training=True), t(4, 5))

    view = random_view(rng, 2, 3, 4)
    cfg = NeXtVladConfig(input_dim=4, clusters=2, hidden_dim=3, groups=2, expansion=2)
    params = cast_params(NeXtVladParams.create(cfg, rng), np.float64)
    leaves = [view.frames] + [t for _, t in sorted(params.named_parameters().items())]
    report = grad_check(lambda *_: nextvlad_forward(view, params, training=True), leaves)
    results.append(("grad nextvlad_forward end-to-end", report.passed, str(report)))
    return results


def oracle_checks(seed: int = 0, cases: int = 5) -> list:
    rng = Rng(seed)
    results = []
    for case in range(cases):
        g = 1 + int(rng.integers(1, 3)[0])
        k = 1 + int(rng.integers(1, 3)[0])
        lam = 1 + int(rng.integers(1, 2)[0])
        n = g * (1 + int(rng.integers(1, 3)[0]))  # N a multiple of G keeps lam*N divisible
        cfg = NeXtVladConfig(input_dim=n, clusters=k, hidden_dim=3, groups=g, expansion=lam)
        params64 = cast_params(NeXtVladParams.create(cfg, rng), np.float64)
        randomize_head_bn(params64, rng)
        view64 = random_view(rng, 2, 4, n)
        ref = nextvlad_reference(view64, params64)
        got64 = nextvlad_forward(view64, params64, training=False).data
        err64 = np.abs(got64 - ref).max()
        results.append((f"oracle nextvlad float64 case {case}", err64 < 1e-12,
                        f"max abs err {err64:.3e}"))
        params32 = cast_params(params64, np.float32)
        view32 = FrameBatchView(frames=Tensor(view64.frames.data.astype(np.float32)),
                                mask=Tensor(view64.mask.data.astype(np.float32)),
                                lengths=view64.lengths)
        got32 = nextvlad_forward(view32, params32, training=False).data
        err32 = np.abs(got32.astype(np.float64) - ref).max()
        results.append((f"oracle nextvlad float32 case {case}", err32 < 1e-6,
                        f"max abs err {err32:.3e}"))

    # collapse to NetVLAD: one group, identity expansion, open gate
    net_cfg = NetVladConfig(input_dim=5, clusters=3, hidden_dim=4)
    net = cast_params(NetVladParams.create(net_cfg, rng), np.float64)
    randomize_head_bn(net, rng)
    nxt = nextvlad_params_from_netvlad(net)
    view = random_view(rng, 3, 4, 5)
    a = netvlad_forward(view, net, training=False).data
    b = nextvlad_forward(view, nxt, training=False).data
    err = np.abs(a - b).max()
    results.append(("nextvlad collapses to netvlad", err < 1e-6, f"max abs err {err:.3e}"))
    return results


def metric_checks(seed: int = 0, cases: int = 20) -> list:
    rng = Rng(seed)
    results = []
    worst = 0.0
    exact = True
    for _ in range(cases):
        preds = random_prediction_set(rng)
        a, b = gap_at_20(preds), gap_reference(preds)
        exact = exact and (a == b)
        worst = max(worst, abs(a - b))
    results.append(("gap matches brute-force oracle", exact, f"max abs diff {worst:.3e}"))

    perfect = PredictionSet()
    perfect.add_video("v", [3], [(3, 0.9), (1, 0.5), (2, 0.1)])
    results.append(("gap perfect ranking = 1", gap_at_20(perfect) == 1.0,
                    f"got {gap_at_20(perfect)}"))
    miss = PredictionSet()
    miss.add_video("v", [3], [(1, 0.9), (2, 0.5)])
    results.append(("gap total miss = 0", gap_at_20(miss) == 0.0, f"got {gap_at_20(miss)}"))
    return results


def param_count_checks(seed: int = 0, cases: int = 10) -> list:
    rng = Rng(seed)
    results = []
    ok = True
    detail = ""
    for _ in range(cases):
        n = 1 + int(rng.integers(1, 8)[0])
        k = 1 + int(rng.integers(1, 6)[0])
        h = 1 + int(rng.integers(1, 6)[0])
        g = 1 + int(rng.integers(1, 4)[0])
        lam = 1 + int(rng.integers(1, 3)[0])
        if (lam * n) % g:
            n = n * g
        net_cfg = NetVladConfig(input_dim=n, clusters=k, hidden_dim=h)
        nxt_cfg = NeXtVladConfig(input_dim=n, clusters=k, hidden_dim=h, groups=g, expansion=lam)
        net_census = NetVladParams.create(net_cfg, None).weight_census()
        nxt_census = NeXtVladParams.create(nxt_cfg, None).weight_census()
        if net_census != param_count_netvlad(net_cfg):
            ok, detail = False, f"netvlad {net_cfg}: census {net_census} != formula"
        if nxt_census != param_count_nextvlad(nxt_cfg):
            ok, detail = False, f"nextvlad {nxt_cfg}: census {nxt_census} != formula"
    results.append((f"param formulas match census ({cases} random configs)", ok, detail))
    return results


def run_all(seed: int = 0) -> list:
    out = []
    out += gradient_checks(seed)
    out += oracle_checks(seed)
    out += metric_checks(seed)
    out += param_count_checks(seed)
    return out
