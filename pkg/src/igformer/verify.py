"""Self-check battery behind the `verify` command: finite-difference gradient
checks for every differentiable op and the end-to-end model, the brute-force
distance-graph oracle, and the library's structural invariants. Each check
carries a stable identifier so failures name what broke.

`corrupt_op` deliberately mis-scales one op's backward pass; the battery must
then fail on that op's gradient check (negative control for the harness).
"""

from __future__ import annotations

import math
import zlib

import numpy as np

from . import tensor as T
from .attention import GiMsaParams, fuse_graphs, gi_msa, sdig
from .gradcheck import check_gradients
from .graphs import (InteractionGraphs, build_interaction_graphs, knn_threshold,
                     pairwise_distance, read_sidecar, write_sidecar)
from .model import ModelConfig, expected_param_count, init_params
from .graphs import DistanceGraphConfig
from .skeleton import (InteractionSample, SkeletonSequence, builtin_part_map,
                       read_canonical, write_canonical)
from .spm import SpmConfig, spm_forward
from .training import TrainConfig, lr_at, make_synth_dataset


class CheckFailure(AssertionError):
    pass


def _rand(rng, *shape):
    return T.Tensor(rng.normal(size=shape), requires_grad=True)


def _gradcheck_cases():
    """(identifier, case builder) for every differentiable primitive.

    Ops are looked up on the tensor module at call time so the corruption
    hook is visible to these checks.
    """
    def simple(op_name, *shapes, out_shape=None, extra=()):
        def case(rng):
            op = getattr(T, op_name)
            tensors = [_rand(rng, *s) for s in shapes]
            w = T.Tensor(rng.normal(size=out_shape or shapes[0]))
            return (lambda: (op(*tensors, *extra) * w).sum()), tensors
        return case

    cases = {
        "add": simple("add", (3, 4), (3, 4)),
        "add-broadcast": simple("add", (3, 4), (4,), out_shape=(3, 4)),
        "mul": simple("mul", (3, 4), (3, 4)),
        "scalar-mul": simple("mul", (3, 4), (), out_shape=(3, 4)),
        "matmul": simple("matmul", (3, 4), (4, 2), out_shape=(3, 2)),
        "transpose": simple("transpose", (3, 4), out_shape=(4, 3)),
        "softmax_rows": simple("softmax_rows", (4, 5)),
        "gelu": simple("gelu", (4, 4)),
        "layer_norm": simple("layer_norm", (3, 6), (6,), (6,), out_shape=(3, 6)),
        "reshape": simple("reshape", (2, 6), out_shape=(3, 4), extra=((3, 4),)),
        "broadcast_to": simple("broadcast_to", (1, 4), out_shape=(3, 4), extra=((3, 4),)),
        "mean_axis": simple("mean_axis", (4, 3, 2), out_shape=(4, 2), extra=(1,)),
        "slice_axis": simple("slice_axis", (4, 6), out_shape=(4, 3), extra=(1, 1, 4)),
        "linear_interp_resize": simple("linear_interp_resize", (3, 4, 2),
                                       out_shape=(3, 7, 2), extra=(7,)),
    }

    def concat_case(rng):
        a, b = _rand(rng, 3, 2), _rand(rng, 3, 3)
        w = T.Tensor(rng.normal(size=(3, 5)))
        return (lambda: (T.concat([a, b], axis=1) * w).sum()), [a, b]
    cases["concat"] = concat_case

    def permute_case(rng):
        x = _rand(rng, 5, 3)
        perm = rng.permutation(5)
        w = T.Tensor(rng.normal(size=(5, 3)))
        return (lambda: (T.permute_rows(x, perm) * w).sum()), [x]
    cases["permute_rows"] = permute_case

    def conv_case(rng):
        x, k, b = _rand(rng, 9, 3, 2), _rand(rng, 2, 3, 3, 2), _rand(rng, 2)
        w = T.Tensor(rng.normal(size=(T.conv_steps(9, 3, 2, 1), 2)))
        return (lambda: (T.conv2d(x, k, b, stride=2, padding=1) * w).sum()), [x, k, b]
    cases["conv2d"] = conv_case

    def ce_case(rng):
        x = _rand(rng, 3, 4)
        labels = rng.integers(0, 4, size=3)
        return (lambda: T.cross_entropy(x, labels)), [x]
    cases["cross_entropy"] = ce_case
    return cases


def _tiny_model(seed=0, **kw):
    defaults = dict(num_classes=3, D=8, h=2, N=1,
                    spm=SpmConfig(P=4, stride=4, padding=0, D=8, T=8),
                    dsig=DistanceGraphConfig(k=3))
    defaults.update(kw)
    return init_params(ModelConfig(**defaults), seed=seed)


def _tiny_sample(rng, cfg, label=0):
    part_map = builtin_part_map(15)
    sample = InteractionSample(SkeletonSequence(rng.normal(size=(cfg.spm.T, 15, 3))),
                               SkeletonSequence(rng.normal(size=(cfg.spm.T, 15, 3))),
                               label=label)
    return sample, build_interaction_graphs(sample, part_map, cfg.spm, cfg.dsig.k)


def _brute_force_dsig(coords_a, coords_b, part_map, cfg, k):
    # independent scalar-loop pipeline (centroids, clipped window means,
    # distances, per-row sort with <=-tie inclusion)
    def tokens(coords):
        t = coords.shape[0]
        per_part = []
        for _, idx in part_map.parts:
            cent = np.zeros((t, 3))
            for f in range(t):
                for axis in range(3):
                    s = 0.0
                    for j in idx:
                        s += coords[f, j, axis]
                    cent[f, axis] = s / len(idx)
            steps = np.zeros((cfg.L, 3))
            for w in range(cfg.L):
                lo = max(0, w * cfg.stride - cfg.padding)
                hi = min(t, w * cfg.stride - cfg.padding + cfg.P)
                for axis in range(3):
                    s = 0.0
                    for f in range(lo, hi):
                        s += cent[f, axis]
                    steps[w, axis] = s / (hi - lo)
            per_part.append(steps)
        return np.array([per_part[p][step] for step in range(cfg.L)
                         for p in range(part_map.B)])

    ta, tb = tokens(coords_a), tokens(coords_b)
    m = ta.shape[0]
    dist = np.zeros((m, m))
    for a in range(m):
        for b in range(m):
            s = 0.0
            for axis in range(3):
                d = ta[a, axis] - tb[b, axis]
                s += d * d
            dist[a, b] = math.sqrt(s)
    dsig = np.zeros((m, m))
    for a in range(m):
        thresh = sorted(dist[a])[k - 1]
        for b in range(m):
            dsig[a, b] = 1.0 if dist[a, b] <= thresh else 0.0
    return dist, dsig


def _check_op_gradients():
    results = []
    for name, case in _gradcheck_cases().items():
        def run(case=case, seed=zlib.crc32(name.encode())):
            rng = np.random.default_rng(seed)
            for _ in range(20):
                build, params = case(rng)
                check_gradients(build, params, tol=1e-4)
        results.append((f"tensor.gradcheck.{name}", run))
    return results


def _structural_checks():
    checks = []

    def check(name):
        def deco(fn):
            checks.append((name, fn))
            return fn
        return deco

    @check("tensor.matmul.identity-and-zero")
    def _():
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 4))
        assert np.array_equal(T.matmul(T.Tensor(np.eye(4)), T.Tensor(a)).data, a)
        assert np.array_equal(T.matmul(T.Tensor(a), T.Tensor(np.zeros((4, 4)))).data,
                              np.zeros((4, 4)))

    @check("tensor.softmax.row-sums")
    def _():
        rng = np.random.default_rng(1)
        x = rng.uniform(-1e4, 1e4, size=(30, 9))
        y = T.softmax_rows(T.Tensor(x)).data
        assert np.abs(y.sum(axis=1) - 1.0).max() < 1e-6

    @check("tensor.resize.identity-when-sizes-match")
    def _():
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 5, 3))
        assert np.array_equal(T.linear_interp_resize(T.Tensor(x), 5).data, x)

    @check("spm.step-count-formula")
    def _():
        rng = np.random.default_rng(3)
        for _ in range(30):
            t = int(rng.integers(6, 48))
            p = int(rng.integers(2, 8))
            stride = int(rng.integers(1, 6))
            padding = int(rng.integers(0, p))
            want = T.conv_steps(t, p, stride, padding)
            if want < 1:
                continue
            out = T.conv2d(T.Tensor(rng.normal(size=(t, p))),
                           T.Tensor(rng.normal(size=(1, p, p))),
                           stride=stride, padding=padding)
            assert out.shape[0] == want
        assert T.conv_steps(256, 16, 10, 2) == 25

    @check("spm.layout.time-major-roundtrip")
    def _():
        rng = np.random.default_rng(4)
        cfg = SpmConfig(P=4, stride=2, padding=0, D=3, T=12)
        part_map = builtin_part_map(15)
        kernel = T.Tensor(rng.normal(scale=0.1, size=(3, 4, 4, 3)))
        bias = T.Tensor(np.zeros(3))
        seq = SkeletonSequence(rng.normal(size=(12, 15, 3)))
        bpt = spm_forward(seq, part_map, cfg, kernel, bias)
        from .spm import partition
        for p, block in enumerate(partition(seq, part_map)):
            resized = T.linear_interp_resize(T.Tensor(block), cfg.P)
            y = T.conv2d(resized, kernel, bias, stride=cfg.stride, padding=cfg.padding)
            for step in range(cfg.L):
                assert np.array_equal(bpt.tokens.data[step * 5 + p], y.data[step])

    @check("spm.shared-projection.parameter-count")
    def _():
        model = _tiny_model()
        total = sum(p.data.size for p in model.named_parameters().values())
        assert total == expected_param_count(model.cfg)

    @check("dsig.brute-force-oracle")
    def _():
        rng = np.random.default_rng(5)
        part_map = builtin_part_map(15)
        cfg = SpmConfig(P=8, stride=4, padding=2, D=2, T=40)
        for _ in range(20):
            sample = InteractionSample(
                SkeletonSequence(rng.normal(size=(40, 15, 3))),
                SkeletonSequence(rng.normal(size=(40, 15, 3))), label=0)
            g = build_interaction_graphs(sample, part_map, cfg, k=6)
            dist, dsig = _brute_force_dsig(sample.person_a.coords,
                                           sample.person_b.coords, part_map, cfg, 6)
            assert np.array_equal(g.A_ab, dist)
            assert np.array_equal(g.dsig_ab, dsig)

    @check("dsig.translation-invariance")
    def _():
        rng = np.random.default_rng(6)
        part_map = builtin_part_map(15)
        cfg = SpmConfig(P=8, stride=4, padding=2, D=2, T=40)
        sample = InteractionSample(SkeletonSequence(rng.normal(size=(40, 15, 3))),
                                   SkeletonSequence(rng.normal(size=(40, 15, 3))),
                                   label=0)
        v = np.array([2.0, -1.0, 0.5])
        moved = InteractionSample(SkeletonSequence(sample.person_a.coords + v),
                                  SkeletonSequence(sample.person_b.coords + v),
                                  label=0)
        g0 = build_interaction_graphs(sample, part_map, cfg, k=5)
        g1 = build_interaction_graphs(moved, part_map, cfg, k=5)
        assert np.array_equal(g0.dsig_ab, g1.dsig_ab)
        assert np.array_equal(g0.dsig_ba, g1.dsig_ba)

    @check("dsig.row-sums-and-tie-inclusion")
    def _():
        rng = np.random.default_rng(7)
        for _ in range(10):
            A = rng.uniform(size=(12, 12))
            dsig = knn_threshold(A, 4)
            assert (dsig.sum(axis=1) == 4).all()
        tied = np.array([[0.1, 0.3, 0.3, 0.9]])
        assert knn_threshold(tied, 2).sum() == 3

    @check("dsig.direction-asymmetry")
    def _():
        A = np.array([[0.1, 0.2, 5.0], [4.0, 0.3, 0.4], [0.15, 6.0, 0.5]])
        assert not np.array_equal(knn_threshold(A, 1), knn_threshold(A.T, 1).T)

    @check("gimsa.sdig.elementwise-oracle")
    def _():
        rng = np.random.default_rng(8)
        B, L, d = 2, 3, 2
        m = B * L
        h_me, h_ne = rng.normal(size=(m, d)), rng.normal(size=(m, d))
        wq, wk = rng.normal(size=(d, d)), rng.normal(size=(d, d))
        out = sdig(T.Tensor(h_me), T.Tensor(h_ne), T.Tensor(wq), T.Tensor(wk),
                   B=B, L=L, scale=math.sqrt(d))
        for a in range(m):
            for b in range(m):
                tb, pb = divmod(b, B)
                tc = sum(h_ne[t * B + pb] for t in range(L)) / L
                sc = sum(h_ne[tb * B + p] for p in range(B)) / B
                want = float((h_me[a] @ wq) @ ((h_ne[b] + tc + sc) @ wk)) / math.sqrt(d)
                assert abs(out.data[a, b] - want) < 1e-12

    @check("gimsa.fused-rows-stochastic")
    def _():
        rng = np.random.default_rng(9)
        for _ in range(10):
            dsig = (rng.uniform(size=(6, 6)) > 0.5).astype(float)
            r = fuse_graphs(dsig, T.Tensor(rng.normal(size=(6, 6))),
                            T.Tensor(rng.normal()))
            assert np.abs(r.data.sum(axis=1) - 1.0).max() < 1e-6

    @check("gimsa.sdig.row-shift-invariance")
    def _():
        rng = np.random.default_rng(10)
        s = rng.normal(size=(4, 4))
        shifted = s.copy()
        shifted[1] += 3.0
        r0 = fuse_graphs(np.zeros((4, 4)), T.Tensor(s), T.Tensor(1.0)).data
        r1 = fuse_graphs(np.zeros((4, 4)), T.Tensor(shifted), T.Tensor(1.0)).data
        assert np.allclose(r0, r1, atol=1e-12)

    @check("gimsa.direction-shared-weights")
    def _():
        rng = np.random.default_rng(11)
        m, d = 4, 2
        dist = pairwise_distance(rng.normal(size=(m, 3)), rng.normal(size=(m, 3)))
        g = InteractionGraphs(dist, dist.T.copy(), knn_threshold(dist, 2),
                              knn_threshold(dist.T.copy(), 2), 2)
        wm = T.Tensor(rng.normal(size=(d, d)), requires_grad=True)
        params = GiMsaParams(wq=[_rand(rng, d, d)], wk=[_rand(rng, d, d)],
                             wv=[_rand(rng, d, d)],
                             alpha=[T.Tensor(1.0, requires_grad=True)],
                             wm=wm, wn=wm)
        h_me, h_ne = _rand(rng, m, d), _rand(rng, m, d)
        out_m, out_n = gi_msa(h_me, h_ne, g, params, B=2, L=2)
        (out_m.sum() + out_n.sum()).backward()
        assert params.wq[0].grad is not None and np.abs(params.wq[0].grad).max() > 0
        assert abs(float(params.alpha[0].grad)) > 0

    @check("gimsa.person-swap-equivariance")
    def _():
        rng = np.random.default_rng(12)
        m, d = 4, 2
        dist = pairwise_distance(rng.normal(size=(m, 3)), rng.normal(size=(m, 3)))
        g = InteractionGraphs(dist, dist.T.copy(), knn_threshold(dist, 2),
                              knn_threshold(dist.T.copy(), 2), 2)
        wm = T.Tensor(rng.normal(size=(d, d)))
        params = GiMsaParams(wq=[T.Tensor(rng.normal(size=(d, d)))],
                             wk=[T.Tensor(rng.normal(size=(d, d)))],
                             wv=[T.Tensor(rng.normal(size=(d, d)))],
                             alpha=[T.Tensor(1.0)], wm=wm, wn=wm)
        x_a, x_b = T.Tensor(rng.normal(size=(m, d))), T.Tensor(rng.normal(size=(m, d)))
        out_a, out_b = gi_msa(x_a, x_b, g, params, B=2, L=2)
        sw_b, sw_a = gi_msa(x_b, x_a, g.swapped(), params, B=2, L=2)
        assert np.array_equal(out_a.data, sw_a.data)
        assert np.array_equal(out_b.data, sw_b.data)

    @check("model.end-to-end-gradcheck")
    def _():
        rng = np.random.default_rng(13)
        model = _tiny_model(seed=1)
        sample, graphs = _tiny_sample(rng, model.cfg, label=1)

        def build():
            model.zero_grads()
            loss, _ = model.loss(sample, graphs)
            return loss

        params = [model.named_parameters()[n] for n in sorted(model.named_parameters())]
        check_gradients(build, params, tol=1e-4)

    @check("model.person-swap-logits")
    def _():
        rng = np.random.default_rng(14)
        model = _tiny_model(seed=2, tie_person_branches=True)
        sample, graphs = _tiny_sample(rng, model.cfg)
        swapped = InteractionSample(sample.person_b, sample.person_a, label=0)
        assert np.array_equal(model.forward(sample, graphs).data,
                              model.forward(swapped, graphs.swapped()).data)

    @check("model.cross-person-gradient")
    def _():
        from .model import itb_forward
        rng = np.random.default_rng(15)
        for mode, expect in (("no_gimsa", False), ("full", True)):
            model = _tiny_model(seed=3, mode=mode)
            sample, graphs = _tiny_sample(rng, model.cfg)
            h_m = model.tokenize(sample.person_a).tokens
            h_n = T.Tensor(model.tokenize(sample.person_b).tokens.data,
                           requires_grad=True)
            out_m, _ = itb_forward(h_m, h_n, graphs, model.itbs[0], model.cfg,
                                   5, model.cfg.spm.L)
            out_m.sum().backward()
            got = h_n.grad is not None and np.abs(h_n.grad).max() > 0
            assert got == expect, f"mode={mode}"

    @check("model.forward-determinism")
    def _():
        rng = np.random.default_rng(16)
        model = _tiny_model(seed=4)
        sample, graphs = _tiny_sample(rng, model.cfg)
        assert np.array_equal(model.forward(sample, graphs).data,
                              model.forward(sample, graphs).data)

    @check("trainer.nesterov-closed-form")
    def _():
        w_ref, v_ref = 1.0, 0.0
        w, v = np.array([1.0]), np.zeros(1)
        for _ in range(5):
            g = w_ref
            v_ref = 0.9 * v_ref + g
            w_ref = w_ref - 0.1 * (g + 0.9 * v_ref)
            T.sgd_nesterov_step([w], [w.copy()], [v], lr=0.1, momentum=0.9)
            assert w[0] == w_ref

    @check("trainer.lr-schedule")
    def _():
        cfg = TrainConfig()
        assert lr_at(0, cfg) == 0.01
        assert lr_at(29, cfg) == 0.01
        assert abs(lr_at(30, cfg) - 0.001) < 1e-15
        assert abs(lr_at(40, cfg) - 0.0001) < 1e-16

    @check("skeleton.partition-maps")
    def _():
        for j in (15, 25):
            m = builtin_part_map(j)
            union = sorted(i for _, idx in m.parts for i in idx)
            assert union == list(range(j)) and m.B == 5

    @check("skeleton.canonical-roundtrip")
    def _():
        rng = np.random.default_rng(17)
        sample = InteractionSample(SkeletonSequence(rng.normal(size=(5, 15, 3))),
                                   SkeletonSequence(rng.normal(size=(5, 15, 3))),
                                   label=3, source_id="verify")
        back = read_canonical(write_canonical(sample))
        assert np.array_equal(back.person_a.coords, sample.person_a.coords)
        assert np.array_equal(back.person_b.coords, sample.person_b.coords)

    @check("graphs.sidecar-roundtrip")
    def _():
        rng = np.random.default_rng(18)
        part_map = builtin_part_map(15)
        cfg = SpmConfig(P=8, stride=4, padding=2, D=2, T=40)
        sample = InteractionSample(SkeletonSequence(rng.normal(size=(40, 15, 3))),
                                   SkeletonSequence(rng.normal(size=(40, 15, 3))),
                                   label=0)
        g = build_interaction_graphs(sample, part_map, cfg, k=5)
        m, k, ab, ba = read_sidecar(write_sidecar(g))
        assert (m, k) == (g.M, 5)
        assert np.array_equal(ab, g.dsig_ab) and np.array_equal(ba, g.dsig_ba)

    @check("trainer.synthetic-generator")
    def _():
        data = make_synth_dataset(8, classes=4, T=16, seed=0)
        labels = [s.label for s in data]
        assert all(labels.count(c) == 2 for c in range(4))
        d0 = data[0]
        start = np.linalg.norm(d0.person_a.coords[0].mean(0) - d0.person_b.coords[0].mean(0))
        end = np.linalg.norm(d0.person_a.coords[-1].mean(0) - d0.person_b.coords[-1].mean(0))
        assert end < start  # class 0 approaches

    return checks


def _corrupting(op_name):
    """Wrap igformer.tensor.<op_name> so its backward is scaled wrongly."""
    original = getattr(T, op_name)

    def wrapper(*args, **kwargs):
        out = original(*args, **kwargs)
        if getattr(out, "_backward_fn", None) is not None:
            inner = out._backward_fn
            out._backward_fn = lambda g: inner(g * 1.001)
        return out

    return original, wrapper


def run_checks(corrupt_op=None, log_fn=None):
    """Run the whole battery; returns (all_passed, [(id, passed, detail)])."""
    entries = _check_op_gradients() + _structural_checks()
    if corrupt_op is not None and not any(
            name == f"tensor.gradcheck.{corrupt_op}" for name, _ in entries):
        raise ValueError(f"no gradient check named {corrupt_op!r}")
    original = None
    if corrupt_op is not None:
        original, wrapper = _corrupting(corrupt_op)
        setattr(T, corrupt_op, wrapper)
    results = []
    try:
        for name, fn in entries:
            try:
                fn()
                results.append((name, True, ""))
            except Exception as exc:
                results.append((name, False, f"{type(exc).__name__}: {exc}"))
            if log_fn is not None:
                ok, detail = results[-1][1], results[-1][2]
                log_fn(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f"  {detail}" if detail else ""))
    finally:
        if original is not None:
            setattr(T, corrupt_op, original)
    return all(ok for _, ok, _ in results), results
