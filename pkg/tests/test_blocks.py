import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segdec.blocks import (BlockSpecError, NonBottleneckSpec, build_d5_block, build_nonbottleneck,
                           gradient_fanout)
from segdec.gradcheck import grad_check
from segdec.graph import forward, init_params, standalone
from segdec.ops import weighted_sum
from segdec.tensor import Tape, Tensor, backprop


def run(sub, channels, x, params=None, seed=0):
    g = standalone(sub, channels)
    params = params if params is not None else init_params(g, seed)
    return g, params, forward(g, params, x)


def test_default_type1_node_counts():
    sub = build_nonbottleneck(NonBottleneckSpec())
    # entry 1x1, 3x1, 1x3, k3, k5, two post 1x1s
    assert sub.count("conv") == 7
    assert sub.count("add") == 3
    assert [n.name for n in sub.nodes if n.role == "branch_fuse"] == ["nb.branch_fuse"]


def test_flag_variants_change_counts():
    no_post = build_nonbottleneck(NonBottleneckSpec(use_post_1x1=False))
    assert no_post.count("conv") == 5
    no_pre = build_nonbottleneck(NonBottleneckSpec(use_pre_1x1=False, use_post_1x1=False))
    assert no_pre.count("conv") == 4
    single_branch = build_nonbottleneck(NonBottleneckSpec(parallel_kernels=(1,), use_post_1x1=False))
    assert single_branch.count("add") == 2  # nothing to fuse
    two_pairs = build_nonbottleneck(NonBottleneckSpec(oned_pairs=2))
    assert two_pairs.count("conv") == 9
    single = build_nonbottleneck(NonBottleneckSpec(skip_mode="single"))
    assert single.count("add") == 2


def test_batch_norm_flag_inserts_bn_before_each_relu():
    sub = build_nonbottleneck(NonBottleneckSpec(batch_norm=True))
    assert sub.count("bn") == 5  # entry, 3x1, 1x3, k3, k5


def test_d5_block_counts():
    assert build_d5_block(1).count("conv") == 4
    assert build_d5_block(1).count("add") == 1
    assert build_d5_block(2).count("conv") == 5
    for i in (3, 4):
        b = build_d5_block(i)
        assert (b.count("conv"), b.count("add"), b.count("relu")) == (1, 0, 1)


@pytest.mark.parametrize("kwargs", [
    dict(variant="type1", dilation=2),
    dict(parallel_kernels=()),
    dict(parallel_kernels=(3, 4)),
    dict(skip_mode="both"),
    dict(variant="type3"),
])
def test_invalid_specs(kwargs):
    with pytest.raises(BlockSpecError):
        NonBottleneckSpec(**kwargs)


def test_gradient_fanout():
    assert gradient_fanout(build_nonbottleneck(NonBottleneckSpec())) == 3
    assert gradient_fanout(build_nonbottleneck(NonBottleneckSpec(skip_mode="single"))) == 2
    assert gradient_fanout(build_nonbottleneck(NonBottleneckSpec("type2", dilation=2))) == 3
    from segdec.graph import NodeSpec
    assert gradient_fanout(NodeSpec("c", "conv")) == 1


@pytest.mark.parametrize("spec", [NonBottleneckSpec(), NonBottleneckSpec("type2", dilation=2),
                                  NonBottleneckSpec(skip_mode="single", use_post_1x1=False)])
def test_zero_weights_pass_gradient_through_identity_skip(spec):
    rng = np.random.default_rng(3)
    sub = build_nonbottleneck(spec)
    g = standalone(sub, 4)
    params = {k: Tensor(np.zeros_like(p.data)) for k, p in init_params(g).items()}
    x = Tensor(rng.uniform(0.1, 1.0, (2, 4, 6, 7)))
    incoming = rng.standard_normal((2, 4, 6, 7))
    with Tape() as tape:
        y = forward(g, params, x)
        loss = weighted_sum(y, incoming)
    np.testing.assert_array_equal(y.data, x.data)
    [gx] = backprop(tape, loss, [x])
    assert np.array_equal(gx, incoming)


@settings(max_examples=15, deadline=None)
@given(h=st.integers(3, 9), w=st.integers(3, 9), dil=st.integers(1, 3), c=st.integers(1, 4),
       seed=st.integers(0, 100))
def test_blocks_preserve_shape(h, w, dil, c, seed):
    x = Tensor(np.random.default_rng(seed).standard_normal((1, c, h, w)))
    for variant in ("type1", "type2"):
        spec = NonBottleneckSpec(variant, channels=c, dilation=dil if variant == "type2" else 1)
        _, _, y = run(build_nonbottleneck(spec), c, x, seed=seed)
        assert y.shape == x.shape
    for i in (1, 2, 3, 4):
        _, _, y = run(build_d5_block(i, c), c, x, seed=seed)
        assert y.shape == x.shape


def test_type2_at_dilation_one_equals_type1():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 4, 8, 8)))
    g1, p1, y1 = run(build_nonbottleneck(NonBottleneckSpec("type1")), 4, x)
    _, _, y2 = run(build_nonbottleneck(NonBottleneckSpec("type2", dilation=1)), 4, x, params=p1)
    np.testing.assert_array_equal(y1.data, y2.data)


def test_dilation_changes_type2_output():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 4, 9, 9)))
    _, p, y1 = run(build_nonbottleneck(NonBottleneckSpec("type2", dilation=1)), 4, x)
    _, _, y2 = run(build_nonbottleneck(NonBottleneckSpec("type2", dilation=2)), 4, x, params=p)
    assert not np.allclose(y1.data, y2.data)


@pytest.mark.parametrize("spec", [NonBottleneckSpec(channels=2), NonBottleneckSpec("type2", channels=2, dilation=2)])
def test_block_gradients(spec):
    rng = np.random.default_rng(7)
    g = standalone(build_nonbottleneck(spec), 2)
    params = init_params(g, 1)
    for name, p in params.items():
        if name.endswith(".bias"):
            p.data = rng.uniform(0.05, 0.2, p.shape)  # keep relus off their kinks
    x = Tensor(rng.standard_normal((1, 2, 6, 5)))
    probe = rng.standard_normal((1, 2, 6, 5))
    f = lambda _: weighted_sum(forward(g, params, x), probe)
    assert grad_check(f, x).passed
    for name in ("nb.k5.weight", "nb.oned1.3x1.weight", "nb.entry1x1.bias"):
        rep = grad_check(f, params[name])
        assert rep.passed, (name, rep.max_rel_error)
