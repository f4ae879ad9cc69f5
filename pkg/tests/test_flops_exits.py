import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynperceiver import tensor as T
from dynperceiver.config import get_preset
from dynperceiver.errors import ContractError, NumericalError
from dynperceiver.exits import ExitPolicy, batch_evaluate, confidence, infer, write_trace_log
from dynperceiver.flops import flops_profile, measured_profile
from dynperceiver.model import build_model
from dynperceiver.nn import Conv2d, Linear
from dynperceiver.tensor import Tensor

from conftest import random_tiny_config

UNREACHABLE = (1.01, 1.01, 1.01, 0.0)


def _randomized(config, seed):
    """A model with larger weights so exit confidences spread out."""
    model = build_model(config, seed)
    r = np.random.default_rng(seed)
    for path, p in model.named_parameters():
        if p.ndim >= 2:
            p.data = r.normal(size=p.shape) / np.sqrt(np.prod(p.shape[1:]))
    return model


@pytest.fixture(scope="module")
def spread_model():
    return _randomized(get_preset("tiny"), 3)


@pytest.fixture(scope="module")
def images():
    c = get_preset("tiny").image
    return np.random.default_rng(0).normal(size=(12, c.channels, c.height, c.width))


def post_hoc_exit(logits: dict, n: int, thresholds, exits=(1, 2, 3, 4)) -> int:
    for k, theta in zip(exits, thresholds):
        if confidence(logits[k].data[n]) >= theta:
            return k
    return exits[-1]


# -- FLOPs ---------------------------------------------------------------------------

def test_linear_flops_example():
    lin = Linear(10, 5)
    with T.count_flops() as c:
        lin(Tensor(np.zeros((1, 10))))
    assert c.total == 100 + 5
    assert c.by_op["linear"] == 100 and c.total - c.by_op["linear"] == 5


def test_pointwise_conv_flops_example():
    conv = Conv2d(2, 3, kernel=1)
    with T.count_flops() as c:
        conv(Tensor(np.zeros((1, 2, 4, 4))))
    assert c.total == 192 + 48


@pytest.mark.parametrize("seed", range(6))
def test_closed_form_equals_counter(seed):
    cfg = random_tiny_config(seed)
    closed, measured = flops_profile(cfg), measured_profile(build_model(cfg, seed))
    assert closed.cumulative == measured.cumulative


@pytest.mark.parametrize("exits", [(1, 2, 4), (2, 4), (3, 4), (4,), (1, 3, 4)])
def test_closed_form_with_disabled_exits(tiny_config, exits):
    cfg = tiny_config.replace(exits=exits)
    assert flops_profile(cfg).cumulative == measured_profile(build_model(cfg, 0)).cumulative


@pytest.mark.parametrize("name", ["tiny", "toy", "resnet-model-1-style", "regnet-model-1-style",
                                  "mobilenet-model-1-style"])
def test_costs_monotone(name):
    c = flops_profile(get_preset(name)).costs()
    assert c[0] < c[1] < c[2] <= c[3]


def test_costs_monotone_random():
    for seed in range(20):
        c = flops_profile(random_tiny_config(seed)).costs()
        assert c[0] < c[1] < c[2] <= c[3]


# -- confidence ----------------------------------------------------------------------

def test_confidence_examples():
    assert confidence(np.zeros(4)) == 0.25
    assert confidence(1000.0 * np.eye(5)[2]) >= 1 - 1e-9
    assert abs(confidence(np.array([1.0, 2.0, 3.0])) - 0.66524096) < 1e-8
    with pytest.raises(NumericalError):
        confidence(np.array([0.0, np.nan]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=10))
def test_confidence_range(xs):
    c = confidence(np.array(xs))
    assert 1.0 / len(xs) - 1e-12 <= c <= 1.0


# -- infer ---------------------------------------------------------------------------

def test_policy_contract():
    with pytest.raises(ContractError):
        ExitPolicy((0.5, 0.5, 0.5, 0.1))
    with pytest.raises(ContractError):
        ExitPolicy((0.5, 0.0))
    with pytest.raises(ContractError):
        ExitPolicy((np.nan, 0.5, 0.5, 0.0))


def test_zero_thresholds_exit_first(spread_model, images):
    cost = flops_profile(spread_model.config).cumulative
    for img in images[:4]:
        t = infer(spread_model, Tensor(img[None]), ExitPolicy((0, 0, 0, 0)))
        assert t.exit_taken == 1 and t.flops_used == cost[1]
        assert len(t.confidences) == 1


def test_unreachable_thresholds_exit_last(spread_model, images):
    with T.no_grad():
        full = spread_model.full_forward(Tensor(images))
    for n, img in enumerate(images):
        t = infer(spread_model, Tensor(img[None]), ExitPolicy(UNREACHABLE))
        assert t.exit_taken == 4
        assert t.prediction == int(np.argmax(full.logits[4].data[n]))
        assert [k for k, _ in t.confidences] == [1, 2, 3, 4]


def test_infer_matches_post_hoc_gating(spread_model, images):
    with T.no_grad():
        full = [spread_model.full_forward(Tensor(img[None])) for img in images]
    r = np.random.default_rng(5)
    taken = set()
    for _ in range(8):
        theta = tuple(r.uniform(0.25, 0.6, size=3)) + (0.0,)
        for n, img in enumerate(images):
            t = infer(spread_model, Tensor(img[None]), ExitPolicy(theta))
            k = post_hoc_exit(full[n].logits, 0, theta)
            assert t.exit_taken == k
            assert t.prediction == int(np.argmax(full[n].logits[k].data[0]))
            for j, logits in t.logits.items():
                assert logits.tobytes() == full[n].logits[j].data[0].tobytes()
            taken.add(k)
    assert len(taken) >= 2  # the thresholds actually exercise the gate


@settings(max_examples=30, deadline=None)
@given(base=st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3),
       k=st.integers(0, 2), bump=st.floats(0.0, 0.5))
def test_raising_a_threshold_never_exits_earlier(spread_model, images, base, k, bump):
    low = tuple(base) + (0.0,)
    high = list(low)
    high[k] += bump
    for img in images[:4]:
        a = infer(spread_model, Tensor(img[None]), ExitPolicy(low)).exit_taken
        b = infer(spread_model, Tensor(img[None]), ExitPolicy(tuple(high))).exit_taken
        assert b >= a


def test_infer_with_disabled_exit(tiny_config, images):
    model = _randomized(tiny_config.replace(exits=(1, 2, 4)), 0)
    t = infer(model, Tensor(images[:1]), ExitPolicy((1.01, 1.01, 0.0), exits=(1, 2, 4)))
    assert t.exit_taken == 4 and [k for k, _ in t.confidences] == [1, 2, 4]
    with pytest.raises(ContractError):
        infer(model, Tensor(images[:1]), ExitPolicy(UNREACHABLE))


def test_infer_rejects_batches(spread_model, images):
    with pytest.raises(ContractError):
        infer(spread_model, Tensor(images[:2]), ExitPolicy(UNREACHABLE))


# -- batch evaluation ----------------------------------------------------------------

def test_batch_evaluate(spread_model, images):
    labels = np.arange(len(images)) % spread_model.config.num_classes
    cost = flops_profile(spread_model.config).cumulative
    first = batch_evaluate(spread_model, images, labels, ExitPolicy((0, 0, 0, 0)))
    assert first.mean_flops == cost[1]
    assert first.exit_histogram == {1: len(images), 2: 0, 3: 0, 4: 0}

    with T.no_grad():
        full = spread_model.full_forward(Tensor(images))
    last = batch_evaluate(spread_model, images, labels, ExitPolicy(UNREACHABLE))
    assert last.accuracy == np.mean(np.argmax(full.logits[4].data, axis=1) == labels)
    assert last.mean_flops == cost[4]

    theta = (0.4, 0.35, 0.3, 0.0)
    mixed = batch_evaluate(spread_model, images, labels, ExitPolicy(theta))
    replay = [infer(spread_model, Tensor(img[None]), ExitPolicy(theta)) for img in images]
    assert [t.exit_taken for t in mixed.traces] == [t.exit_taken for t in replay]
    assert mixed.mean_flops == sum(cost[t.exit_taken] for t in replay) / len(images)
    assert sum(mixed.exit_histogram.values()) == len(images)


def test_batch_evaluate_empty(spread_model, images):
    with pytest.raises(ContractError):
        batch_evaluate(spread_model, images[:0], [], ExitPolicy(UNREACHABLE))


def test_trace_log(spread_model, images):
    traces = [infer(spread_model, Tensor(img[None]), ExitPolicy((0.4, 0.35, 0.3, 0.0))) for img in images[:3]]
    buf = io.StringIO()
    write_trace_log(buf, traces)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "sample_id,exit,conf_1,conf_2,conf_3,conf_4,flops,prediction"
    assert len(lines) == 4
    for line, t in zip(lines[1:], traces):
        fields = line.split(",")
        assert int(fields[1]) == t.exit_taken and float(fields[6]) == t.flops_used
        assert sum(f != "" for f in fields[2:6]) == len(t.confidences)
