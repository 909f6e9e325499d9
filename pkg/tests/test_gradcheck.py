import numpy as np
import pytest

from squat import numerics as nx
from squat.errors import ConfigError
from squat.gradcheck import gradcheck, group_of, small_config
from squat.model import SquatModel
from squat.numerics import Tensor


@pytest.fixture(scope="module")
def report():
    return gradcheck(n=4, entries_per_tensor=6, seed=0)


def test_fresh_model_passes(report):
    assert report.passed, report.to_table()
    assert max(report.worst.values()) < 1e-4


def test_every_parameter_group_is_covered(report):
    groups = set(report.worst)
    assert {"extract", "classifier"} <= groups
    assert {f"esm.{h}" for h in ("q", "n2e", "e2e")} <= groups
    for t in range(2):
        for block in ("node_self", "edge_self", "n2n", "n2e", "e2n", "e2e"):
            assert f"layers.{t}.{block}" in groups
        assert {f"layers.{t}.node_mlp", f"layers.{t}.edge_mlp"} <= groups


def test_pce_gradient_on_esm_is_exactly_zero(report):
    assert report.pce_esm_max == 0.0
    assert report.esm_grad_norm > 0.0
    assert "0.0" in report.to_table()


def _broken_gelu(x: Tensor) -> Tensor:
    v = x.data
    t = np.tanh(nx.GELU_C * (v + nx.GELU_A * v**3))
    # backward drops the tanh-derivative term
    return nx._record(Tensor(0.5 * v * (1.0 + t)), (x,), lambda g: (g * 0.5 * (1.0 + t),))


def test_corrupted_backward_rule_fails(monkeypatch):
    monkeypatch.setattr(nx, "gelu", _broken_gelu)
    bad = gradcheck(SquatModel(small_config(layers=1), seed=1), n=3, entries_per_tensor=3, seed=1)
    assert not bad.passed
    assert bad.failures


def test_shared_esm_mode_passes():
    r = gradcheck(SquatModel(small_config(layers=1, esm_mode="shared"), seed=2), n=3, entries_per_tensor=3, seed=2)
    assert r.passed, r.to_table()
    assert "esm.shared" in r.worst


def test_needs_two_detections():
    with pytest.raises(ConfigError):
        gradcheck(n=1)


def test_group_names():
    assert group_of("layers.0.n2n.W_q") == "layers.0.n2n"
    assert group_of("esm.q.l1_W") == "esm.q"
