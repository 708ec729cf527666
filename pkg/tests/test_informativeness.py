import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from mmdyn.data import DataError, SyntheticImage, SyntheticSpec, SyntheticTabular, patient_split, synthesize_dataset
from mmdyn.evaluation import mean_feature_gates, patch_contrast
from mmdyn.fusion import LossWeights
from mmdyn.informativeness import (
    ImageGate,
    TabularGate,
    apply_gate,
    image_gate_forward,
    l1_gate_loss,
    rank_features,
    tabular_gate_forward,
    write_heatmap,
    write_ranking,
)
from mmdyn.trainer import TrainConfig, init_parameters, train

from gradcheck import Objective, check


def _zero(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


class TestTabularGate:
    def test_zero_params_half(self):
        gate = _zero(TabularGate(5))
        w = tabular_gate_forward(torch.randn(7, 5), gate)
        assert torch.all(w == 0.5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 12), st.floats(-50, 50))
    def test_range(self, d, scale):
        gate = TabularGate(d)
        w = gate(scale * torch.randn(4, d))
        assert w.shape == (4, d)
        assert torch.all((w >= 0) & (w <= 1))

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            TabularGate(3)(torch.zeros(2, 4))


def block_variance(m: torch.Tensor) -> float:
    n, c, h, w = m.shape
    blocks = m.reshape(n, c, h // 4, 4, w // 4, 4)
    return float((blocks - blocks[:, :, :, :1, :, :1]).abs().max().detach())


class TestImageGate:
    def test_distinct_values_bounded_by_grid(self):
        torch.manual_seed(1)
        gate = ImageGate(1)
        m = image_gate_forward(torch.rand(1, 1, 28, 28), gate)
        assert m.shape == (1, 1, 28, 28)
        assert len(torch.unique(m)) <= 49

    def test_zero_params(self):
        m = _zero(ImageGate(3))(torch.rand(2, 3, 8, 12))
        assert torch.all(m == 0.5)

    def test_not_divisible(self):
        with pytest.raises(DataError):
            ImageGate(1)(torch.rand(1, 1, 30, 30))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([(4, 4), (8, 16), (12, 8)]), st.integers(1, 3))
    def test_block_constant(self, seed, hw, c):
        g = torch.Generator().manual_seed(seed)
        gate = ImageGate(c)
        with torch.no_grad():
            for p in gate.parameters():
                p.copy_(torch.randn(p.shape, generator=g))
        m = gate(torch.rand(2, c, *hw, generator=g))
        assert block_variance(m) == 0.0
        assert torch.all((m >= 0) & (m <= 1))


class TestApplyGate:
    def test_hand(self):
        assert apply_gate(torch.tensor([2.0, 4.0]), torch.tensor([0.5, 0.0])).tolist() == [1.0, 0.0]

    def test_identity_and_annihilator(self, rng):
        x = torch.as_tensor(rng.normal(size=(3, 5)))
        assert torch.equal(apply_gate(x, torch.ones_like(x)), x)
        assert torch.equal(apply_gate(x, torch.zeros_like(x)), torch.zeros_like(x))

    def test_image_broadcast(self):
        x = torch.rand(2, 3, 4, 4)
        assert apply_gate(x, torch.full((2, 1, 4, 4), 0.5)).shape == x.shape

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_gate(torch.ones(2, 3), torch.ones(2, 4))


class TestL1:
    def test_zero(self):
        assert float(l1_gate_loss([torch.zeros(2), torch.zeros(3)])) == 0.0

    def test_half(self):
        assert float(l1_gate_loss([torch.tensor([0.5, 0.5])])) == 1.0

    def test_additive(self):
        assert float(l1_gate_loss([torch.tensor([0.25, 0.75]), torch.tensor([1.0])])) == 2.0

    def test_empty(self):
        with pytest.raises(ValueError):
            l1_gate_loss([])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.lists(st.floats(0, 1), min_size=1, max_size=6), min_size=1, max_size=4))
    def test_matches_python_sum(self, gates):
        ref = sum(abs(v) for g in gates for v in g)
        got = float(l1_gate_loss([torch.tensor(g, dtype=torch.float64) for g in gates]))
        assert got == pytest.approx(ref, abs=1e-12)


class TestRanking:
    def test_sort(self):
        assert rank_features([0.1, 0.9, 0.5], 2) == [("f1", 0.9), ("f2", 0.5)]

    def test_tie_break(self):
        assert [n for n, _ in rank_features([0.3, 0.3, 0.3], 2)] == ["f0", "f1"]

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            rank_features([0.1], 2)

    def test_write(self, tmp_path):
        write_ranking(rank_features([0.2, 0.7], 2, ["a", "b"]), tmp_path / "r.tsv")
        lines = (tmp_path / "r.tsv").read_text().splitlines()
        assert lines == ["rank\tfeature_name\tmean_gate", "1\tb\t0.700000", "2\ta\t0.200000"]

    def test_heatmap_half_up(self, tmp_path):
        values = np.array([[0.0, 1.0], [0.5, 2.5 / 255]])
        write_heatmap(values, tmp_path / "h.png")
        img = np.asarray(Image.open(tmp_path / "h.png"))
        assert img.dtype == np.uint8
        assert img.tolist() == [[0, 255], [128, 3]]


def test_planted_patch_highlighted():
    # two-class images: patch is darker or brighter than the mid-gray background
    spec = SyntheticSpec(1200, 2, [SyntheticTabular("protein", 20, 2), SyntheticTabular("rna", 40, 4),
                                   SyntheticImage("image", 16, 16, 1, (4, 4, 8, 8))], image_noise=0.3)
    ds, truth = synthesize_dataset(spec, 0)
    split = patient_split(ds, {"P2"}, 0.2, 0)
    cfg = TrainConfig(epochs=60, seed=0, ablation_variant="FI", image_hidden_dim=64,
                      latent_dims={"protein": 16, "rna": 16, "image": 32}, loss_weights=LossWeights(0.01, 1, 1))
    model = train(cfg, ds, split)
    mean_map = mean_feature_gates(model, ds, split.test_indices)["image"]
    inside, outside = patch_contrast(mean_map, truth.planted_patch["image"])
    assert inside > outside


@pytest.mark.parametrize("kind", ["tabular", "image"])
def test_l1_gradient_matches_finite_differences(kind):
    g = torch.Generator().manual_seed(11)
    checked = 0
    for seed in range(12):
        if kind == "tabular":
            gate = TabularGate(5).double()
            x = torch.randn(3, 5, generator=g, dtype=torch.float64)
            fn = lambda m: l1_gate_loss([m(x)])  # noqa: E731
        else:
            gate = ImageGate(2).double()
            x = torch.rand(2, 2, 8, 12, generator=g, dtype=torch.float64)
            fn = lambda m: l1_gate_loss([m.grid(x)])  # noqa: E731
        init_parameters(gate, seed)
        err, smooth = check(Objective(gate, fn))
        if smooth:
            assert err < 1e-4
            checked += 1
        if checked == 5:
            break
    assert checked == 5
