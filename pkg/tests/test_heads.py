import numpy as np
import pytest
import torch

from dsaens.errors import ConfigurationError
from dsaens.heads import (
    Adapter,
    AdapterSpec,
    ClassificationHead,
    EnsembleConfig,
    FeatureExpansion,
    assemble_head_inputs,
    build_model,
    default_adapter_specs,
    make_activation,
    split_shared_private,
)


def dsa_config(num_heads=3, backbone=8, private=2):
    return EnsembleConfig.create("DSA", num_heads, backbone, private_channels=private)


class TestConfigValidation:
    def test_too_few_heads(self):
        with pytest.raises(ConfigurationError):
            EnsembleConfig.create("DSA", 1, 8)

    def test_private_width_bounds(self):
        with pytest.raises(ConfigurationError):
            EnsembleConfig.create("CBE", 3, 8, private_channels=8)
        with pytest.raises(ConfigurationError):
            EnsembleConfig.create("CBE", 3, 8, private_channels=0)

    def test_mhe_rejects_adapters(self):
        specs = default_adapter_specs(2, 8)
        with pytest.raises(ConfigurationError):
            EnsembleConfig(variant="MHE", num_heads=2, backbone_channels=8, adapters=specs)

    def test_duplicate_adapter_specs_rejected(self):
        dup = (
            AdapterSpec(index=1, hidden_channels=16, activation_id="relu"),
            AdapterSpec(index=2, hidden_channels=16, activation_id="relu"),
        )
        with pytest.raises(ConfigurationError):
            EnsembleConfig(
                variant="SDoAs", num_heads=2, backbone_channels=6, adapters=dup
            )

    def test_adapter_count_must_match_heads(self):
        with pytest.raises(ConfigurationError):
            EnsembleConfig(
                variant="DSA", num_heads=3, backbone_channels=8, private_channels=2,
                adapters=default_adapter_specs(2, 6),
            )

    def test_default_private_width(self):
        cfg = EnsembleConfig.create("DSA", 5, 32)
        assert cfg.private_channels == 4
        cfg = EnsembleConfig.create("DSA", 5, 8)
        assert cfg.private_channels == 1

    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError):
            EnsembleConfig.create("bagging", 3, 8)


class TestExpansion:
    def test_channel_count_examples(self):
        assert EnsembleConfig.create("CBE", 3, 8, private_channels=2).expanded_channels == 12
        assert EnsembleConfig.create("CBE", 5, 8, private_channels=2).expanded_channels == 16

    def test_spatial_extents_preserved(self):
        cfg = dsa_config()
        layer = FeatureExpansion(cfg)
        out = layer(torch.randn(2, 8, 5, 7))
        assert out.shape == (2, 12, 5, 7)
        out3 = layer(torch.randn(8, 5, 7))
        assert out3.shape == (12, 5, 7)

    def test_identity_kernel_passthrough(self):
        # Hand-built 1x1 kernel: identity on the first 8 channels, zeros after.
        cfg = dsa_config(num_heads=3, backbone=8, private=2)
        layer = FeatureExpansion(cfg)
        with torch.no_grad():
            layer.conv.weight.zero_()
            layer.conv.bias.zero_()
            for c in range(8):
                layer.conv.weight[c, c, 0, 0] = 1.0
        f = torch.randn(8, 4, 4)
        out = layer(f)
        torch.testing.assert_close(out[:8], f)
        torch.testing.assert_close(out[8:], torch.zeros(4, 4, 4))

    def test_channel_mismatch_rejected(self):
        layer = FeatureExpansion(dsa_config())
        with pytest.raises(ConfigurationError):
            layer(torch.randn(2, 7, 4, 4))

    def test_mhe_has_no_expansion(self):
        with pytest.raises(ConfigurationError):
            FeatureExpansion(EnsembleConfig.create("MHE", 3, 8))


class TestSplit:
    def test_channel_arithmetic(self):
        cfg = dsa_config(num_heads=3, backbone=8, private=2)
        expanded = torch.randn(cfg.expanded_channels, 4, 4)
        shared, privates = split_shared_private(expanded, cfg)
        assert shared.shape[0] == 6
        assert len(privates) == 3
        assert all(g.shape[0] == 2 for g in privates)

    def test_roundtrip_bit_identical(self):
        cfg = dsa_config(num_heads=4, backbone=16, private=3)
        expanded = torch.randn(2, cfg.expanded_channels, 5, 5)
        shared, privates = split_shared_private(expanded, cfg)
        rebuilt = torch.cat([shared] + privates, dim=-3)
        assert torch.equal(rebuilt, expanded)

    def test_constant_channel_probe(self):
        cfg = EnsembleConfig.create("CBE", 2, 4, private_channels=1)
        expanded = torch.stack(
            [torch.full((3, 3), float(c)) for c in range(cfg.expanded_channels)]
        )
        shared, privates = split_shared_private(expanded, cfg)
        assert shared.unique().tolist() == [0.0, 1.0, 2.0]
        assert privates[0].unique().tolist() == [3.0]
        assert privates[1].unique().tolist() == [4.0]

    def test_wrong_width_rejected(self):
        cfg = dsa_config()
        with pytest.raises(ConfigurationError):
            split_shared_private(torch.randn(11, 4, 4), cfg)


class TestAdapter:
    def test_hidden_width_ladder(self):
        specs = default_adapter_specs(5, 6)
        assert specs[0].hidden_channels == 16
        assert specs[4].hidden_channels == 56
        assert specs[0].activation_id == "prelu"
        assert specs[4].activation_id == "elu"

    def test_zero_at_initialization(self):
        for spec in default_adapter_specs(5, 6):
            adapter = Adapter(spec, channels=6)
            out = adapter(torch.randn(2, 6, 4, 4))
            assert torch.equal(out, torch.zeros_like(out))

    def test_output_shape_matches_input(self):
        adapter = Adapter(AdapterSpec(1, 16, "relu"), channels=6)
        x = torch.randn(3, 6, 5, 7)
        assert adapter(x).shape == x.shape

    def test_different_activations_differ_on_same_weights(self):
        torch.manual_seed(0)
        a1 = Adapter(AdapterSpec(1, 16, "relu"), channels=6)
        a2 = Adapter(AdapterSpec(1, 16, "gelu"), channels=6)
        state = a1.state_dict()
        with torch.no_grad():
            # overwrite the zero init so the nonlinearity actually matters
            state["project.weight"] = torch.randn_like(state["project.weight"])
            state["project.bias"] = torch.randn_like(state["project.bias"])
        a1.load_state_dict(state)
        a2.load_state_dict({k: v for k, v in state.items() if k in a2.state_dict()})
        x = torch.randn(1, 6, 4, 4)
        with torch.no_grad():
            diff = (a1(x) - a2(x)).abs().max()
        assert float(diff) > 0

    def test_activation_roster_is_zero_preserving(self):
        for name in ("prelu", "relu", "leaky_relu", "gelu", "elu"):
            act = make_activation(name)
            with torch.no_grad():
                peak = act(torch.zeros(3)).abs().max()
            assert float(peak) == 0.0


class TestAssembly:
    def test_dsa_channel_count(self):
        shared = torch.randn(6, 4, 4)
        deltas = [torch.randn(6, 4, 4) for _ in range(3)]
        privates = [torch.randn(2, 4, 4) for _ in range(3)]
        inputs = assemble_head_inputs("DSA", shared, deltas=deltas, privates=privates)
        assert all(f.shape[0] == 8 for f in inputs)

    def test_sdoas_zero_deltas_identical_to_shared(self):
        shared = torch.randn(6, 4, 4)
        deltas = [torch.zeros(6, 4, 4) for _ in range(4)]
        for f in assemble_head_inputs("SDoAs", shared, deltas=deltas):
            assert torch.equal(f, shared)

    def test_cbe_constant_probe(self):
        shared = torch.randn(6, 4, 4)
        privates = [torch.full((2, 4, 4), 1.0), torch.full((2, 4, 4), 2.0)]
        f1, f2 = assemble_head_inputs("CBE", shared, privates=privates)
        assert torch.equal(f1[:6], f2[:6])
        assert not torch.equal(f1[6:], f2[6:])

    def test_mhe_replicates_backbone_feature(self):
        shared = torch.randn(8, 4, 4)
        inputs = assemble_head_inputs("MHE", shared, num_heads=3)
        assert len(inputs) == 3
        assert all(torch.equal(f, shared) for f in inputs)

    def test_missing_pieces_rejected(self):
        shared = torch.randn(6, 4, 4)
        with pytest.raises(ConfigurationError):
            assemble_head_inputs("DSA", shared, deltas=[shared])
        with pytest.raises(ConfigurationError):
            assemble_head_inputs("SDoAs", shared)
        with pytest.raises(ConfigurationError):
            assemble_head_inputs("CBE", shared)

    def test_dsa_with_zero_deltas_equals_cbe(self):
        shared = torch.randn(6, 4, 4)
        deltas = [torch.zeros(6, 4, 4) for _ in range(3)]
        privates = [torch.randn(2, 4, 4) for _ in range(3)]
        dsa = assemble_head_inputs("DSA", shared, deltas=deltas, privates=privates)
        cbe = assemble_head_inputs("CBE", shared, privates=privates)
        for f_dsa, f_cbe in zip(dsa, cbe):
            assert torch.equal(f_dsa, f_cbe)


class TestHeadsForward:
    def test_softmax_rows(self):
        cfg = EnsembleConfig.create("DSA", 5, 16)
        net = build_model(cfg, "classification", 10)
        probs = net(torch.randn(4, 3, 32, 32))
        assert probs.shape == (4, 5, 10)
        assert torch.all(probs >= 0)
        torch.testing.assert_close(probs.sum(-1), torch.ones(4, 5), atol=1e-6, rtol=0)

    def test_identical_parameters_identical_outputs(self):
        head1 = ClassificationHead(8, 5)
        head2 = ClassificationHead(8, 5)
        head2.load_state_dict(head1.state_dict())
        x = torch.randn(3, 8, 4, 4)
        assert torch.equal(head1(x), head2(x))

    def test_independent_initialization_differs(self):
        torch.manual_seed(0)
        head1 = ClassificationHead(8, 5)
        head2 = ClassificationHead(8, 5)
        x = torch.randn(3, 8, 4, 4)
        assert not torch.equal(head1(x), head2(x))

    def test_heatmap_shape(self):
        cfg = EnsembleConfig.create("DSA", 2, 16)
        net = build_model(cfg, "keypoints", 3)
        maps = net(torch.randn(2, 3, 32, 32))
        assert maps.shape == (2, 2, 3, 32, 32)

    def test_single_head_baseline_shape(self):
        net = build_model(None, "classification", 10)
        probs = net(torch.randn(2, 3, 32, 32))
        assert probs.shape == (2, 1, 10)


class TestChannelProperties:
    def test_random_configs_channel_arithmetic(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            backbone = int(rng.integers(2, 40))
            private = int(rng.integers(1, backbone))
            heads = int(rng.integers(2, 7))
            cfg = EnsembleConfig.create("DSA", heads, backbone, private_channels=private)
            assert cfg.expanded_channels == cfg.shared_channels + heads * private
            expanded = torch.randn(cfg.expanded_channels, 2, 2)
            shared, privates = split_shared_private(expanded, cfg)
            deltas = [torch.zeros_like(shared) for _ in range(heads)]
            inputs = assemble_head_inputs("DSA", shared, deltas=deltas, privates=privates)
            assert all(f.shape[0] == backbone for f in inputs)

    def test_dsa_collapse_through_full_network(self):
        # Adapters are zero-initialized, so a fresh DSA net must produce head
        # inputs equal to the CBE assembly of its own shared/private blocks.
        torch.manual_seed(1)
        cfg = EnsembleConfig.create("DSA", 3, 16, private_channels=2)
        net = build_model(cfg, "classification", 4)
        x = torch.randn(2, 3, 32, 32)
        inputs, deltas, privates = net.features(x)
        assert all(torch.equal(d, torch.zeros_like(d)) for d in deltas)
        shared = inputs[0][:, : cfg.shared_channels]
        cbe = assemble_head_inputs("CBE", shared, privates=privates)
        for got, want in zip(inputs, cbe):
            assert torch.equal(got, want)


class TestGradientFlow:
    @pytest.mark.parametrize("variant", ["MHE", "CBE", "SDoAs", "DSA"])
    def test_every_head_and_adapter_parameter_gets_gradient(self, variant):
        torch.manual_seed(2)
        cfg = EnsembleConfig.create(variant, 3, 12, private_channels=2 if variant in ("CBE", "DSA") else None)
        net = build_model(cfg, "classification", 4).double()
        # Move off the zero-init point: at exactly zero projection weights the
        # first adapter convolution has a mathematically zero gradient.
        with torch.no_grad():
            for p in net.parameters():
                p.add_(0.05 * torch.randn_like(p))
        x = torch.randn(3, 3, 32, 32, dtype=torch.float64)
        y = torch.randint(0, 4, (3,))

        def loss_fn():
            probs = net(x)
            picked = probs.gather(-1, y[:, None, None].expand(-1, probs.shape[1], 1))
            return -torch.log(picked.clamp_min(1e-12)).mean()

        loss = loss_fn()
        loss.backward()
        tracked = [(n, p) for n, p in net.named_parameters()
                   if n.startswith("heads.") or n.startswith("adapters.")]
        assert tracked
        for name, param in tracked:
            assert param.grad is not None, name
            assert float(param.grad.abs().max()) > 0, name

        # central-difference spot check on >= 3 randomly chosen scalars
        rng = np.random.default_rng(3)
        params = [p for _, p in tracked]
        for _ in range(3):
            p = params[int(rng.integers(0, len(params)))]
            flat = p.detach().reshape(-1)
            idx = int(rng.integers(0, flat.numel()))
            step = 1e-4
            with torch.no_grad():
                flat[idx] += step
                up = float(loss_fn())
                flat[idx] -= 2 * step
                down = float(loss_fn())
                flat[idx] += step
            fd = (up - down) / (2 * step)
            analytic = float(p.grad.reshape(-1)[idx])
            denom = max(abs(fd), abs(analytic), 1e-10)
            assert abs(fd - analytic) / denom <= 1e-3
