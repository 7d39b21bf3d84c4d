import numpy as np
import pytest
import torch

from cfisac.errors import ConfigError
from cfisac.metrics import ap_power, batch_min_sinr, batch_ssnr
from cfisac.model import (PRESETS, ArchitectureSpec, batch_inputs, build_input_1d, build_input_2d,
                          cae_spec, cnn1d_spec, csi_matrix, init_model, normalize_output, predict_beams,
                          unet_spec)
from cfisac.scenario import SystemConfig, generate_dataset

TOY_SPECS = {
    "CNN1D": cnn1d_spec(channels=(2, 3), filter_len=5, fc_widths=(10,)),
    "CAE": cae_spec(channels=(3, 4), decoder_channels=(4, 3), filters=((2, 2), (2, 2))),
    "UNet": unet_spec(channels=(3, 4), decoder_channels=(4, 3)),
}


def n_params(model):
    return sum(p.numel() for p in model.parameters())


class TestInputs:
    def test_csi_matrix(self, scene):
        C = csi_matrix(scene, 1)
        assert C.shape == (16, 6)
        np.testing.assert_array_equal(C[:, :5], scene.comm_channels[1])
        np.testing.assert_array_equal(C[:, 5], scene.sensing_steering[1])

    def test_1d_layout(self, scene):
        v = build_input_1d(scene, 0)
        C = csi_matrix(scene, 0)
        assert v.shape == (192,)
        # agent by agent: entries k*M..(k+1)*M-1 are column k
        for k in range(6):
            np.testing.assert_array_equal(v[16 * k:16 * (k + 1)], C[:, k].real)
            np.testing.assert_array_equal(v[96 + 16 * k:96 + 16 * (k + 1)], C[:, k].imag)

    def test_2d_layout(self, scene):
        x = build_input_2d(scene, 1)
        assert x.shape == (2, 16, 6)
        np.testing.assert_array_equal(x[0] + 1j * x[1], csi_matrix(scene, 1))

    @pytest.mark.parametrize("kind", ["CNN1D", "UNet"])
    def test_batched_matches_single(self, small_dataset, kind):
        H, A = small_dataset.channel_arrays(np.arange(3))
        X = batch_inputs(torch.tensor(H), torch.tensor(A), 1, kind).numpy()
        build = build_input_1d if kind == "CNN1D" else build_input_2d
        for i in range(3):
            np.testing.assert_array_equal(X[i], build(small_dataset.scene(i), 1))


class TestNormalize:
    def test_power_2d(self):
        raw = torch.randn(7, 2, 16, 6, dtype=torch.float64)
        W = normalize_output(raw, 2.5)
        np.testing.assert_allclose((W.abs() ** 2).sum(dim=(1, 2)).numpy(), 2.5, atol=1e-12)

    def test_flat_matches_2d(self):
        raw2 = torch.randn(3, 2, 4, 3, dtype=torch.float64)
        flat = torch.cat([raw2[:, 0].transpose(1, 2).reshape(3, -1), raw2[:, 1].transpose(1, 2).reshape(3, -1)], 1)
        torch.testing.assert_close(normalize_output(flat, 1.0, 4), normalize_output(raw2, 1.0))

    def test_zero_input_is_finite(self):
        W = normalize_output(torch.zeros(1, 2, 4, 3, dtype=torch.float64), 1.0)
        assert torch.all(W == 0)

    def test_flat_needs_antennas(self):
        with pytest.raises(ValueError):
            normalize_output(torch.zeros(1, 24), 1.0)


class TestArchitectures:
    @pytest.mark.parametrize("kind,count", [("CNN1D", 285_792), ("CAE", 1_491_108), ("UNet", 1_268_516)])
    def test_shapes_and_sizes(self, system, small_dataset, kind, count):
        model = init_model(PRESETS[kind](), system, seed=0)
        assert n_params(model) == count
        H, A = small_dataset.channel_arrays(np.arange(4))
        W = model(torch.tensor(H, dtype=torch.complex64), torch.tensor(A, dtype=torch.complex64))
        assert W.shape == (4, 2, 16, 6)

    def test_spec_round_trip(self):
        for make in PRESETS.values():
            s = make()
            assert ArchitectureSpec.from_dict(s.to_dict()) == s

    def test_bad_specs(self, system):
        with pytest.raises(ConfigError):
            ArchitectureSpec("MLP", (1,), ((1, 1),), ((0, 0),))
        with pytest.raises(ConfigError):
            ArchitectureSpec("CAE", (1, 2), ((1, 1),), ((0, 0),))
        with pytest.raises(ConfigError):
            init_model(cae_spec(filters=((9, 9),) * 4), system)

    def test_seeded_init(self, toy_system):
        a = init_model(TOY_SPECS["UNet"], toy_system, seed=5)
        b = init_model(TOY_SPECS["UNet"], toy_system, seed=5)
        c = init_model(TOY_SPECS["UNet"], toy_system, seed=6)
        for p, q in zip(a.parameters(), b.parameters()):
            assert torch.equal(p, q)
        assert not all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))
        # APs get independent initial weights
        assert not torch.equal(a.nets[0].head.weight, a.nets[1].head.weight)

    def test_init_does_not_touch_global_rng(self, toy_system):
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        init_model(TOY_SPECS["CNN1D"], toy_system, seed=1)
        assert torch.equal(torch.rand(3), expected)

    @pytest.mark.parametrize("kind", list(TOY_SPECS))
    def test_distributed(self, toy_system, kind):
        # AP l's beams depend only on AP l's CSI
        ds = generate_dataset(toy_system, 6, seed=2)
        model = init_model(TOY_SPECS[kind], toy_system, seed=0, dtype=torch.float64).eval()
        H, A = (torch.tensor(v) for v in ds.channel_arrays())
        H2, A2 = H.clone(), A.clone()
        H2[:, 1] = torch.flip(H2[:, 1], dims=[0])
        A2[:, 1] = torch.flip(A2[:, 1], dims=[0])
        with torch.no_grad():
            W, W2 = model(H, A), model(H2, A2)
        torch.testing.assert_close(W[:, 0], W2[:, 0])
        assert not torch.allclose(W[:, 1], W2[:, 1])


def _central_fd(f, p, idx, h=1e-6):
    flat = p.data.view(-1)
    old = flat[idx].item()
    flat[idx] = old + h
    up = f().item()
    flat[idx] = old - h
    down = f().item()
    flat[idx] = old
    return (up - down) / (2 * h)


class TestGradients:
    @pytest.mark.parametrize("kind", list(TOY_SPECS))
    @pytest.mark.parametrize("objective", ["g1", "g2"])
    def test_composed_objective(self, toy_system, kind, objective):
        ds = generate_dataset(toy_system, 8, seed=4)
        H, A = (torch.tensor(v) for v in ds.channel_arrays())
        model = init_model(TOY_SPECS[kind], toy_system, seed=1, dtype=torch.float64)

        def loss():
            W = model(H, A)
            if objective == "g1":
                return -batch_ssnr(A, W, toy_system).mean()
            return -batch_min_sinr(H, W, toy_system.ue_noise_var).mean()

        model.zero_grad()
        loss().backward()
        rng = np.random.default_rng(0)
        with torch.no_grad():
            for name, p in model.named_parameters():
                picks = rng.choice(p.numel(), size=min(6, p.numel()), replace=False)
                fd = np.array([_central_fd(loss, p, int(i)) for i in picks])
                ad = p.grad.view(-1)[picks].numpy()
                # biases feeding batch norm have an exactly zero gradient
                scale = max(np.linalg.norm(fd), 1e-6)
                assert np.linalg.norm(ad - fd) / scale < 1e-3, name

    @pytest.mark.parametrize("layer", [
        torch.nn.Linear(7, 5), torch.nn.Conv1d(1, 3, 5), torch.nn.Conv2d(2, 3, (2, 3)),
        torch.nn.ConvTranspose2d(3, 2, (2, 3), padding=0), torch.nn.Conv2d(2, 3, 3, padding=1),
    ])
    def test_affine_layers(self, layer):
        torch.manual_seed(0)
        layer = layer.double()
        shapes = {torch.nn.Linear: (4, 7), torch.nn.Conv1d: (4, 1, 12)}
        x = torch.randn(shapes[type(layer)] if type(layer) in shapes else (4, layer.in_channels, 4, 5), dtype=torch.float64)
        target = torch.randn_like(layer(x))
        f = lambda: (layer(x) * target).sum()
        layer.zero_grad()
        f().backward()
        with torch.no_grad():
            for p in layer.parameters():
                fd = np.array([_central_fd(f, p, i, h=1e-4) for i in range(p.numel())])
                ad = p.grad.view(-1).numpy()
                assert np.linalg.norm(ad - fd) / np.linalg.norm(fd) < 1e-4


class TestPowerConstraint:
    @pytest.mark.parametrize("kind", list(PRESETS))
    def test_predicted_beams_meet_budget(self, kind):
        system = SystemConfig(power_budget=(1.0, 0.7))
        ds = generate_dataset(system, 300, seed=8)
        model = init_model(PRESETS[kind](), system, seed=3)
        W = predict_beams(model, *ds.channel_arrays())
        assert W.dtype == np.complex128
        for l, P in enumerate(system.power_budget):
            err = np.abs(np.sum(np.abs(W[:, l]) ** 2, axis=(1, 2)) - P)
            assert err.max() < 1e-9
        assert abs(ap_power(W[0], 1) - 0.7) < 1e-9
