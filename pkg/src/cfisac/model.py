"""Per-AP beamforming networks.

Each AP owns one network that maps its local CSI to its own M x (N+1)
beam matrix. Complex values travel as paired real tensors: the 1-D input is
``[Re h_1..Re h_N, Re a, Im h_1..Im h_N, Im a]`` and the 2-D input stacks
``Re`` and ``Im`` of ``[h_1, ..., h_N, a]`` as two channels of an
M x (N+1) map. Raw outputs use the same layouts and are turned into beams
by :func:`normalize_output`.

The 2-D networks convolve over the transposed (N+1) x M map (agents by
antennas), which is the layout the CAE filter sizes fit.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigError
from .scenario import ChannelScene, SystemConfig

ARCHITECTURES = ("CNN1D", "CAE", "UNet")
NORM_EPS = 1e-12


@dataclass(frozen=True)
class ArchitectureSpec:
    """Layer hyper-parameters for one of the three network families.

    ``filters``/``paddings`` apply to the encoder (or the conv stack for
    CNN1D); CAE decoders mirror the encoder filters in reverse order.
    """

    kind: str
    channels: tuple[int, ...]
    filters: tuple[tuple[int, int], ...]
    paddings: tuple[tuple[int, int], ...]
    decoder_channels: tuple[int, ...] = ()
    fc_widths: tuple[int, ...] = ()
    negative_slope: float = 0.01

    def __post_init__(self):
        if self.kind not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.kind!r}")
        n = len(self.channels)
        if len(self.filters) != n or len(self.paddings) != n:
            raise ConfigError("channels, filters and paddings must have equal length")
        if self.kind != "CNN1D" and len(self.decoder_channels) != n:
            raise ConfigError("decoder needs one channel count per encoder layer")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        object.__setattr__(self, "fc_widths", tuple(int(c) for c in self.fc_widths))
        object.__setattr__(self, "filters", tuple(tuple(int(v) for v in f) for f in self.filters))
        object.__setattr__(self, "paddings", tuple(tuple(int(v) for v in p) for p in self.paddings))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: (list(map(list, v)) if k in ("filters", "paddings") else
                    list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        kw = dict(d)
        for k in ("channels", "decoder_channels", "fc_widths"):
            if k in kw:
                kw[k] = tuple(kw[k])
        for k in ("filters", "paddings"):
            if k in kw:
                kw[k] = tuple(tuple(v) for v in kw[k])
        return cls(**kw)


def cnn1d_spec(channels=(2, 4, 8), filter_len: int = 11, fc_widths=(90, 90)) -> ArchitectureSpec:
    n = len(channels)
    return ArchitectureSpec("CNN1D", tuple(channels), ((filter_len, 1),) * n, ((0, 0),) * n,
                            fc_widths=tuple(fc_widths))


def cae_spec(channels=(16, 32, 64, 128), decoder_channels=(32, 64, 128, 256),
             filters=((3, 5), (2, 5), (1, 3), (1, 3))) -> ArchitectureSpec:
    return ArchitectureSpec("CAE", tuple(channels), tuple(filters), ((0, 0),) * len(channels),
                            decoder_channels=tuple(decoder_channels))


def unet_spec(channels=(16, 32, 64, 128), decoder_channels=(32, 64, 128, 256),
              kernel: int = 3) -> ArchitectureSpec:
    n = len(channels)
    return ArchitectureSpec("UNet", tuple(channels), ((kernel, kernel),) * n,
                            ((kernel // 2, kernel // 2),) * n, decoder_channels=tuple(decoder_channels))


PRESETS = {"CNN1D": cnn1d_spec, "CAE": cae_spec, "UNet": unet_spec}


# -- input construction ------------------------------------------------------

def csi_matrix(scene: ChannelScene, l: int) -> np.ndarray:
    """[h_l1, ..., h_lN, a(theta_l)] as an M x (N+1) complex matrix."""
    return np.concatenate([scene.comm_channels[l], scene.sensing_steering[l][:, None]], axis=1)


def build_input_1d(scene: ChannelScene, l: int) -> np.ndarray:
    C = csi_matrix(scene, l)
    # column-major: agent by agent, M entries each
    return np.concatenate([C.real.T.ravel(), C.imag.T.ravel()])


def build_input_2d(scene: ChannelScene, l: int) -> np.ndarray:
    C = csi_matrix(scene, l)
    return np.stack([C.real, C.imag])


def batch_inputs(H: torch.Tensor, A: torch.Tensor, l: int, kind: str) -> torch.Tensor:
    """Network inputs for AP ``l`` from stacked channels H (B,L,M,N), A (B,L,M)."""
    C = torch.cat([H[:, l], A[:, l, :, None]], dim=2)  # (B, M, N+1)
    if kind == "CNN1D":
        Ct = C.transpose(1, 2)
        return torch.cat([Ct.real.reshape(C.shape[0], -1), Ct.imag.reshape(C.shape[0], -1)], dim=1)
    return torch.stack([C.real, C.imag], dim=1)


def normalize_output(raw: torch.Tensor, power: float, num_antennas: int | None = None) -> torch.Tensor:
    """Scale raw network output to a complex M x (N+1) beam matrix with power ``power``.

    ``raw`` is either (..., 2, M, N+1) or a flat (..., 2*M*(N+1)) vector; the
    flat form needs ``num_antennas``.
    """
    if raw.dim() >= 3 and raw.shape[-3] == 2 and num_antennas is None:
        Z = torch.complex(raw[..., 0, :, :], raw[..., 1, :, :])
    else:
        if num_antennas is None:
            raise ValueError("flat raw output needs num_antennas")
        half = raw.shape[-1] // 2
        M = num_antennas
        re = raw[..., :half].reshape(raw.shape[:-1] + (half // M, M))
        im = raw[..., half:].reshape(raw.shape[:-1] + (half // M, M))
        Z = torch.complex(re, im).transpose(-1, -2)
    norm = torch.sqrt((Z.real ** 2 + Z.imag ** 2).sum(dim=(-2, -1), keepdim=True))
    return Z * (float(np.sqrt(power)) / (norm + NORM_EPS))


# -- networks ----------------------------------------------------------------

def _act(spec: ArchitectureSpec) -> nn.Module:
    return nn.LeakyReLU(spec.negative_slope)


class CNN1D(nn.Module):
    def __init__(self, spec: ArchitectureSpec, in_len: int):
        super().__init__()
        layers, c_in, length = [], 1, in_len
        for c, (k, _), (p, _) in zip(spec.channels, spec.filters, spec.paddings):
            layers += [nn.Conv1d(c_in, c, k, padding=p), nn.BatchNorm1d(c), _act(spec)]
            c_in, length = c, length + 2 * p - k + 1
        if length < 1:
            raise ConfigError(f"conv stack shrinks input of length {in_len} to {length}")
        self.convs = nn.Sequential(*layers)
        fcs, width = [], c_in * length
        for f in spec.fc_widths:
            fcs += [nn.Linear(width, f), _act(spec)]
            width = f
        self.fcs = nn.Sequential(*fcs)
        self.head = nn.Linear(width, in_len)

    def forward(self, x):
        z = self.convs(x.unsqueeze(1)).flatten(1)
        return self.head(self.fcs(z))


def _conv_block(c_in, c_out, k, p, spec, transposed=False):
    conv = (nn.ConvTranspose2d if transposed else nn.Conv2d)(c_in, c_out, k, padding=p)
    return nn.Sequential(conv, nn.BatchNorm2d(c_out), _act(spec))


class EncoderDecoder(nn.Module):
    """CAE (unpadded convs, transposed-conv decoder) or U-net (padded, no pooling).

    Decoder layer 1 reads the deepest encoder map; decoder layer k > 1 reads
    the previous decoder output concatenated with encoder layer n-k+1, so the
    skips mirror the encoder from its second-deepest layer outward.
    """

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        transposed = spec.kind == "CAE"
        enc, c_in = [], 2
        for c, k, p in zip(spec.channels, spec.filters, spec.paddings):
            enc.append(_conv_block(c_in, c, k, p, spec))
            c_in = c
        dec = []
        skips = list(reversed(spec.channels[:-1]))
        rev_f = list(reversed(spec.filters))
        rev_p = list(reversed(spec.paddings))
        for i, c in enumerate(spec.decoder_channels):
            extra = skips[i - 1] if i > 0 else 0
            dec.append(_conv_block(c_in + extra, c, rev_f[i], rev_p[i], spec, transposed=transposed))
            c_in = c
        self.encoder = nn.ModuleList(enc)
        self.decoder = nn.ModuleList(dec)
        self.head = nn.Conv2d(c_in, 2, 1)

    def forward(self, x):
        z = x.transpose(-1, -2)  # (B, 2, N+1, M)
        feats = []
        for layer in self.encoder:
            z = layer(z)
            feats.append(z)
        skips = feats[-2::-1]
        for i, layer in enumerate(self.decoder):
            if i > 0:
                z = torch.cat([z, skips[i - 1]], dim=1)
            z = layer(z)
        return self.head(z).transpose(-1, -2)


class DistributedModel(nn.Module):
    """L structurally identical networks, one per AP."""

    def __init__(self, spec: ArchitectureSpec, system: SystemConfig):
        super().__init__()
        self.spec = spec
        self.system = system
        M, Q = system.antennas_per_ap, system.num_beams
        if spec.kind == "CNN1D":
            nets = [CNN1D(spec, 2 * M * Q) for _ in range(system.num_aps)]
        else:
            nets = [EncoderDecoder(spec) for _ in range(system.num_aps)]
        self.nets = nn.ModuleList(nets)

    def forward_ap(self, l: int, x: torch.Tensor) -> torch.Tensor:
        return self.nets[l](x)

    def beams_ap(self, l: int, x: torch.Tensor) -> torch.Tensor:
        raw = self.nets[l](x)
        M = self.system.antennas_per_ap if self.spec.kind == "CNN1D" else None
        return normalize_output(raw, self.system.power_budget[l], M)

    def forward(self, H: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
        """Beams W (B, L, M, N+1) for stacked channels; AP l sees only its own CSI."""
        W = [self.beams_ap(l, batch_inputs(H, A, l, self.spec.kind)) for l in range(len(self.nets))]
        return torch.stack(W, dim=1)


def init_model(spec: ArchitectureSpec, system: SystemConfig, seed: int = 0,
               dtype: torch.dtype = torch.float32) -> DistributedModel:
    """Build the L per-AP networks with independent seeded initializations."""
    seeds = np.random.SeedSequence(int(seed)).generate_state(system.num_aps)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seeds[0]))
        model = DistributedModel(spec, system)
        for net, s in zip(model.nets, seeds):
            torch.manual_seed(int(s))
            for m in net.modules():
                if hasattr(m, "reset_parameters") and m is not net:
                    m.reset_parameters()
    model = model.to(dtype)
    _check_output_shape(model)
    return model


def _check_output_shape(model: DistributedModel) -> None:
    system, spec = model.system, model.spec
    M, Q = system.antennas_per_ap, system.num_beams
    shape = (2 * M * Q,) if spec.kind == "CNN1D" else (2, M, Q)
    dtype = next(model.parameters()).dtype
    x = torch.zeros((2,) + shape, dtype=dtype)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model.nets[0](x)
    except RuntimeError as exc:
        raise ConfigError(f"{spec.kind} spec does not fit a {M}x{Q} input: {exc}") from exc
    finally:
        model.train(was_training)
    if tuple(out.shape[1:]) != shape:
        raise ConfigError(f"{spec.kind} emits {tuple(out.shape[1:])}, expected {shape}")


def _beams_double(model: DistributedModel, H: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
    # normalize in float64 so the power budget holds to ~1e-15 even for float32 nets
    M = model.system.antennas_per_ap if model.spec.kind == "CNN1D" else None
    W = []
    for l in range(len(model.nets)):
        raw = model.forward_ap(l, batch_inputs(H, A, l, model.spec.kind)).double()
        W.append(normalize_output(raw, model.system.power_budget[l], M))
    return torch.stack(W, dim=1)


def predict_beams(model: DistributedModel, H: np.ndarray, A: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    """Inference-mode beams (S, L, M, N+1) as complex128 numpy."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    cdtype = torch.complex128 if dtype == torch.float64 else torch.complex64
    out = []
    try:
        with torch.no_grad():
            for i in range(0, H.shape[0], batch_size):
                Hb = torch.tensor(H[i:i + batch_size], dtype=cdtype)
                Ab = torch.tensor(A[i:i + batch_size], dtype=cdtype)
                out.append(_beams_double(model, Hb, Ab).numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out, axis=0)
