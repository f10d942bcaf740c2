"""Glass-box prototype classifier built on a variational autoencoder.

Pipeline: encode an image into a diagonal Gaussian posterior, sample a latent
code, score it against every prototype with the log-ratio similarity, and feed
the flattened similarity matrix to a bias-free linear head. The decoder maps
latent codes (and prototypes) back to image space.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    prototypes_per_class: int = 5
    latent_dim: int = 256
    input_shape: tuple[int, int, int] = (1, 28, 28)
    epsilon: float = 1e-4
    seed: int = 0
    arch: str = "conv"
    base_channels: int = 16
    num_blocks: int = 4
    hidden_dim: int = 128
    similarity_input: str = "mu"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.prototypes_per_class < 1:
            raise ConfigurationError("prototypes_per_class must be >= 1")
        if self.latent_dim < self.prototypes_per_class:
            raise ConfigurationError(
                f"latent_dim ({self.latent_dim}) must be >= prototypes_per_class "
                f"({self.prototypes_per_class}) so class prototypes can span a parallelotope"
            )
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigurationError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if self.arch not in ("conv", "mlp"):
            raise ConfigurationError(f"unknown arch {self.arch!r}")
        if self.similarity_input not in ("mu", "sample"):
            raise ConfigurationError(f"similarity_input must be 'mu' or 'sample', got {self.similarity_input!r}")
        if self.base_channels < 1 or self.num_blocks < 1 or self.hidden_dim < 1:
            raise ConfigurationError("network widths and depth must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class PosteriorParams(NamedTuple):
    mu: torch.Tensor
    sigma: torch.Tensor


@dataclass
class PrototypeBank:
    """Prototype coordinates ``phi`` (K, M, d) plus a boolean ``active_mask`` (K, M)."""

    phi: torch.Tensor
    active_mask: torch.Tensor = field(default=None)

    def __post_init__(self):
        if self.active_mask is None:
            self.active_mask = torch.ones(self.phi.shape[:2], dtype=torch.bool, device=self.phi.device)
        if self.active_mask.shape != self.phi.shape[:2]:
            raise ConfigurationError("active_mask must have shape (K, M)")

    @property
    def num_classes(self) -> int:
        return self.phi.shape[0]

    @property
    def prototypes_per_class(self) -> int:
        return self.phi.shape[1]

    def active(self, k: int) -> torch.Tensor:
        """Active prototypes of class ``k`` as an (M_active, d) matrix."""
        return self.phi[k][self.active_mask[k]]

    def active_flat(self) -> tuple[torch.Tensor, list[tuple[int, int]]]:
        """All active prototypes stacked row-wise, with their (class, index) labels."""
        idx = [(k, j) for k in range(self.num_classes) for j in range(self.prototypes_per_class)
               if bool(self.active_mask[k, j])]
        rows = torch.stack([self.phi[k, j] for k, j in idx])
        return rows, idx


# -- functional pieces --------------------------------------------------------


def reparameterize(posterior: PosteriorParams, noise: torch.Tensor) -> torch.Tensor:
    return posterior.mu + posterior.sigma * noise


def squared_distances(z: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
    """(B, d) codes against (K, M, d) prototypes -> (B, K, M) squared distances."""
    diff = z[:, None, None, :] - phi[None]
    return (diff * diff).sum(-1)


def similarity(z: torch.Tensor, phi: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Log-ratio similarity ``log((|z - phi|^2 + 1) / (|z - phi|^2 + eps))``.

    Strictly positive, bounded by ``log(1/eps)`` and decreasing in distance.
    """
    if not 0.0 < epsilon < 1.0:
        raise ConfigurationError(f"epsilon must lie in (0, 1), got {epsilon}")
    d2 = squared_distances(z, phi)
    return torch.log(d2 + 1.0) - torch.log(d2 + epsilon)


def class_logits(s: torch.Tensor, weights: torch.Tensor, active_mask: torch.Tensor | None = None) -> torch.Tensor:
    if active_mask is not None:
        s = s * active_mask.to(s.dtype)
    return s.flatten(1) @ weights


def classify(s: torch.Tensor, weights: torch.Tensor, active_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over the linear head applied to the flattened (K*M) similarities."""
    return torch.softmax(class_logits(s, weights, active_mask), dim=-1)


def class_connection_weights(num_classes: int, prototypes_per_class: int, off_class: float = -0.5) -> torch.Tensor:
    """(K*M, K) head initialisation: +1 from a prototype to its own class, ``off_class`` elsewhere."""
    own = torch.eye(num_classes).repeat_interleave(prototypes_per_class, dim=0)
    return own + off_class * (1.0 - own)


# -- networks -------------------------------------------------------------------


def _conv_out(size: int) -> int:
    # kernel 3, stride 2, padding 1
    return (size - 1) // 2 + 1


class ConvEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c, h, w = cfg.input_shape
        layers = []
        self.sizes = [(h, w)]
        ch_in, ch = c, cfg.base_channels
        for _ in range(cfg.num_blocks):
            layers += [nn.Conv2d(ch_in, ch, 3, stride=2, padding=1), nn.LeakyReLU(0.1)]
            h, w = _conv_out(h), _conv_out(w)
            self.sizes.append((h, w))
            ch_in, ch = ch, ch * 2
        self.out_channels = ch_in
        self.features = nn.Sequential(*layers, nn.Flatten())
        flat = ch_in * h * w
        self.mu = nn.Linear(flat, cfg.latent_dim)
        self.logvar = nn.Linear(flat, cfg.latent_dim)

    def forward(self, x):
        h = self.features(x)
        return self.mu(h), self.logvar(h)


class ConvDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig, encoder: ConvEncoder):
        super().__init__()
        sizes = encoder.sizes[::-1]
        ch = encoder.out_channels
        self.start = (ch, *sizes[0])
        self.fc = nn.Linear(cfg.latent_dim, ch * sizes[0][0] * sizes[0][1])
        layers = []
        for i, ((h_in, w_in), (h_out, w_out)) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            ch_out = cfg.input_shape[0] if last else ch // 2
            pad = (h_out - (2 * h_in - 1), w_out - (2 * w_in - 1))
            layers.append(nn.ConvTranspose2d(ch, ch_out, 3, stride=2, padding=1, output_padding=pad))
            if not last:
                layers.append(nn.LeakyReLU(0.1))
            ch = ch_out
        self.deconv = nn.Sequential(*layers)

    def forward(self, z):
        h = F.leaky_relu(self.fc(z), 0.1).view(-1, *self.start)
        return torch.sigmoid(self.deconv(h))


class MLPEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n_in = math.prod(cfg.input_shape)
        self.features = nn.Sequential(
            nn.Flatten(), nn.Linear(n_in, cfg.hidden_dim), nn.LeakyReLU(0.1),
            nn.Linear(cfg.hidden_dim, cfg.hidden_dim), nn.LeakyReLU(0.1),
        )
        self.mu = nn.Linear(cfg.hidden_dim, cfg.latent_dim)
        self.logvar = nn.Linear(cfg.hidden_dim, cfg.latent_dim)

    def forward(self, x):
        h = self.features(x)
        return self.mu(h), self.logvar(h)


class MLPDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.shape = cfg.input_shape
        self.net = nn.Sequential(
            nn.Linear(cfg.latent_dim, cfg.hidden_dim), nn.LeakyReLU(0.1),
            nn.Linear(cfg.hidden_dim, cfg.hidden_dim), nn.LeakyReLU(0.1),
            nn.Linear(cfg.hidden_dim, math.prod(cfg.input_shape)),
        )

    def forward(self, z):
        return torch.sigmoid(self.net(z)).view(-1, *self.shape)


class ForwardOutput(NamedTuple):
    prediction: torch.Tensor
    reconstruction: torch.Tensor
    similarities: torch.Tensor
    posterior: PosteriorParams
    z: torch.Tensor


class PrototypeVAE(nn.Module):
    """Encoder, decoder, K x M prototypes and the glass-box linear head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        K, M, d = config.num_classes, config.prototypes_per_class, config.latent_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            if config.arch == "conv":
                self.encoder = ConvEncoder(config)
                self.decoder = ConvDecoder(config, self.encoder)
            else:
                self.encoder = MLPEncoder(config)
                self.decoder = MLPDecoder(config)
            self.prototypes = nn.Parameter(torch.randn(K, M, d) / math.sqrt(d))
        self.classifier = nn.Parameter(class_connection_weights(K, M))
        self.register_buffer("active_mask", torch.ones(K, M, dtype=torch.bool))

    @property
    def bank(self) -> PrototypeBank:
        return PrototypeBank(self.prototypes, self.active_mask)

    def _check(self, x: torch.Tensor):
        if x.dim() != 4 or tuple(x.shape[1:]) != self.config.input_shape:
            raise ConfigurationError(
                f"expected a batch of shape (B, {', '.join(map(str, self.config.input_shape))}), "
                f"got {tuple(x.shape)}"
            )

    def encode(self, x: torch.Tensor) -> PosteriorParams:
        self._check(x)
        mu, logvar = self.encoder(x)
        logvar = logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)
        return PosteriorParams(mu, torch.exp(0.5 * logvar))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def similarity(self, z: torch.Tensor) -> torch.Tensor:
        return similarity(z, self.prototypes, self.config.epsilon)

    def classify(self, s: torch.Tensor) -> torch.Tensor:
        return classify(s, self.classifier, self.active_mask)

    def forward(self, x: torch.Tensor, noise: torch.Tensor | None = None) -> ForwardOutput:
        """Full pipeline. ``noise`` of None means z = mu.

        The decoder always sees the sampled code. The similarity head sees the
        posterior mean unless ``config.similarity_input == "sample"``: with
        unit-variance posteriors a sampled code sits at squared distance ~d
        from every prototype, which flattens all similarities to ~1/d.
        """
        posterior = self.encode(x)
        z = posterior.mu if noise is None else reparameterize(posterior, noise)
        s = self.similarity(z if self.config.similarity_input == "sample" else posterior.mu)
        return ForwardOutput(self.classify(s), self.decode(z), s, posterior, z)

    def decode_prototypes(self) -> torch.Tensor:
        """Decoded images for all K*M prototypes, shape (K, M, C, H, W)."""
        K, M, d = self.prototypes.shape
        imgs = self.decode(self.prototypes.reshape(K * M, d))
        return imgs.view(K, M, *self.config.input_shape)
