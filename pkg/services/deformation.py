"""
Time-conditioned deformation field u(x, t).

Fourier features of (x, t) feed a small tanh MLP. The last hidden
activation is exposed as the embedding h(x, t); a zero-initialized linear
head maps it to the displacement u. Parameters live in one flat float64
vector so the optimizer and the checkpoint treat them as a single group.
"""

from dataclasses import dataclass

import numpy as np

from core.errors import ContractError, CorruptModelError
from models.config import FieldConfig


@dataclass(frozen=True)
class FieldArchitecture:
    """Layer widths, activation and Fourier band count of a deformation field."""

    dim: int
    hidden_widths: tuple[int, ...] = (32, 16)
    fourier_bands: int = 4
    activation: str = "tanh"

    @classmethod
    def from_config(cls, cfg: FieldConfig, dim: int) -> "FieldArchitecture":
        return cls(
            dim=dim,
            hidden_widths=tuple(cfg.hidden_widths),
            fourier_bands=cfg.fourier_bands,
            activation=cfg.activation,
        )

    @property
    def in_features(self) -> int:
        return (self.dim + 1) * (1 + 2 * self.fourier_bands)

    @property
    def embed_dim(self) -> int:
        return self.hidden_widths[-1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.in_features, *self.hidden_widths, self.dim]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def param_count(self) -> int:
        return sum(n_in * n_out + n_out for n_in, n_out in self.layer_shapes)

    @property
    def frequencies(self) -> np.ndarray:
        return np.pi * 2.0 ** np.arange(self.fourier_bands)


@dataclass
class FieldPass:
    """Forward intermediates needed by the backward pass."""

    inputs: np.ndarray  # (K, D+1) raw (x, t)
    features: np.ndarray  # (K, F)
    activations: list[np.ndarray]  # post-activation of each hidden layer
    u: np.ndarray  # (K, D)

    @property
    def h(self) -> np.ndarray:
        return self.activations[-1]


class DeformationField:
    """Feed-forward map (x, t) -> (h, u) over a flat parameter vector."""

    def __init__(self, architecture: FieldArchitecture, params: np.ndarray):
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (architecture.param_count,):
            raise ContractError(
                f"expected {architecture.param_count} field parameters, got {params.shape}"
            )
        self.architecture = architecture
        self.params = params

    @classmethod
    def initialize(cls, architecture: FieldArchitecture, rng: np.random.Generator) -> "DeformationField":
        """Xavier-uniform hidden layers, zero output head (u == 0 at start)."""
        chunks = []
        shapes = architecture.layer_shapes
        for layer, (n_in, n_out) in enumerate(shapes):
            if layer == len(shapes) - 1:
                chunks.append(np.zeros(n_in * n_out + n_out))
                continue
            limit = np.sqrt(6.0 / (n_in + n_out))
            chunks.append(rng.uniform(-limit, limit, size=n_in * n_out))
            chunks.append(np.zeros(n_out))
        return cls(architecture, np.concatenate(chunks))

    @classmethod
    def zeros(cls, architecture: FieldArchitecture) -> "DeformationField":
        return cls(architecture, np.zeros(architecture.param_count))

    def copy(self) -> "DeformationField":
        return DeformationField(self.architecture, self.params.copy())

    def layers(self, params: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into ``params`` (defaults to this field's own)."""
        flat = self.params if params is None else params
        out = []
        offset = 0
        for n_in, n_out in self.architecture.layer_shapes:
            weights = flat[offset : offset + n_in * n_out].reshape(n_in, n_out)
            offset += n_in * n_out
            bias = flat[offset : offset + n_out]
            offset += n_out
            out.append((weights, bias))
        return out

    def _features(self, inputs: np.ndarray) -> np.ndarray:
        freqs = self.architecture.frequencies
        if freqs.size == 0:
            return inputs
        angles = inputs[:, None, :] * freqs[None, :, None]  # (K, B, D+1)
        count = inputs.shape[0]
        return np.concatenate(
            [inputs, np.sin(angles).reshape(count, -1), np.cos(angles).reshape(count, -1)],
            axis=1,
        )

    def _activate(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z) if self.architecture.activation == "tanh" else np.sin(z)

    def _activation_slope(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        return 1.0 - a * a if self.architecture.activation == "tanh" else np.cos(z)

    def forward(self, positions: np.ndarray, t: float) -> FieldPass:
        if not np.all(np.isfinite(self.params)):
            raise CorruptModelError("deformation field has non-finite parameters")
        positions = np.asarray(positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != self.architecture.dim:
            raise ContractError(f"positions must be (K, {self.architecture.dim})")
        if not np.all(np.isfinite(positions)):
            raise ContractError("positions must be finite")
        if not 0.0 <= t <= 1.0:
            raise ContractError(f"time {t} outside [0, 1]")

        inputs = np.concatenate([positions, np.full((positions.shape[0], 1), float(t))], axis=1)
        features = self._features(inputs)
        layers = self.layers()
        activations = []
        a = features
        for weights, bias in layers[:-1]:
            a = self._activate(a @ weights + bias)
            activations.append(a)
        head_w, head_b = layers[-1]
        u = a @ head_w + head_b
        return FieldPass(inputs=inputs, features=features, activations=activations, u=u)

    def backward(
        self,
        cache: FieldPass,
        grad_u: np.ndarray,
        grad_h: np.ndarray | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """
        Backpropagate loss gradients w.r.t. u (and optionally h).

        Returns:
            (gradient w.r.t. the flat parameters, gradient w.r.t. the positions)
        """
        grad_params = np.zeros_like(self.params)
        grad_layers = self.layers(grad_params)
        layers = self.layers()

        head_w, _ = layers[-1]
        grad_layers[-1][0][...] = cache.h.T @ grad_u
        grad_layers[-1][1][...] = grad_u.sum(axis=0)
        grad_a = grad_u @ head_w.T
        if grad_h is not None:
            grad_a = grad_a + grad_h

        inputs_to = [cache.features, *cache.activations[:-1]]
        for layer in range(len(layers) - 2, -1, -1):
            weights, _ = layers[layer]
            a = cache.activations[layer]
            z = None if self.architecture.activation == "tanh" else inputs_to[layer] @ weights + layers[layer][1]
            grad_z = grad_a * self._activation_slope(z, a)
            grad_layers[layer][0][...] = inputs_to[layer].T @ grad_z
            grad_layers[layer][1][...] = grad_z.sum(axis=0)
            grad_a = grad_z @ weights.T

        grad_positions = self._feature_backward(cache.inputs, grad_a)[:, : self.architecture.dim]
        return grad_params, grad_positions

    def _feature_backward(self, inputs: np.ndarray, grad_features: np.ndarray) -> np.ndarray:
        n_in = inputs.shape[1]
        grad_inputs = grad_features[:, :n_in].copy()
        freqs = self.architecture.frequencies
        if freqs.size == 0:
            return grad_inputs
        count = inputs.shape[0]
        block = freqs.size * n_in
        grad_sin = grad_features[:, n_in : n_in + block].reshape(count, freqs.size, n_in)
        grad_cos = grad_features[:, n_in + block :].reshape(count, freqs.size, n_in)
        angles = inputs[:, None, :] * freqs[None, :, None]
        w = freqs[None, :, None]
        grad_inputs += (w * (grad_sin * np.cos(angles) - grad_cos * np.sin(angles))).sum(axis=1)
        return grad_inputs


def deform_eval(field: DeformationField, positions: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    """
    Evaluate the deformation field.

    Returns:
        (u, h): displacement (K, D) and embedding (K, E)

    Raises:
        CorruptModelError: non-finite parameters
    """
    cache = field.forward(positions, t)
    return cache.u, cache.h
