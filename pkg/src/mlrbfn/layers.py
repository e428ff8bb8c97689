"""RBF network layers with confidence depression.

Each hidden layer responds to an input with per-centroid scales
s = (w / w_init) * exp(-w * dist), gates them by the depression carried
from the previous layer, and projects the gated scales linearly.  The
final layer has one centroid per class, no projections, and emits
log-probabilities so the loss can stay in log space.  Depression makes
zero a black hole: an input far from every centroid in some layer keeps
near-zero confidence through all remaining layers.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _softplus_np
from .errors import DimensionError, FormatError, UsageError
from .initialization import InitReport, LayerInitReport, fit_inverse_widths, minibatch_kmeans

# Depression is clamped to this floor before the final-layer log; keeps
# gradients finite while leaving effectively-zero confidence intact.
DEPRESSION_FLOOR = 1e-30

MODEL_MAGIC = b"MLRB"
MODEL_VERSION = 1


@dataclass
class NetworkConfig:
    """Architecture and gating settings for one network.

    ``hidden_layers`` lists (num_centroids, projection_dim) per hidden
    layer; the final layer always has one centroid per class.  Total
    depth is len(hidden_layers) + 1.
    """

    hidden_layers: list[tuple[int, int]]
    num_classes: int
    norm_order: float = 2.0
    recovery: float = 1.05
    depression: bool = True
    seed: int = 0
    precision: str = "f32"
    kmeans_passes: int = 100

    def __post_init__(self):
        if not self.hidden_layers:
            raise UsageError("at least one hidden layer is required (depth >= 2)")
        if self.recovery <= 1.0:
            raise UsageError(f"recovery must exceed 1, got {self.recovery}")
        if self.num_classes < 2:
            raise UsageError("need at least two classes")
        if self.norm_order < 1:
            raise UsageError(f"norm order must be >= 1, got {self.norm_order}")
        if self.precision not in ("f32", "f64"):
            raise UsageError(f"precision must be f32 or f64, got {self.precision}")

    @property
    def depth(self) -> int:
        return len(self.hidden_layers) + 1

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass
class LayerParams:
    """Parameters of one RBF layer.

    ``inv_width_init_raw`` is frozen at initialization and never
    trained; the hidden-layer scale uses the ratio of the trained to
    the initial softplus'd inverse-width.  The final layer carries no
    projections.
    """

    num_centroids: int
    norm_order: float
    is_final: bool
    projections: Tensor | None = None
    centroids: Tensor | None = None
    inv_width_raw: Tensor | None = None
    inv_width_init_raw: Tensor | None = None

    @property
    def initialized(self) -> bool:
        return self.centroids is not None

    def materialize(self, centroids, raw, raw_init, dtype):
        # astype copies, so loaded (read-only) buffers become writable.
        self.centroids = Tensor(np.asarray(centroids).astype(dtype), requires_grad=True)
        self.inv_width_raw = Tensor(
            np.asarray(raw).astype(dtype).reshape(1, -1), requires_grad=True
        )
        self.inv_width_init_raw = Tensor(
            np.asarray(raw_init).astype(dtype).reshape(1, -1)
        )

    def trainable(self) -> list[Tensor]:
        params = [self.centroids, self.inv_width_raw]
        if not self.is_final:
            params.append(self.projections)
        return params


@dataclass
class ForwardState:
    """Activation and depression leaving one layer."""

    activation: Tensor
    depression: Tensor
    log_depression: Tensor | None = None  # final-layer path only


def hidden_forward(x: Tensor, dep_in: Tensor, params: LayerParams, recovery: float):
    """One depression-gated hidden layer.

    Returns (projected activation, outgoing depression).  The outgoing
    depression is the per-row maximum of the gated scales, so a row far
    from every centroid leaves with depression near zero.
    """
    dist = ad.cdist_pow(x, params.centroids, params.norm_order)
    width = ad.softplus(params.inv_width_raw)
    init_width = _softplus_np(params.inv_width_init_raw.data)
    ratio = width * Tensor(1.0 / init_width)
    scales = ratio * ad.exp(-(dist * width))
    gate = ad.min_const(dep_in * recovery, 1.0)
    gated = scales * gate
    dep_out = ad.max_over_cols(gated)
    return gated @ params.projections, dep_out


def final_forward(x: Tensor, dep_in: Tensor, params: LayerParams, recovery: float):
    """Final layer: log-confidences gated by incoming depression.

    log phi = -w * dist + min(log dep + log recovery, 0); there is no
    width-ratio factor here.  Depression is floored at 1e-30 before the
    log so exactly-zero rows keep defined gradients.
    """
    dist = ad.cdist_pow(x, params.centroids, params.norm_order)
    width = ad.softplus(params.inv_width_raw)
    log_scales = -(dist * width)
    log_dep = ad.log(ad.max_const(dep_in, DEPRESSION_FLOOR))
    log_gate = ad.min_const(log_dep + math.log(recovery), 0.0)
    return log_scales + log_gate, log_dep


def naive_hidden_forward(x: Tensor, params: LayerParams):
    """Ungated hidden layer: plain exp(-w * dist) scales, no ratio factor."""
    dist = ad.cdist_pow(x, params.centroids, params.norm_order)
    width = ad.softplus(params.inv_width_raw)
    scales = ad.exp(-(dist * width))
    return scales @ params.projections


def naive_final_forward(x: Tensor, params: LayerParams):
    """Ungated final layer: log phi = -w * dist."""
    dist = ad.cdist_pow(x, params.centroids, params.norm_order)
    width = ad.softplus(params.inv_width_raw)
    return -(dist * width)


class RbfNetwork:
    """A stack of RBF layers, lazily initialized from the first batch.

    Construction draws the projection matrices (standard normal);
    centroids and inverse-widths are materialized by
    ``initialize_from_batch``, which is data-driven.
    """

    def __init__(self, config: NetworkConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        dtype = config.dtype
        self.layers: list[LayerParams] = []
        for num_centroids, proj_dim in config.hidden_layers:
            proj = Tensor(
                rng.standard_normal((num_centroids, proj_dim)).astype(dtype),
                requires_grad=True,
            )
            self.layers.append(
                LayerParams(num_centroids, config.norm_order, False, projections=proj)
            )
        self.layers.append(LayerParams(config.num_classes, config.norm_order, True))

    @property
    def initialized(self) -> bool:
        return all(layer.initialized for layer in self.layers)

    @property
    def input_dim(self) -> int:
        if not self.initialized:
            raise UsageError("network is not initialized")
        return self.layers[0].centroids.cols

    def trainable_params(self) -> list[Tensor]:
        if not self.initialized:
            raise UsageError("network is not initialized")
        return [p for layer in self.layers for p in layer.trainable()]

    def initialize_from_batch(
        self, batch: np.ndarray, rng: np.random.Generator
    ) -> InitReport:
        """Materialize every layer from one batch (first half of the rows
        places centroids, second half sizes widths), threading the batch
        forward layer by layer."""
        batch = np.asarray(batch, dtype=self.config.dtype)
        if batch.ndim != 2 or batch.shape[0] < 2:
            raise UsageError("initialization needs a 2-D batch with >= 2 rows")
        report = InitReport()
        h = batch
        dep = np.ones((batch.shape[0], 1), dtype=self.config.dtype)
        for index, layer in enumerate(self.layers):
            half = h.shape[0] // 2
            centroids = minibatch_kmeans(
                h[:half],
                layer.num_centroids,
                self.config.norm_order,
                passes=self.config.kmeans_passes,
                rng=rng,
            )
            raw, raw_init, d_power, target = fit_inverse_widths(
                h[half:], centroids, self.config.norm_order
            )
            layer.materialize(centroids, raw, raw_init, self.config.dtype)
            report.layers.append(
                LayerInitReport(index, layer.num_centroids, d_power, target, raw[0])
            )
            if not layer.is_final:
                phi, dep_t = self._hidden(Tensor(h), Tensor(dep), layer)
                h, dep = phi.data, dep_t.data
        return report

    def _hidden(self, x: Tensor, dep: Tensor, layer: LayerParams):
        if self.config.depression:
            return hidden_forward(x, dep, layer, self.config.recovery)
        return naive_hidden_forward(x, layer), dep

    def forward(self, x, dep0=None, return_trace: bool = False):
        """Log-probabilities (m, C) for a batch; optionally the per-layer
        trace of (activation, depression) states.

        ``dep0`` overrides the initial depression (default all-ones);
        tests use it to drive the black-hole bound.
        """
        if not self.initialized:
            raise UsageError("initialize_from_batch must run before forward")
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.config.dtype))
        if x.cols != self.layers[0].centroids.cols:
            raise DimensionError(
                f"input has {x.cols} features, network expects "
                f"{self.layers[0].centroids.cols}"
            )
        if dep0 is None:
            dep = Tensor(np.ones((x.rows, 1), dtype=self.config.dtype))
        else:
            dep = Tensor(np.asarray(dep0, dtype=self.config.dtype).reshape(-1, 1))
        trace: list[ForwardState] = []
        h = x
        for layer in self.layers[:-1]:
            h, dep = self._hidden(h, dep, layer)
            if return_trace:
                trace.append(ForwardState(h, dep))
        if self.config.depression:
            log_probs, log_dep = final_forward(h, dep, self.layers[-1], self.config.recovery)
        else:
            log_probs, log_dep = naive_final_forward(h, self.layers[-1]), None
        if return_trace:
            trace.append(ForwardState(log_probs, dep, log_dep))
            return log_probs, trace
        return log_probs

    def log_probs(self, x, batch_size: int = 4096) -> np.ndarray:
        """Inference-only forward over arbitrarily many rows."""
        x = np.asarray(x, dtype=self.config.dtype)
        chunks = [
            self.forward(x[lo : lo + batch_size]).data
            for lo in range(0, len(x), batch_size)
        ]
        return np.vstack(chunks) if chunks else np.zeros((0, self.config.num_classes))

    def scores(self, x) -> tuple[np.ndarray, np.ndarray]:
        return max_confidence(self.log_probs(x))


def max_confidence(log_probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row (confidence, predicted class); ties pick the lowest index."""
    log_probs = np.asarray(log_probs)
    predictions = np.argmax(log_probs, axis=1)
    scores = np.exp(log_probs[np.arange(log_probs.shape[0]), predictions])
    return scores, predictions


def save_network(path, network: RbfNetwork) -> None:
    """Write the binary container: counts, gating settings, then each
    layer's parameters as little-endian float32 row-major."""
    if not network.initialized:
        raise UsageError("cannot save an uninitialized network")
    cfg = network.config
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<IIIddB", MODEL_VERSION, cfg.depth, cfg.num_classes,
                             float(cfg.norm_order), float(cfg.recovery),
                             1 if cfg.depression else 0))
        for layer in network.layers:
            out_dim = 0 if layer.is_final else layer.projections.cols
            fh.write(struct.pack("<III", layer.num_centroids,
                                 layer.centroids.cols, out_dim))
            for arr in (layer.centroids.data, layer.inv_width_raw.data,
                        layer.inv_width_init_raw.data):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            if not layer.is_final:
                fh.write(np.ascontiguousarray(layer.projections.data, dtype="<f4").tobytes())


def _read_exact(fh, count):
    data = fh.read(count)
    if len(data) != count:
        raise FormatError("model file is truncated")
    return data


def load_network(path) -> RbfNetwork:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MODEL_MAGIC:
            raise FormatError("not a network model file (bad magic)")
        version, depth, num_classes, norm_order, recovery, depression = struct.unpack(
            "<IIIddB", _read_exact(fh, 29)
        )
        if version != MODEL_VERSION:
            raise FormatError(f"unsupported model version {version}")
        if depth < 2:
            raise FormatError(f"model depth {depth} is invalid")
        headers = []
        arrays = []
        for index in range(depth):
            n, d_in, out_dim = struct.unpack("<III", _read_exact(fh, 12))
            headers.append((n, d_in, out_dim))
            cent = np.frombuffer(_read_exact(fh, 4 * n * d_in), dtype="<f4")
            raw = np.frombuffer(_read_exact(fh, 4 * n), dtype="<f4")
            raw_init = np.frombuffer(_read_exact(fh, 4 * n), dtype="<f4")
            proj = None
            if out_dim:
                proj = np.frombuffer(_read_exact(fh, 4 * n * out_dim), dtype="<f4")
            arrays.append((cent.reshape(n, d_in), raw, raw_init,
                           None if proj is None else proj.reshape(n, out_dim)))
        if fh.read(1):
            raise FormatError("trailing bytes after model payload")
    if headers[-1][2] != 0 or any(h[2] == 0 for h in headers[:-1]):
        raise FormatError("projection layout does not match a final layer")
    if headers[-1][0] != num_classes:
        raise FormatError("final layer centroid count disagrees with class count")
    config = NetworkConfig(
        hidden_layers=[(n, out_dim) for n, _, out_dim in headers[:-1]],
        num_classes=num_classes,
        norm_order=norm_order,
        recovery=recovery,
        depression=bool(depression),
    )
    network = RbfNetwork(config)
    for layer, (cent, raw, raw_init, proj) in zip(network.layers, arrays):
        layer.materialize(cent, raw, raw_init, np.float32)
        if proj is not None:
            layer.projections = Tensor(proj.astype(np.float32), requires_grad=True)
    return network
