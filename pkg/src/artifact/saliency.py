"""Post-hoc stage two: EER gating and a one-class saliency decoder on the frozen diagnosis network."""

from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .detect.env import BoundingVolume
from .grad import AdamState, Array, NetworkSpec, ParameterSet, adam_step, backward, forward, no_grad
from .grad import array as A, layers as L
from .meta import probabilities

log = logging.getLogger(__name__)

ZETA = 0.8
MIN_COMPONENT = 8


# -- EER --------------------------------------------------------------------------------------


def _rates(s: np.ndarray, y: np.ndarray, tau: float) -> tuple[float, float]:
    pred = s > tau
    return float(pred[~y].mean()), float((~pred[y]).mean())


def eer_threshold(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Threshold minimising |FPR - FNR| with positives called for score > threshold.

    Candidates are midpoints between consecutive distinct scores. When several
    are optimal, the midpoint of the optimal range is used (or the optimal
    candidate nearest to it if the range is not contiguous).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or y.all() or not y.any():
        raise ValueError("EER needs scores for both classes")
    u = np.unique(s)
    if len(u) == 1:
        return float(u[0])
    cands = (u[:-1] + u[1:]) / 2
    gaps = np.array([abs(np.subtract(*_rates(s, y, t))) for t in cands])
    best = cands[np.isclose(gaps, gaps.min(), rtol=0, atol=1e-12)]
    lo_edge = u[np.searchsorted(u, best[0]) - 1]
    hi_edge = u[np.searchsorted(u, best[-1])]
    mid = (lo_edge + hi_edge) / 2
    i = np.searchsorted(u, mid)
    # mid lies in an optimal gap only if the gap it falls in is optimal
    if 0 < i < len(u) and u[i] != mid and np.any(np.isclose(best, (u[i - 1] + u[i]) / 2)):
        return float(mid)
    return float(best[np.argmin(np.abs(best - mid))])


def equal_error_rate(scores, labels, tau: float) -> tuple[float, float]:
    """(FPR, FNR) at ``tau``."""
    return _rates(np.asarray(scores, float), np.asarray(labels).astype(bool), tau)


# -- loss ----------------------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    tv: float = 0.1
    area: float = 3.0
    preserve: float = 1.0
    destroy: float = 2.5
    # the destroy term is log(p + floor); without a floor it is unbounded below
    destroy_floor: float = 0.01

    def __post_init__(self):
        if min(self.tv, self.area, self.preserve, self.destroy, self.destroy_floor) < 0:
            raise ValueError("loss weights must be non-negative")


def tv_loss(m: Array) -> Array:
    """Mean absolute forward difference, averaged over the three spatial axes. ``m`` is (N, 1, X, Y, Z)."""
    terms = []
    for ax in (2, 3, 4):
        n = m.shape[ax]
        if n < 2:
            continue
        hi = tuple(slice(1, None) if a == ax else slice(None) for a in range(5))
        lo = tuple(slice(None, -1) if a == ax else slice(None) for a in range(5))
        terms.append(A.mean(A.abs_(m[hi] - m[lo])))
    if not terms:
        return Array(np.zeros((), dtype=m.dtype))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out / len(terms)


def area_loss(m: Array) -> Array:
    return A.mean(m)


def frozen(params: ParameterSet) -> ParameterSet:
    """Constant copies of ``params`` (no gradient is recorded for them), running statistics shared."""
    out = params.with_params({k: Array(v.data) for k, v in params.params.items()})
    out.training = False
    return out


def _malignant_logprob(spec: NetworkSpec, enc: ParameterSet, x: Array) -> Array:
    logits = forward(spec, enc, x, training=False)
    return L.log_softmax(logits)[:, 1]


def saliency_loss(m: Array, x: np.ndarray, y: np.ndarray, spec: NetworkSpec, encoder: ParameterSet,
                  weights: LossWeights = LossWeights()) -> Array:
    """Batch mean of the four-term mask loss.

    ``m`` and ``x`` are (N, 1, X, Y, Z); ``y`` holds the binary screening label.
    ``encoder`` should come from :func:`frozen` so gradients reach only ``m``.
    """
    x = np.asarray(x, dtype=m.dtype)
    if m.shape != x.shape:
        raise ValueError(f"mask {m.shape} and volume {x.shape} extents differ")
    y = np.asarray(y, dtype=m.dtype).reshape(-1)
    n = m.shape[0]
    per = [weights.tv * tv_loss(m[i: i + 1]) + weights.area * area_loss(m[i: i + 1]) for i in range(n)]
    loss = per[0]
    for p in per[1:]:
        loss = loss + p
    loss = loss / n
    if np.any(y != 0):
        xa = Array(x)
        lp = _malignant_logprob(spec, encoder, m * xa)
        ld = _malignant_logprob(spec, encoder, (1.0 - m) * xa)
        if weights.destroy_floor > 0:
            ld = A.log(A.exp(ld) + weights.destroy_floor)
        yy = Array(y)
        loss = loss + A.mean(yy * (ld * weights.destroy - lp * weights.preserve))
    return loss


# -- decoder -------------------------------------------------------------------------------------


@dataclass
class DecoderConfig:
    channels: tuple[int, ...] = (16, 12, 8, 8)
    lr: float = 3e-3
    epochs: int = 20
    batch_size: int = 8
    weights: LossWeights = field(default_factory=LossWeights)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DecoderConfig:
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def encoder_taps(spec: NetworkSpec) -> tuple[int, list[int]]:
    """(bottleneck layer index, skip layer indices from deep to shallow).

    The bottleneck is the activation feeding global pooling; skips are the
    outputs of every dense block but the last.
    """
    kinds = [layer["type"] for layer in spec.layers]
    if "gap" not in kinds:
        raise ValueError("encoder needs a global-pooling layer")
    bottleneck = kinds.index("gap") - 1
    blocks = [i for i, k in enumerate(kinds) if k == "dense_block"]
    return bottleneck, blocks[:-1][::-1]


def _plan(spec: NetworkSpec, n_blocks: int):
    """Per decoder block: (target extent, skip source) where the source is a layer index or -1 for the input."""
    shapes = spec.shapes()
    _, skips = encoder_taps(spec)
    plan = [(shapes[i][1:], i) for i in skips]
    full = tuple(spec.input_shape[1:])
    while len(plan) < n_blocks:
        plan.append((full, -1 if not any(src == -1 for _, src in plan) else None))
    return plan[:n_blocks]


def init_decoder(spec: NetworkSpec, config: DecoderConfig = DecoderConfig(), seed=0) -> ParameterSet:
    rng = np.random.default_rng(seed)
    shapes = spec.shapes()
    bottleneck, _ = encoder_taps(spec)
    cin = shapes[bottleneck][0]
    ps = ParameterSet()
    for b, ((_, src), cout) in enumerate(zip(_plan(spec, len(config.channels)), config.channels)):
        skip_c = 0 if src is None else (spec.input_shape[0] if src == -1 else shapes[src][0])
        fan_in = (cin + skip_c) * 27
        bound = np.sqrt(6.0 / fan_in)
        ps.add(f"dec.{b}.conv.weight", rng.uniform(-bound, bound, (cout, cin + skip_c, 3, 3, 3)).astype(np.float32))
        ps.add(f"dec.{b}.bn.gamma", np.ones(cout, np.float32))
        ps.add(f"dec.{b}.bn.beta", np.zeros(cout, np.float32))
        ps.add_buffer(f"dec.{b}.bn.running_mean", np.zeros(cout, np.float32))
        ps.add_buffer(f"dec.{b}.bn.running_var", np.ones(cout, np.float32))
        cin = cout
    bound = np.sqrt(6.0 / cin)
    ps.add("dec.out.weight", rng.uniform(-bound, bound, (1, cin, 1, 1, 1)).astype(np.float32))
    ps.add("dec.out.bias", np.zeros(1, np.float32))
    return ps


def decode(spec: NetworkSpec, encoder: ParameterSet, decoder: ParameterSet, x: np.ndarray,
           training: bool = False, update_stats: bool = True) -> Array:
    """Mask in [0, 1] with the extents of ``x`` (N, 1, X, Y, Z)."""
    n_blocks = sum(1 for k in decoder.params if k.endswith(".conv.weight"))
    with no_grad():
        _, feats = forward(spec, encoder, x, training=False, features=True)
    bottleneck, _ = encoder_taps(spec)
    h = Array(feats[bottleneck].data)
    for b, (extent, src) in enumerate(_plan(spec, n_blocks)):
        h = L.resize_nearest(h, extent)
        if src is not None:
            skip = x if src == -1 else feats[src].data
            h = A.concat([h, Array(np.asarray(skip, dtype=h.dtype))], axis=1)
        h = L.conv(h, decoder[f"dec.{b}.conv.weight"], None, (1, 1, 1), (1, 1, 1))
        h = L.batch_norm(h, decoder[f"dec.{b}.bn.gamma"], decoder[f"dec.{b}.bn.beta"],
                         decoder.buffers[f"dec.{b}.bn.running_mean"], decoder.buffers[f"dec.{b}.bn.running_var"],
                         training, update_stats)
        h = A.relu(h)
    return A.sigmoid(L.conv(h, decoder["dec.out.weight"], decoder["dec.out.bias"], (1, 1, 1), (0, 0, 0)))


def masks(spec: NetworkSpec, encoder: ParameterSet, decoder: ParameterSet, volumes: np.ndarray,
          batch: int = 16) -> np.ndarray:
    """Eval-mode masks for (N, X, Y, Z) volumes."""
    out = []
    with no_grad():
        for k in range(0, len(volumes), batch):
            xb = np.asarray(volumes[k: k + batch], dtype=np.float32)[:, None]
            out.append(decode(spec, encoder, decoder, xb, training=False).data[:, 0])
    return np.concatenate(out)


@dataclass
class SaliencyResult:
    decoder: ParameterSet
    history: list[float]


def train_saliency(volumes: np.ndarray, labels: Sequence[int], spec: NetworkSpec, encoder: ParameterSet,
                   config: DecoderConfig = DecoderConfig(), seed: int = 0) -> SaliencyResult:
    """Adam on the decoder only; ``labels`` are binary screening labels (1 = malignant)."""
    rng = np.random.default_rng(seed)
    enc = frozen(encoder)
    dec = init_decoder(spec, config, rng)
    state = AdamState()
    x = np.asarray(volumes, dtype=np.float32)[:, None]
    y = np.asarray(labels, dtype=np.float32)
    history = []
    for epoch in range(config.epochs):
        perm = rng.permutation(len(y))
        losses = []
        for k in range(0, len(perm), config.batch_size):
            b = perm[k: k + config.batch_size]
            if len(b) < 2:
                continue
            m = decode(spec, enc, dec, x[b], training=True)
            loss = saliency_loss(m, x[b], y[b], spec, enc, config.weights)
            adam_step(dec, backward(loss, dec), state, config.lr)
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)) if losses else float("nan"))
        log.info("saliency epoch %d loss %.4f", epoch, history[-1])
    dec.training = False
    return SaliencyResult(dec, history)


# -- localisation ---------------------------------------------------------------------------------------

SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def connected_components(binary: np.ndarray) -> tuple[np.ndarray, int]:
    """6-connected component labels (0 = background) and their count."""
    labels, n = ndimage.label(np.asarray(binary, dtype=bool), structure=SIX_CONNECTED)
    return labels, int(n)


@dataclass
class SalientRegion:
    box: BoundingVolume
    mask: np.ndarray  # bool, one component
    score: float  # mean saliency inside the component


def regions_from_mask(m: np.ndarray, zeta: float = ZETA, min_voxels: int = MIN_COMPONENT) -> list[SalientRegion]:
    if not 0 < zeta < 1:
        raise ValueError("zeta must lie in (0, 1)")
    labels, n = connected_components(m > zeta)
    out = []
    for c in range(1, n + 1):
        comp = labels == c
        if comp.sum() < min_voxels:
            continue
        out.append(SalientRegion(BoundingVolume.from_mask(comp), comp, float(m[comp].mean())))
    return out


@dataclass
class Localization:
    score: float  # diagnosis probability
    positive: bool
    regions: list[SalientRegion]
    mask: np.ndarray | None


def localize(volume: np.ndarray, spec: NetworkSpec, encoder: ParameterSet, decoder: ParameterSet, tau: float,
             zeta: float = ZETA, min_voxels: int = MIN_COMPONENT) -> Localization:
    """Regions for volumes diagnosed positive (score > tau); nothing for the rest."""
    score = float(probabilities(spec, encoder, np.asarray(volume)[None])[0])
    if score <= tau:
        return Localization(score, False, [], None)
    m = masks(spec, encoder, decoder, np.asarray(volume)[None])[0]
    return Localization(score, True, regions_from_mask(m, zeta, min_voxels), m)


def write_mask(path, m: np.ndarray) -> None:
    """Float mask with a little-endian (X, Y, Z) uint32 header."""
    m = np.asarray(m, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", *m.shape))
        fh.write(m.tobytes(order="C"))


def read_mask(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    shape = struct.unpack_from("<3I", buf, 0)
    return np.frombuffer(buf, dtype="<f4", offset=12).reshape(shape).copy()
