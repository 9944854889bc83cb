"""Network presets: the detector's residual encoder, the DenseNet classifiers, MLP heads.

``scale`` multiplies channel widths so the same family can be built at paper
size or desk size; block counts are separate arguments.
"""

from __future__ import annotations

from .network import NetworkSpec


def _w(c: int, scale: float) -> int:
    return max(1, int(round(c * scale)))


def residual_encoder(
    input_extent=(16, 16, 8),
    blocks: int = 3,
    base_channels: int = 8,
    head_channels: int = 4,
    scale: float = 1.0,
    classes: int = 2,
) -> NetworkSpec:
    """Conv + residual block stages, two convs, flatten, FC.

    Each stage conv halves every axis that is still at least 8 voxels.
    The flattened output of the last conv is the observation embedding; its
    size is ``embedding_dim(spec)``.
    """
    layers: list[dict] = []
    ext = list(input_extent)
    for b in range(blocks):
        c = _w(base_channels * 2 ** min(b, 2), scale)
        stride = [2 if n >= 8 else 1 for n in ext]
        layers += [
            {"type": "conv", "out": c, "kernel": 3, "stride": stride, "pad": 1, "bias": False},
            {"type": "bn"},
            {"type": "relu"},
            {"type": "residual"},
        ]
        ext = [(n + 2 - 3) // s + 1 for n, s in zip(ext, stride)]
    layers += [
        {"type": "conv", "out": c, "kernel": 3, "stride": 1, "pad": 1, "bias": False},
        {"type": "bn"},
        {"type": "relu"},
        {"type": "conv", "out": _w(head_channels, scale), "kernel": 1, "stride": 1, "pad": 0},
        {"type": "relu"},
        {"type": "flatten"},
        {"type": "linear", "out": classes},
    ]
    return NetworkSpec((1, *input_extent), layers)


def embedding_layer_index(spec: NetworkSpec) -> int:
    """Index of the layer whose output is the observation embedding (the flatten)."""
    idx = [i for i, layer in enumerate(spec.layers) if layer["type"] == "flatten"]
    return idx[-1]


def embedding_dim(spec: NetworkSpec) -> int:
    return spec.shapes()[embedding_layer_index(spec)][0]


def paper_residual_encoder() -> NetworkSpec:
    """Full-size encoder: 100x100x50 input, 5 residual stages, 2304-dim embedding."""
    layers: list[dict] = []
    widths = [8, 16, 32, 64, 64]
    for b, c in enumerate(widths):
        layers += [
            {"type": "conv", "out": c, "kernel": 3, "stride": 1 if b == 0 else 2, "pad": 1, "bias": False},
            {"type": "bn"},
            {"type": "relu"},
            {"type": "residual"},
        ]
    # 100x100x50 -> 7x7x4 after four stride-2 stages; two more convs shrink to 4x4x2
    layers += [
        {"type": "conv", "out": 64, "kernel": 3, "stride": 2, "pad": 1, "bias": False},
        {"type": "bn"},
        {"type": "relu"},
        {"type": "conv", "out": 72, "kernel": 1, "stride": 1, "pad": 0},
        {"type": "relu"},
        {"type": "flatten"},
        {"type": "linear", "out": 2},
    ]
    return NetworkSpec((1, 100, 100, 50), layers)


def densenet(
    input_extent=(24, 24, 12),
    dense_blocks: int = 3,
    layers_per_block: int = 2,
    growth: int = 6,
    compression: float = 0.5,
    stem_channels: int = 8,
    stem_stride: int = 1,
    scale: float = 1.0,
    classes: int = 2,
) -> NetworkSpec:
    """Stem conv, dense blocks separated by stride-2 transitions, BN-ReLU, GAP, FC."""
    g = _w(growth, scale)
    layers: list[dict] = [
        {"type": "conv", "out": _w(stem_channels, scale), "kernel": 3, "stride": stem_stride, "pad": 1, "bias": False},
    ]
    for b in range(dense_blocks):
        layers.append({"type": "dense_block", "layers": layers_per_block, "growth": g})
        if b < dense_blocks - 1:
            layers.append({"type": "transition", "compression": compression, "stride": 2})
    layers += [
        {"type": "bn"},
        {"type": "relu"},
        {"type": "gap"},
        {"type": "linear", "out": classes},
    ]
    return NetworkSpec((1, *input_extent), layers)


def mlp(in_dim: int, hidden: int, out_dim: int, hidden_layers: int = 2) -> NetworkSpec:
    layers: list[dict] = []
    for _ in range(hidden_layers):
        layers += [{"type": "linear", "out": hidden}, {"type": "relu"}]
    layers.append({"type": "linear", "out": out_dim})
    return NetworkSpec((in_dim,), layers)
