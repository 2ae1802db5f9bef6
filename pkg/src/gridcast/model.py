"""Construction of the two-branch interpolation network.

The default configuration is the full-size architecture: a five-layer
convolutional branch over the 32x32 terrain patch (four 3x3 convolutions
of 128 channels, the first at stride 3, then 3x3 average pooling down to
2x2), a single 512-unit dense branch over the location triple, and a
1024 -> 256 -> 128 -> 2 head emitting (mu, log_var). That configuration
has exactly 741,634 trainable parameters; `test_model` pins this.

Dropout follows every weight layer except the final output layer. The
convolutional-branch dropout can be switched off independently since its
placement is a modelling choice, not a structural one.
"""

from __future__ import annotations

import json

import numpy as np

from .nn import (
    AvgPool2d,
    Concat,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    NetworkSpec,
    Relu,
    WeightSet,
    branch_traces,
    init_weights,
    param_count,
)

__all__ = [
    "build_network",
    "build_default_network",
    "describe",
    "describe_rows",
    "describe_json",
    "shape_chain",
]


def build_network(
    dropout_rate: float,
    conv_channels: int = 128,
    branch_units: int = 512,
    head_units: tuple[int, int] = (256, 128),
    patch_size: int = 32,
    in_channels: int = 1,
    loc_features: int = 3,
    dropout_conv_branch: bool = True,
    seed: int | None = None,
) -> tuple[NetworkSpec, WeightSet | None]:
    """Build the two-branch network spec, optionally with initial weights.

    `conv_channels`, `branch_units` and `head_units` scale the width while
    keeping the same topology, which is how the desk-scale tests run.
    Returns (spec, weights); weights are None unless a seed is given.
    """
    conv_drop = (Dropout(),) if dropout_conv_branch else ()
    patch_layers = (
        Conv2d(in_channels, conv_channels, kernel=3, stride=3),
        Relu(), *conv_drop,
        Conv2d(conv_channels, conv_channels, kernel=3, stride=1),
        Relu(), *conv_drop,
        Conv2d(conv_channels, conv_channels, kernel=3, stride=1),
        Relu(), *conv_drop,
        Conv2d(conv_channels, conv_channels, kernel=3, stride=1),
        Relu(), *conv_drop,
        AvgPool2d(pool=3, stride=1),
        Flatten(),
    )
    loc_layers = (
        Dense(loc_features, branch_units),
        Relu(),
        Dropout(),
    )
    # flattened conv output width, from the fixed shape chain
    side = (patch_size - 3) // 3 + 1
    for _ in range(3):
        side = side - 2          # three stride-1 3x3 convolutions
    side = side - 2              # 3x3 average pool, stride 1
    flat = side * side * conv_channels
    head_layers = (
        Concat(),
        Dense(flat + branch_units, head_units[0]),
        Relu(),
        Dropout(),
        Dense(head_units[0], head_units[1]),
        Relu(),
        Dropout(),
        Dense(head_units[1], 2),
    )
    spec = NetworkSpec(
        patch_layers=patch_layers,
        loc_layers=loc_layers,
        head_layers=head_layers,
        patch_size=patch_size,
        in_channels=in_channels,
        loc_features=loc_features,
        dropout_rate=dropout_rate,
    )
    weights = None
    if seed is not None:
        weights = init_weights(spec, np.random.default_rng(seed))
    return spec, weights


def build_default_network(dropout_rate: float, seed: int | None = None):
    """The full-width default network (741,634 trainable parameters)."""
    return build_network(dropout_rate, seed=seed)


def _layer_params(layer) -> int:
    if isinstance(layer, Conv2d):
        return layer.kernel * layer.kernel * layer.in_channels * layer.out_channels + layer.out_channels
    if isinstance(layer, Dense):
        return layer.in_features * layer.out_features + layer.out_features
    return 0


def _kind(layer) -> str:
    return type(layer).__name__.lower()


def describe_rows(spec: NetworkSpec) -> list[dict]:
    """Per-layer table rows (branch, kind, in/out shape, params)."""
    rows = []
    traces = branch_traces(spec)
    for branch in ("patch", "loc", "head"):
        for layer, in_shape, out_shape in traces[branch]:
            rows.append({
                "branch": branch,
                "kind": _kind(layer),
                "in_shape": list(in_shape),
                "out_shape": list(out_shape),
                "params": _layer_params(layer),
            })
    return rows


def describe(spec: NetworkSpec) -> str:
    """Human-readable per-layer summary; the params column sums to param_count."""
    rows = describe_rows(spec)
    lines = [f"{'branch':<7} {'layer':<10} {'in':<16} {'out':<16} {'params':>9}"]
    for r in rows:
        in_s = "x".join(str(d) for d in r["in_shape"])
        out_s = "x".join(str(d) for d in r["out_shape"])
        lines.append(f"{r['branch']:<7} {r['kind']:<10} {in_s:<16} {out_s:<16} {r['params']:>9}")
    total = param_count(spec)
    lines.append(f"{'total':<7} {'':<10} {'':<16} {'':<16} {total:>9}")
    lines.append(f"dropout rate: {spec.dropout_rate}")
    return "\n".join(lines)


def describe_json(spec: NetworkSpec) -> str:
    return json.dumps(
        {"layers": describe_rows(spec), "total_params": param_count(spec),
         "dropout_rate": spec.dropout_rate},
        indent=2, sort_keys=True,
    )


def shape_chain(spec: NetworkSpec) -> list[int]:
    """Spatial edge lengths through the convolutional branch (incl. input)."""
    chain = [spec.patch_size]
    for layer, _, out_shape in branch_traces(spec)["patch"]:
        if isinstance(layer, (Conv2d, AvgPool2d)):
            chain.append(out_shape[0])
    return chain
