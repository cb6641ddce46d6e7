#!/usr/bin/env python3
"""Regenerate the stored reference activations for the forward-pass tests.

Runs the same deterministic weights and test cards through an independent
torch implementation of the trunk and stores the post-pool activations.
Torch is a development-only requirement; the package itself never imports it.

Usage: python3 scripts/generate_golden_fixtures.py
"""

from __future__ import annotations

import pathlib
import sys

import numpy as np
import torch
import torch.nn.functional as F

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from querydet.backbone import VGG16_BLOCKS, make_random_weights  # noqa: E402
from querydet.synthetic import reference_cards  # noqa: E402

GOLDEN_SEED = 1234
GOLDEN_BIAS = 0.05
GOLDEN_SIDE = 224
OUT = pathlib.Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "golden" / "forward_golden.npz"


def reference_forward(tensors: dict[str, np.ndarray], x: torch.Tensor) -> list[np.ndarray]:
    """Post-pool activations per block, channel-last float32."""
    t = x.unsqueeze(0)
    acts = []
    for block in VGG16_BLOCKS:
        for name, _, _ in block:
            w = torch.from_numpy(np.array(tensors[name + ".weight"]))
            b = torch.from_numpy(np.array(tensors[name + ".bias"]))
            t = F.relu(F.conv2d(t, w, b, padding=1))
        t = F.max_pool2d(t, kernel_size=2, stride=2)
        acts.append(t.squeeze(0).permute(1, 2, 0).numpy().astype(np.float32))
    return acts


def main() -> None:
    torch.set_grad_enabled(False)
    bundle = make_random_weights(seed=GOLDEN_SEED, bias_scale=GOLDEN_BIAS)
    mean = torch.tensor(bundle.metadata.mean).view(3, 1, 1)
    std = torch.tensor(bundle.metadata.std).view(3, 1, 1)

    inputs: dict[str, torch.Tensor] = {}
    for idx, card in enumerate(reference_cards(GOLDEN_SIDE)):
        x = torch.from_numpy(card).float().permute(2, 0, 1) / 255.0
        inputs[f"card{idx}"] = (x - mean) / std
    inputs["zeros"] = torch.zeros(3, GOLDEN_SIDE, GOLDEN_SIDE)

    payload: dict[str, np.ndarray] = {
        "meta_seed": np.int64(GOLDEN_SEED),
        "meta_bias": np.float64(GOLDEN_BIAS),
        "meta_side": np.int64(GOLDEN_SIDE),
    }
    for key, x in inputs.items():
        for bi, act in enumerate(reference_forward(bundle.tensors, x), start=1):
            payload[f"{key}_b{bi}"] = act
        print(f"{key}: " + ", ".join(f"b{i}={payload[f'{key}_b{i}'].shape}" for i in range(1, 6)))

    OUT.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(OUT, **payload)
    print(f"wrote {OUT} ({OUT.stat().st_size / 1e6:.1f} MB)")


if __name__ == "__main__":
    main()
