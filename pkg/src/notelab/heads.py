"""Two-layer classification heads shared by pre-training and fine-tuning."""

from __future__ import annotations

import numpy as np

from .nn import Tensor, add, gelu, matmul


def init_mlp_head(
    d_in: int,
    d_hidden: int,
    n_out: int,
    rng: np.random.Generator,
    prefix: str,
) -> dict[str, Tensor]:
    """Depth-2 head: affine -> gelu -> affine, normal(0, 0.02) weights."""

    def t(arr, name):
        return Tensor(arr, requires_grad=True, name=name)

    return {
        f"{prefix}.w1": t(rng.normal(0.0, 0.02, size=(d_in, d_hidden)), f"{prefix}.w1"),
        f"{prefix}.b1": t(np.zeros(d_hidden), f"{prefix}.b1"),
        f"{prefix}.w2": t(rng.normal(0.0, 0.02, size=(d_hidden, n_out)), f"{prefix}.w2"),
        f"{prefix}.b2": t(np.zeros(n_out), f"{prefix}.b2"),
    }


def apply_mlp_head(head: dict[str, Tensor], x: Tensor, prefix: str) -> Tensor:
    h = gelu(add(matmul(x, head[f"{prefix}.w1"]), head[f"{prefix}.b1"]))
    return add(matmul(h, head[f"{prefix}.w2"]), head[f"{prefix}.b2"])


def init_affine_head(
    d_in: int, n_out: int, rng: np.random.Generator, prefix: str
) -> dict[str, Tensor]:
    """Single affine map, used for per-token classification."""
    return {
        f"{prefix}.w": Tensor(
            rng.normal(0.0, 0.02, size=(d_in, n_out)), requires_grad=True, name=f"{prefix}.w"
        ),
        f"{prefix}.b": Tensor(np.zeros(n_out), requires_grad=True, name=f"{prefix}.b"),
    }


def apply_affine_head(head: dict[str, Tensor], x: Tensor, prefix: str) -> Tensor:
    return add(matmul(x, head[f"{prefix}.w"]), head[f"{prefix}.b"])


def head_out_dim(head: dict[str, Tensor], prefix: str) -> int:
    key = f"{prefix}.w2" if f"{prefix}.w2" in head else f"{prefix}.w"
    return head[key].shape[1]
