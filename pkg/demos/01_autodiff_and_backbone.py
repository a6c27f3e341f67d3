"""Build a tiny ViT, push a prompt through it and check the gradients.

The backbone is frozen, so the only things that can learn are the prompt
tokens prepended after [CLS] and whatever head sits on the feature.
"""

import numpy as np

import promptcl.tensor as T
from promptcl.backbone import BackboneState, ViTConfig, forward_features
from promptcl.data import GratingSpec, generate_synthetic, to_float
from promptcl.tensor import Tape, Tensor, finite_diff_check

cfg = ViTConfig()  # 16x16 grayscale, patch 4, D=32, depth 2
rng = np.random.default_rng(0)
backbone = BackboneState.init(cfg, rng).freeze()
print(f"backbone: {backbone.n_params()} frozen weights, {cfg.num_patches} patches of width {cfg.embed_dim}")

data = generate_synthetic(4, 2, 1, GratingSpec(), seed=0)
images = to_float(data.images[:4])

# No prompt versus a two-token prompt: the [CLS] feature moves.
prompt = Tensor(rng.uniform(-1, 1, size=(2, cfg.embed_dim)), requires_grad=True)
with T.no_tape():
    plain = forward_features(images, None, backbone).data
    prompted = forward_features(images, prompt, backbone).data
print("feature shift from the prompt:", np.round(np.linalg.norm(plain - prompted, axis=1), 3))

# Reverse mode against central differences on a scalar of the features.
probe = Tensor(rng.normal(size=(4, cfg.embed_dim)))


def loss():
    return T.tsum(T.mul(forward_features(images, prompt, backbone), probe))


with Tape() as tape:
    value = loss()
tape.backward(value)
print(f"loss {value.data:.6f}, prompt gradient norm {np.linalg.norm(prompt.grad):.4f}")
print(f"max relative error vs finite differences: {finite_diff_check(loss, [prompt]):.2e}")
