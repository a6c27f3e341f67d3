"""Forgetting with and without EWC / SI on a large shared prompt.

Forgetting for task s is its accuracy right after it was learned minus its
accuracy at the end of the stream. The regularizers anchor the trainable
parameters to their values at the end of each task, weighted by an
importance estimate.
"""

from dataclasses import replace

from promptcl.analysis import mean_forgetting, select_reg_strength
from promptcl.backbone import ViTConfig
from promptcl.data import generate_synthetic, split_stream
from promptcl.engine import MethodConfig, TrainConfig, pretrain_backbone, run_stream
from promptcl.finetune import FinetuneConfig

backbone = pretrain_backbone(generate_synthetic(20, 30, 10, seed=100), ViTConfig(),
                             FinetuneConfig(epochs=15, batch_size=32, lr=2e-3), seed=0)
data = generate_synthetic(20, 24, 10, seed=1)
stream = split_stream(data, 5, seed=0)
method = MethodConfig(strategy="only_prompt", n_params=1536)
train = TrainConfig()

base = run_stream(data, stream, backbone, method, train)
print(f"unregularized   acc {100 * base.final_acc:5.1f}%  forgetting {100 * mean_forgetting(base.acc):5.1f}")

for kind in ("ewc", "si"):
    strength, scores = select_reg_strength(data, stream, backbone, method, replace(train, reg_kind=kind),
                                           [0.1, 1.0, 10.0, 100.0])
    rec = run_stream(data, stream, backbone, method, replace(train, reg_kind=kind, reg_strength=strength))
    print(f"{kind} (lambda={strength:g})  acc {100 * rec.final_acc:5.1f}%  "
          f"forgetting {100 * mean_forgetting(rec.acc):5.1f}")

print("accuracy matrix of the unregularized run (row = after task t):")
for row in base.acc:
    print("  " + " ".join("  -  " if a is None else f"{100 * a:5.1f}" for a in row))
