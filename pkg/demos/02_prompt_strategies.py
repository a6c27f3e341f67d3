"""Compare a single shared prompt with a key/query prompt pool.

The pool retrieves its top-N prompts per image through cosine similarity
between learned keys and a frozen query feature. P_sim measures how alike the
retrieved prompts are across the test set (100 means every image got the same
prompt).
"""

from promptcl.backbone import ViTConfig
from promptcl.data import generate_synthetic, split_stream
from promptcl.engine import MethodConfig, TrainConfig, pretrain_backbone, run_stream
from promptcl.finetune import FinetuneConfig

print("pretraining a backbone on an unrelated upstream grating set...")
upstream = generate_synthetic(20, 30, 10, seed=100)
backbone = pretrain_backbone(upstream, ViTConfig(), FinetuneConfig(epochs=15, batch_size=32, lr=2e-3), seed=0)

data = generate_synthetic(20, 24, 10, seed=1)
stream = split_stream(data, 5, seed=0)
train = TrainConfig()  # 5 epochs per task, head lr 1e-3, prompt lr 1e-2

for method in (MethodConfig(strategy="none"),
               MethodConfig(strategy="only_prompt", n_params=96),
               MethodConfig(strategy="pool", pool_size=10, top_n=3),
               MethodConfig(strategy="weighted", pool_size=10)):
    rec = run_stream(data, stream, backbone, method, train)
    sim = "" if rec.p_sim_init is None else f"  P_sim {rec.p_sim_init:5.1f} -> {rec.p_sim[-1]:5.1f}"
    print(f"{method.label:<14} final accuracy {100 * rec.final_acc:5.1f}%  "
          f"prompt params {rec.n_params_prompt:>4} keys {rec.n_params_keys:>3}{sim}")
