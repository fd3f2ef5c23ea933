"""Pretrain a teacher, search switches to a budget, binarize and finetune.

Runs on a small synthetic grating task in about a minute.
"""

import dataclasses
import logging
import tempfile

from privit.experiment import build_run_config, cmd_pretrain, cmd_search, load_run_data
from privit.train import accuracy

logging.basicConfig(level=logging.INFO, format="%(message)s")

out = tempfile.mkdtemp(prefix="privit-demo-")
cfg = build_run_config({"search": {"gelu_budget": "25%", "softmax_budget": "25%"}},
                       seed=0, out=f"{out}/teacher")
teacher = cmd_pretrain(cfg)
test = load_run_data(cfg)[1]
print(f"teacher test accuracy {accuracy(teacher, test.images, test.labels):.3f}")

res = cmd_search(dataclasses.replace(cfg, out=f"{out}/search"), teacher)
print(f"search took {res['search_epochs']} epochs")
for row in res["history"][::10]:
    print(f"  epoch {row['epoch']:3d}  gelu {row['gelu_count']:2d}  softmax {row['softmax_count']:2d}  "
          f"lambda_g {row['lambda_g']:.2e}  loss {row['train_loss']:.3f}")
print(f"kept {res['gelu_count']}/34 GELU tokens and {res['softmax_count']}/68 softmax rows")
print(f"test accuracy {res['test_accuracy']:.3f}, latency {res['latency_reluops'] / 1e6:.3f}M ReLUOps")
print("outputs in", f"{out}/search")
