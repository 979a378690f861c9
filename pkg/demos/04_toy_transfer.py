"""Transfer learning at desk scale.

Pretrain a small ResNet on colour task A, then move it to a related task B
that has only 15 training images. The two-phase fine-tune (head only, then the
whole network at a reduced backbone rate) is compared with training the same
architecture from scratch on B.

Run: python3 demos/04_toy_transfer.py   (under 10 s on one core)
"""

import dataclasses
import tempfile
from pathlib import Path

from leafnet import checkpoint, nn, synthetic, train
from leafnet.imaging import AugmentConfig

config = train.TrainConfig(
    batch_size=16, max_lr=0.05, augment=AugmentConfig(0.5, 0.0, 0.0, 0.1),
    mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25),
)

tr_a, te_a = synthetic.train_test(300, synthetic.PALETTE_A, seed=100)
source = nn.build_toy_resnet(3, seed=100)
report = train.fit(source, tr_a, te_a, 6, config)
print(f"task A after 6 epochs: test accuracy {report.final_accuracy:.3f}")

weights = Path(tempfile.mkdtemp()) / "task_a.lfnt"
checkpoint.save(source, weights)

small = dataclasses.replace(config, batch_size=8, max_lr=0.1)
for seed in range(3):
    tr_b, te_b = synthetic.train_test(30, synthetic.PALETTE_B, test_fraction=0.5, seed=200 + seed)
    cfg = dataclasses.replace(small, seed=seed)

    tuned = nn.build_toy_resnet(3, seed=seed)
    checkpoint.load(tuned, weights)
    train.replace_head(tuned, 3, seed=seed)
    ft = train.fine_tune(tuned, tr_b, te_b, 3, 2, cfg)

    scratch = train.fit(nn.build_toy_resnet(3, seed=seed), tr_b, te_b, 5, cfg)
    phases = " ".join(f"{r.phase}:{r.test_accuracy:.2f}" for r in ft.epochs)
    print(f"seed {seed}: fine-tune {ft.final_accuracy:.2f} ({phases}) vs scratch {scratch.final_accuracy:.2f}")
