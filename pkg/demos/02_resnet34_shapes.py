"""Walk a 224x224 batch through ResNet-34 and print the feature-map shapes.

Run: python3 demos/02_resnet34_shapes.py   (about 10 s on one core)
"""

import numpy as np

from leafnet import nn
from leafnet.tensor import Tensor, no_grad

model = nn.build_resnet34(num_classes=4, seed=0).eval()
print(f"{len(nn.basic_blocks(model))} basic blocks, stages {[len(s) for s in model.stages]}")
print(f"{model.num_parameters():,} trainable parameters")

x = Tensor(np.random.default_rng(0).standard_normal((1, 3, 224, 224)))
with no_grad():
    for name, out in model.stage_outputs(x).items():
        print(f"  {name:<7} {out.shape}")
    probs = model.predict_proba(x).data[0]
print("class probabilities of an untrained head:", np.round(probs, 3))
