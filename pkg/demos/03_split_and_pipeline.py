"""From a one-hot label CSV to normalised training batches.

Writes a small PPM corpus into a temporary directory, splits it 80/20 per
class, and pulls one augmented training batch.

Run: python3 demos/03_split_and_pipeline.py
"""

import tempfile
from pathlib import Path

import numpy as np

from leafnet import data, imaging, synthetic
from leafnet.train import TrainConfig

PALETTE = ((0.85, 0.15, 0.15), (0.15, 0.75, 0.2), (0.2, 0.3, 0.9), (0.9, 0.85, 0.1))

root = Path(tempfile.mkdtemp(prefix="leafnet_demo_"))
(root / "images").mkdir()
ds = synthetic.color_shapes(40, PALETTE, size=48, seed=0)
rows = ["image_id,healthy,multiple_diseases,rust,scab"]
for i in range(len(ds)):
    img, label = ds.get(i)
    imaging.write_ppm(root / "images" / f"{ds.ids[i]}.ppm", img.transpose(1, 2, 0))
    rows.append(ds.ids[i] + "," + ",".join("1" if c == label else "0" for c in range(4)))
(root / "labels.csv").write_text("\n".join(rows) + "\n")

records = data.parse_labels(root / "labels.csv", image_dir=root / "images")
manifest = data.stratified_split(records, test_fraction=0.2, seed=42)
manifest.save(root / "split.txt")
print(f"{len(manifest.train)} train / {len(manifest.test)} test")
print("test counts per class:", dict(manifest.test_counts))
print("manifest head:\n  " + "\n  ".join(manifest.to_text().splitlines()[:4]))

# Exact largest-remainder apportionment on the full 3642-image class sizes.
print("3642-image corpus test counts:",
      data.apportion_test_counts({"healthy": 1032, "multiple_diseases": 182, "rust": 1244, "scab": 1184}, 0.2))

train_ds = data.ImageFileDataset.from_manifest(records, manifest, "train", resolution=32)
spec = TrainConfig(batch_size=8).batch_spec()
x, y = next(data.make_batches(train_ds, spec, rng=np.random.default_rng(0), training=True))
print(f"batch {x.shape} {x.dtype}, labels {y.tolist()}")
print(f"per-channel mean after ImageNet normalisation: {np.round(x.data.mean(axis=(0, 2, 3)), 3)}")
print(f"files left in {root}")
