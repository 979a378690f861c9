"""Convert a torchvision ResNet-34 state dict into a leafnet weight dump.

leafnet never reads third-party containers itself. This script is the only
place torch is touched: it flattens the state dict into the LFNT container
under torchvision's own names and writes the matching name map. The dump is
then imported with the CLI:

    python3 demos/convert_torchvision_weights.py --out-dir weights/
    leafnet import-weights --dump weights/resnet34_torchvision.lfnt \
        --namemap weights/resnet34_torchvision.map --out weights/pretrained.lfnt

Without --state-dict the script asks torchvision for its ImageNet weights
(needs network access the first time, cached afterwards).
"""

import argparse
from pathlib import Path

import numpy as np

from leafnet import checkpoint


def load_state_dict(path):
    import torch
    import torchvision

    if path:
        return torch.load(path, map_location="cpu")
    weights = torchvision.models.ResNet34_Weights.IMAGENET1K_V1
    return torchvision.models.resnet34(weights=weights).state_dict()


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--state-dict", help="saved torch state dict (.pth); default: torchvision ImageNet weights")
    parser.add_argument("--out-dir", required=True)
    args = parser.parse_args()

    state = load_state_dict(args.state_dict)
    name_map = checkpoint.torchvision_resnet_namemap()
    entries = {}
    for external, _ in name_map.pairs:
        entries[external] = np.ascontiguousarray(state[external].detach().cpu().numpy(), dtype="<f4")
    skipped = [k for k in state if k not in entries]

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.write_entries(out / "resnet34_torchvision.lfnt", entries)
    (out / "resnet34_torchvision.map").write_text(name_map.to_text())
    print(f"wrote {len(entries)} tensors to {out / 'resnet34_torchvision.lfnt'}")
    if skipped:
        print(f"ignored {len(skipped)} bookkeeping entries, e.g. {skipped[0]}")


if __name__ == "__main__":
    main()
