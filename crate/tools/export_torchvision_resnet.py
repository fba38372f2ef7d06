"""Convert torchvision ResNet-18 ImageNet weights into a backbone-weights container.

Usage: python export_torchvision_resnet.py OUT.bin [--state-dict resnet18.pth]

Without --state-dict the weights are fetched through torchvision. Only float
tensors are written; deeper stages and the classifier are ignored on load.
"""

import argparse
import json
import struct

import numpy as np


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--state-dict", help="local .pth state dict instead of downloading")
    args = ap.parse_args()

    import torch

    if args.state_dict:
        sd = torch.load(args.state_dict, map_location="cpu")
    else:
        import torchvision

        sd = torchvision.models.resnet18(weights="IMAGENET1K_V1").state_dict()

    tensors = [(k, v.detach().cpu().numpy().astype("<f4")) for k, v in sd.items() if v.is_floating_point()]
    header = {
        "kind": "backbone-weights",
        "meta": {"architecture_id": "resnet18", "truncation_layer": 4},
        "tensors": [{"name": k, "dtype": "f32", "shape": list(a.shape)} for k, a in tensors],
    }
    h = json.dumps(header).encode()
    with open(args.out, "wb") as f:
        f.write(b"SEDDSTOR")
        f.write(struct.pack("<IQ", 1, len(h)))
        f.write(h)
        for _, a in tensors:
            f.write(np.ascontiguousarray(a).tobytes())


if __name__ == "__main__":
    main()
