#!/usr/bin/env python3
"""Convert pretrained PyTorch weights into the safetensors files `mmr` loads.

  teacher:  torchvision wide_resnet50_2 / resnet18 (ImageNet), names kept as-is
  encoder:  MAE ViT-B/16 checkpoint, names prefixed with `encoder.`

Usage:
  python scripts/convert_weights.py teacher --arch wide_resnet50_2 -o weights/wide_resnet50_2.safetensors
  python scripts/convert_weights.py encoder --checkpoint mae_pretrain_vit_base.pth -o weights/mae_vit_base.safetensors

Requires torch, torchvision and safetensors.
"""

import argparse
from pathlib import Path

import torch
from safetensors.torch import save_file

TEACHER_PREFIXES = ("conv1.", "bn1.", "layer1.", "layer2.", "layer3.")


def convert_teacher(arch: str) -> dict:
    import torchvision.models as tvm

    builders = {
        "wide_resnet50_2": (tvm.wide_resnet50_2, tvm.Wide_ResNet50_2_Weights.IMAGENET1K_V1),
        "resnet18": (tvm.resnet18, tvm.ResNet18_Weights.IMAGENET1K_V1),
    }
    build, weights = builders[arch]
    state = build(weights=weights).state_dict()
    return {
        k: v.float().contiguous()
        for k, v in state.items()
        if k.startswith(TEACHER_PREFIXES) and not k.endswith("num_batches_tracked")
    }


def convert_encoder(checkpoint: Path) -> dict:
    raw = torch.load(checkpoint, map_location="cpu")
    state = raw.get("model", raw)
    out = {}
    for k, v in state.items():
        if k.startswith("decoder") or k == "mask_token":
            continue
        v = v.float()
        if k == "patch_embed.proj.weight":
            # (d, 3, p, p) -> (d, p*p*3), pixel-major then channel
            d = v.shape[0]
            out["encoder.patch_embed.weight"] = v.permute(0, 2, 3, 1).reshape(d, -1)
        elif k == "patch_embed.proj.bias":
            out["encoder.patch_embed.bias"] = v
        elif k == "pos_embed":
            # (1, 1 + n, d): class position first
            out["encoder.cls_pos"] = v[0, :1]
            out["encoder.pos_embed"] = v[0, 1:]
        elif k == "cls_token":
            out["encoder.cls_token"] = v.reshape(1, -1)
        elif k.startswith(("blocks.", "norm.")):
            out["encoder." + k] = v
    return {k: t.contiguous() for k, t in out.items()}


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="kind", required=True)
    t = sub.add_parser("teacher")
    t.add_argument("--arch", choices=["wide_resnet50_2", "resnet18"], default="wide_resnet50_2")
    t.add_argument("-o", "--output", type=Path, required=True)
    e = sub.add_parser("encoder")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("-o", "--output", type=Path, required=True)
    args = parser.parse_args()

    tensors = convert_teacher(args.arch) if args.kind == "teacher" else convert_encoder(args.checkpoint)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(args.output))
    print(f"{len(tensors)} tensors -> {args.output}")


if __name__ == "__main__":
    main()
