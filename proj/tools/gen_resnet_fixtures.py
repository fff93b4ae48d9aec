#!/usr/bin/env python3
# Copyright 2026 The mtlc Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Writes ResNet-34 style prototxt fixtures (full and quarter width)."""

import argparse
import pathlib


def layer(name, kind, bottoms, top, body=""):
    lines = [f'layer {{', f'  name: "{name}"', f'  type: "{kind}"']
    lines += [f'  bottom: "{b}"' for b in bottoms]
    lines.append(f'  top: "{top}"')
    if body:
        lines.append(body)
    lines.append("}")
    return "\n".join(lines)


def conv(name, bottom, out, k, s, p):
    body = (f"  convolution_param {{ num_output: {out} kernel_size: {k} stride: {s} "
            f"pad: {p} bias_term: false }}")
    return layer(name, "Convolution", [bottom], name, body)


def bn(name, bottom):
    # In-place, as Caffe files usually write it.
    return layer(name, "BatchNorm", [bottom], bottom)


def relu(name, bottom):
    return layer(name, "ReLU", [bottom], bottom)


def resnet34(widths, classes=1000, size=224):
    out = [f'name: "resnet34_w{widths[0]}"',
           layer("data", "Input", [], "data",
                 f"  input_param {{ shape {{ dim: 1 dim: 3 dim: {size} dim: {size} }} }}")]
    out += [conv("conv1", "data", widths[0], 7, 2, 3), bn("bn1", "conv1"), relu("relu1", "conv1")]
    out.append(layer("pool1", "Pooling", ["conv1"], "pool1",
                     "  pooling_param { pool: MAX kernel_size: 3 stride: 2 pad: 1 }"))
    x = "pool1"
    for stage, (blocks, width) in enumerate(zip([3, 4, 6, 3], widths), start=1):
        for b in range(blocks):
            tag = f"res{stage}_{b}"
            stride = 2 if stage > 1 and b == 0 else 1
            out += [conv(f"{tag}_conv1", x, width, 3, stride, 1), bn(f"{tag}_bn1", f"{tag}_conv1"),
                    relu(f"{tag}_relu1", f"{tag}_conv1"),
                    conv(f"{tag}_conv2", f"{tag}_conv1", width, 3, 1, 1),
                    bn(f"{tag}_bn2", f"{tag}_conv2")]
            shortcut = x
            if stride != 1:
                out += [conv(f"{tag}_down", x, width, 1, 2, 0), bn(f"{tag}_down_bn", f"{tag}_down")]
                shortcut = f"{tag}_down"
            out.append(layer(f"{tag}_sum", "Eltwise", [f"{tag}_conv2", shortcut], f"{tag}_sum",
                             "  eltwise_param { operation: SUM }"))
            out.append(relu(f"{tag}_relu2", f"{tag}_sum"))
            x = f"{tag}_sum"
    out.append(layer("pool5", "Pooling", [x], "pool5",
                     "  pooling_param { pool: AVE global_pooling: true }"))
    out.append(layer("fc", "InnerProduct", ["pool5"], "fc",
                     f"  inner_product_param {{ num_output: {classes} }}"))
    return "\n".join(out) + "\n"


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="fixtures")
    args = parser.parse_args()
    root = pathlib.Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    (root / "resnet34.prototxt").write_text(resnet34([64, 128, 256, 512]))
    (root / "resnet34_quarter.prototxt").write_text(resnet34([16, 32, 64, 128]))


if __name__ == "__main__":
    main()
