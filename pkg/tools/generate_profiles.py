"""Regenerate the shipped layer tables under src/gsync/data/.

Shapes follow the publicly documented ImageNet (224x224 input) definitions.
Branches are serialized; batch-norm and ReLU layers are omitted, pooling is
kept as NonParam so compute timelines include it.

    python tools/generate_profiles.py
"""

from gsync.profiles import DATA_DIR, LayerKind, chain, save_profile

CONV, FC, POOL = LayerKind.CONV, LayerKind.FC, LayerKind.NONPARAM


def conv(name, c, k, hw, kernel, stride=1, bias=False):
    return dict(name=name, kind=CONV, in_channels=c, out_channels=k, out_h=hw, out_w=hw,
                kernel_h=kernel, kernel_w=kernel, stride=stride, has_bias=bias)


def fc(name, c, k, bias=True):
    return dict(name=name, kind=FC, in_channels=c, out_channels=k, has_bias=bias)


def pool(name, k, hw, kernel, stride):
    return dict(name=name, kind=POOL, in_channels=k, out_channels=k, out_h=hw, out_w=hw,
                kernel_h=kernel, kernel_w=kernel, stride=stride)


def resnet50():
    layers = [conv("conv1", 3, 64, 112, 7, 2), pool("maxpool", 64, 56, 3, 2)]
    c_in = 64
    stages = [(64, 3, 56, 1), (128, 4, 28, 2), (256, 6, 14, 2), (512, 3, 7, 2)]
    for s, (width, blocks, hw, first_stride) in enumerate(stages, start=1):
        for b in range(blocks):
            stride = first_stride if b == 0 else 1
            p = f"layer{s}.{b}"
            layers.append(conv(p + ".conv1", c_in, width, hw, 1))
            layers.append(conv(p + ".conv2", width, width, hw, 3, stride))
            layers.append(conv(p + ".conv3", width, 4 * width, hw, 1))
            if b == 0:
                layers.append(conv(p + ".downsample", c_in, 4 * width, hw, 1, stride))
            c_in = 4 * width
    layers.append(pool("avgpool", 2048, 1, 7, 1))
    layers.append(fc("fc", 2048, 1000))
    return chain("resnet50", layers, 32)


def vgg16():
    cfg = [(64, 2, 224), (128, 2, 112), (256, 3, 56), (512, 3, 28), (512, 3, 14)]
    layers, c_in = [], 3
    for s, (k, n, hw) in enumerate(cfg, start=1):
        for i in range(n):
            layers.append(conv(f"conv{s}_{i + 1}", c_in, k, hw, 3, bias=True))
            c_in = k
        layers.append(pool(f"pool{s}", k, hw // 2, 2, 2))
    layers += [fc("fc6", 512 * 7 * 7, 4096), fc("fc7", 4096, 4096), fc("fc8", 4096, 1000)]
    return chain("vgg16", layers, 32)


# (name, in, 1x1, 3x3 reduce, 3x3, 5x5 reduce, 5x5, pool proj, spatial)
INCEPTION = [
    ("3a", 192, 64, 96, 128, 16, 32, 32, 28),
    ("3b", 256, 128, 128, 192, 32, 96, 64, 28),
    ("4a", 480, 192, 96, 208, 16, 48, 64, 14),
    ("4b", 512, 160, 112, 224, 24, 64, 64, 14),
    ("4c", 512, 128, 128, 256, 24, 64, 64, 14),
    ("4d", 512, 112, 144, 288, 32, 64, 64, 14),
    ("4e", 528, 256, 160, 320, 32, 128, 128, 14),
    ("5a", 832, 256, 160, 320, 32, 128, 128, 7),
    ("5b", 832, 384, 192, 384, 48, 128, 128, 7),
]


def googlenet():
    layers = [
        conv("conv1", 3, 64, 112, 7, 2, bias=True),
        pool("pool1", 64, 56, 3, 2),
        conv("conv2_reduce", 64, 64, 56, 1, bias=True),
        conv("conv2", 64, 192, 56, 3, bias=True),
        pool("pool2", 192, 28, 3, 2),
    ]
    for name, c, n1, r3, n3, r5, n5, pp, hw in INCEPTION:
        p = f"inception{name}"
        if name == "4a":
            layers.append(pool("pool3", 480, 14, 3, 2))
        if name == "5a":
            layers.append(pool("pool4", 832, 7, 3, 2))
        layers += [
            conv(p + ".1x1", c, n1, hw, 1, bias=True),
            conv(p + ".3x3_reduce", c, r3, hw, 1, bias=True),
            conv(p + ".3x3", r3, n3, hw, 3, bias=True),
            conv(p + ".5x5_reduce", c, r5, hw, 1, bias=True),
            conv(p + ".5x5", r5, n5, hw, 5, bias=True),
            pool(p + ".pool", c, hw, 3, 1),
            conv(p + ".pool_proj", c, pp, hw, 1, bias=True),
        ]
    layers.append(pool("avgpool", 1024, 1, 7, 1))
    layers.append(fc("fc", 1024, 1000))
    return chain("googlenet", layers, 32)


def mlp():
    layers = [fc("fc1", 4096, 4096), fc("fc2", 4096, 4096), fc("fc3", 4096, 4096), fc("fc4", 4096, 1024)]
    return chain("mlp", layers, 8)


def main():
    DATA_DIR.mkdir(parents=True, exist_ok=True)
    for build in (resnet50, vgg16, googlenet, mlp):
        profile = build()
        save_profile(profile, DATA_DIR / f"{profile.name}.json")
        print(f"{profile.name}: {len(profile)} layers, "
              f"{sum(layer.param_count for layer in profile)} params")


if __name__ == "__main__":
    main()
