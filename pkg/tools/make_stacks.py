"""Regenerate the INI stack descriptions shipped in src/anchornet/stacks/.

    python tools/make_stacks.py
"""

from pathlib import Path

from anchornet.stack import LayerSpec, StackConfig, format_stack

OUT = Path(__file__).resolve().parents[1] / "src" / "anchornet" / "stacks"


def sq(k):
    return (k, k)


# (kernel, expansion, out, SE, nonlinearity, stride)
ANCHOR_I_HEAD = [
    (3, 16, 16, False, "re", 2),
    (3, 72, 24, False, "re", 2),
    (1, 88, 24, False, "re", 1),
    (1, 96, 40, True, "hs", 1),
    (1, 240, 40, True, "hs", 1),
    (1, 240, 40, True, "hs", 1),
    (1, 120, 48, True, "hs", 1),
    (3, 144, 48, True, "hs", 1),
    (3, 288, 96, True, "hs", 1),
]
ANCHOR_I_BRANCHES = {
    "b63": [(3, 480, 96, "main"), (1, 576, 96, "main"), (1, 192, 96, "attention")],
    "b95": [(3, 480, 96, "main"), (5, 576, 96, "main"), (1, 192, 96, "attention")],
    "b111": [(5, 480, 96, "main"), (5, 576, 96, "main"), (1, 192, 96, "attention")],
}


def anchornet_i_head():
    layers = [LayerSpec("conv1", "conv", sq(3), sq(2), out_channels=16, tags=("hs",))]
    for i, (k, exp, out, se, nl, s) in enumerate(ANCHOR_I_HEAD, start=2):
        tags = (nl, "se") if se else (nl,)
        layers.append(LayerSpec(f"bneck{i}", "bneck", sq(k), sq(s), out_channels=out,
                                expansion=exp, tags=tags))
    return layers


def anchornet_i(branch=None):
    layers = anchornet_i_head()
    name = "anchornet-i-head"
    if branch:
        name = f"anchornet-i-{branch}"
        for i, (k, exp, out, role) in enumerate(ANCHOR_I_BRANCHES[branch], start=1):
            layers.append(LayerSpec(f"{branch}.bneck{i}", "bneck", sq(k), out_channels=out,
                                    expansion=exp, tags=("hs", "se", role)))
    return StackConfig(name, layers, input_channels=3,
                       metadata={"describes": "AnchorNet-I image localizer, geometry view"})


def anchornet_t(k):
    layers = [
        LayerSpec("head1", "conv", (1, 1), out_channels=32, tags=("re",)),
        LayerSpec("head2", "conv", (1, 1), out_channels=64, tags=("re",)),
        LayerSpec(f"b{k}.conv", "conv", (1, k), out_channels=128, tags=("re", "main")),
        LayerSpec(f"b{k}.att", "conv", (1, 1), out_channels=64, tags=("re", "attention")),
    ]
    return StackConfig(f"anchornet-t-b{k}", layers, input_channels=300, one_d=True,
                       metadata={"describes": "AnchorNet-T text localizer branch, geometry view"})


def resnet(name, blocks, widths, outs, groups=1):
    L = [
        LayerSpec("conv1", "conv", sq(7), sq(2), sq(3), out_channels=64),
        LayerSpec("relu1", "act"),
        LayerSpec("pool1", "maxpool", sq(3), sq(2), sq(1)),
    ]
    prev = "pool1"
    for stage, (n, width, out) in enumerate(zip(blocks, widths, outs), start=2):
        for b in range(n):
            s = 2 if (b == 0 and stage > 2) else 1
            p = f"s{stage}b{b + 1}"
            L += [
                LayerSpec(f"{p}.conv1", "conv", out_channels=width, inputs=(prev,)),
                LayerSpec(f"{p}.relu1", "act"),
                LayerSpec(f"{p}.conv2", "conv", sq(3), sq(s), sq(1), out_channels=width, groups=groups),
                LayerSpec(f"{p}.relu2", "act"),
                LayerSpec(f"{p}.conv3", "conv", out_channels=out),
            ]
            shortcut = prev
            if b == 0:
                L.append(LayerSpec(f"{p}.down", "conv", (1, 1), sq(s), out_channels=out, inputs=(prev,)))
                shortcut = f"{p}.down"
            L += [
                LayerSpec(f"{p}.add", "add", inputs=(f"{p}.conv3", shortcut)),
                LayerSpec(f"{p}.relu3", "act"),
            ]
            prev = f"{p}.relu3"
    L += [LayerSpec("gap", "gap"), LayerSpec("fc", "fc", out_channels=1000)]
    return StackConfig(name, L, input_channels=3,
                       metadata={"describes": f"{name} image classifier, cost view"})


def densenet169(growth=32, bn_size=4, blocks=(6, 12, 32, 32)):
    L = [
        LayerSpec("conv0", "conv", sq(7), sq(2), sq(3), out_channels=64),
        LayerSpec("relu0", "act"),
        LayerSpec("pool0", "maxpool", sq(3), sq(2), sq(1)),
    ]
    prev, chans = "pool0", 64
    for bi, n in enumerate(blocks, start=1):
        for li in range(1, n + 1):
            p = f"d{bi}l{li}"
            L += [
                LayerSpec(f"{p}.relu1", "act", inputs=(prev,)),
                LayerSpec(f"{p}.conv1", "conv", out_channels=bn_size * growth),
                LayerSpec(f"{p}.relu2", "act"),
                LayerSpec(f"{p}.conv2", "conv", sq(3), padding=sq(1), out_channels=growth),
                LayerSpec(f"{p}.cat", "concat", inputs=(prev, f"{p}.conv2")),
            ]
            prev, chans = f"{p}.cat", chans + growth
        if bi < len(blocks):
            chans //= 2
            L += [
                LayerSpec(f"t{bi}.relu", "act", inputs=(prev,)),
                LayerSpec(f"t{bi}.conv", "conv", out_channels=chans),
                LayerSpec(f"t{bi}.pool", "avgpool", sq(2), sq(2)),
            ]
            prev = f"t{bi}.pool"
    L += [LayerSpec("relu_final", "act", inputs=(prev,)), LayerSpec("gap", "gap"),
          LayerSpec("fc", "fc", out_channels=1000)]
    return StackConfig("densenet169", L, input_channels=3,
                       metadata={"describes": "densenet169 image classifier, cost view"})


def kim_cnn(embed=300, maps=100, windows=(3, 4, 5), classes=2):
    L = []
    for k in windows:
        # wide convolution: every filter fits a span shorter than its window
        L += [
            LayerSpec(f"conv{k}", "conv", (1, k), padding=(0, k - 1), out_channels=maps, inputs=("input",)),
            LayerSpec(f"relu{k}", "act"),
            LayerSpec(f"pool{k}", "gap"),
        ]
    L += [LayerSpec("cat", "concat", inputs=tuple(f"pool{k}" for k in windows)),
          LayerSpec("fc", "fc", out_channels=classes)]
    return StackConfig("kim-cnn", L, input_channels=embed, one_d=True,
                       metadata={"describes": "multi-window sentence CNN, cost view"})


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    stacks = [anchornet_i(), *(anchornet_i(b) for b in ANCHOR_I_BRANCHES),
              *(anchornet_t(k) for k in (3, 5, 7)),
              resnet("resnet50", (3, 4, 6, 3), (64, 128, 256, 512), (256, 512, 1024, 2048)),
              resnet("resnext50", (3, 4, 6, 3), (128, 256, 512, 1024), (256, 512, 1024, 2048),
                     groups=32),
              densenet169(), kim_cnn()]
    for stack in stacks:
        (OUT / f"{stack.name}.ini").write_text(format_stack(stack), encoding="utf-8")
        print(f"wrote {stack.name}.ini ({len(stack.layers)} layers)")


if __name__ == "__main__":
    main()
