"""Regenerates the parity fixtures from torchvision's MobileNetV2.

The network is randomly initialized (seeded) with randomized batch-norm running
statistics, exported to .mnv2 with a standalone writer, and run in eval mode on a
synthetic image preprocessed with numpy. Outputs land next to this script:

    parity_model.mnv2      backbone + 11-class classifier + bn_eps
    parity_image.png       the source image (97x80 RGB)
    parity_S{32,64,224}.mnv2   tensors input (1,3,S,S), features (1,1280), logits (1,11)

Usage: python3 make_parity_fixture.py
"""

import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision.models import mobilenet_v2

HERE = Path(__file__).resolve().parent
SIZES = (32, 64, 224)
MEAN = np.array([0.485, 0.456, 0.406])
STD = np.array([0.229, 0.224, 0.225])
BN_EPS = 1e-5


def write_mnv2(path, tensors):
    names = sorted(tensors)
    header = 12
    for n in names:
        header += 2 + len(n.encode()) + 1 + 4 * tensors[n].ndim + 8
    out = bytearray(b"MNV2" + struct.pack("<II", 1, len(names)))
    offset = header
    for n in names:
        t = tensors[n]
        out += struct.pack("<H", len(n.encode())) + n.encode() + struct.pack("<B", t.ndim)
        out += struct.pack(f"<{t.ndim}I", *t.shape)
        out += struct.pack("<Q", offset)
        offset += 4 * t.size
    for n in names:
        out += np.ascontiguousarray(tensors[n], dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def conv_bn(tensors, prefix, conv, bn):
    tensors[f"{prefix}.w"] = conv.weight.detach().numpy()
    tensors[f"{prefix}.bn_gamma"] = bn.weight.detach().numpy()
    tensors[f"{prefix}.bn_beta"] = bn.bias.detach().numpy()
    tensors[f"{prefix}.bn_mean"] = bn.running_mean.numpy()
    tensors[f"{prefix}.bn_var"] = bn.running_var.numpy()


def export(net):
    t = {}
    f = net.features
    conv_bn(t, "stem.conv", f[0][0], f[0][1])
    for i in range(17):
        layers = f[i + 1].conv
        if len(layers) == 3:
            conv_bn(t, f"block{i}.dw", layers[0][0], layers[0][1])
            conv_bn(t, f"block{i}.project", layers[1], layers[2])
        else:
            conv_bn(t, f"block{i}.expand", layers[0][0], layers[0][1])
            conv_bn(t, f"block{i}.dw", layers[1][0], layers[1][1])
            conv_bn(t, f"block{i}.project", layers[2], layers[3])
    conv_bn(t, "head.conv", f[18][0], f[18][1])
    t["classifier.w"] = net.classifier[1].weight.detach().numpy()
    t["classifier.b"] = net.classifier[1].bias.detach().numpy()
    t["bn_eps"] = np.array([BN_EPS], dtype=np.float32)
    return t


def synthetic_image(w=97, h=80):
    rng = np.random.default_rng(11)
    y, x = np.mgrid[0:h, 0:w]
    r = 40 + 180 * x / w
    g = 128 + 90 * np.sin(5 * y / h)
    b = 100 + 80 * np.cos(3 * (x + y) / (w + h) * 4)
    img = np.stack([r, g, b], -1) + rng.uniform(-25, 25, (h, w, 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def taps(out_len, in_len):
    scale = in_len / out_len
    src = np.maximum((np.arange(out_len) + 0.5) * scale - 0.5, 0.0)
    lo = np.minimum(np.floor(src).astype(int), in_len - 1)
    hi = np.minimum(lo + 1, in_len - 1)
    return lo, hi, src - lo


def resize(img, size):
    h, w, _ = img.shape
    if (h, w) == (size, size):
        return img.copy()
    xl, xh, xf = taps(size, w)
    yl, yh, yf = taps(size, h)
    p = img.astype(np.float64)
    xf = xf[None, :, None]
    yf = yf[:, None, None]
    top = p[yl][:, xl] + (p[yl][:, xh] - p[yl][:, xl]) * xf
    bottom = p[yh][:, xl] + (p[yh][:, xh] - p[yh][:, xl]) * xf
    v = top + (bottom - top) * yf
    return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)


def normalize(img):
    x = (img.astype(np.float64) / 255.0 - MEAN) / STD
    return x.transpose(2, 0, 1)[None].astype(np.float32)


def main():
    torch.manual_seed(20240611)
    net = mobilenet_v2(num_classes=11)
    g = torch.Generator().manual_seed(7)
    for m in net.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            c = m.num_features
            m.weight.data = 0.5 + torch.rand(c, generator=g)
            m.bias.data = 0.2 * torch.randn(c, generator=g)
            m.running_mean = 0.1 * torch.randn(c, generator=g)
            m.running_var = 0.5 + torch.rand(c, generator=g)
    net.eval()
    write_mnv2(HERE / "parity_model.mnv2", export(net))

    img = synthetic_image()
    Image.fromarray(img).save(HERE / "parity_image.png")
    for s in SIZES:
        x = normalize(resize(img, s))
        with torch.no_grad():
            t = torch.from_numpy(x)
            feats = torch.nn.functional.adaptive_avg_pool2d(net.features(t), 1).flatten(1)
            logits = net.classifier(feats)
        write_mnv2(
            HERE / f"parity_S{s}.mnv2",
            {"input": x, "features": feats.numpy(), "logits": logits.numpy()},
        )
        print(f"S={s}: |logits|max={logits.abs().max():.3f} |features|max={feats.abs().max():.3f}")


if __name__ == "__main__":
    main()
