"""Few-shot stylized-face segmentation.

A fixed (mock) feature provider fuses the image with multi-scale pyramid
context and a frozen random convolution; a zero-initialized decoder maps the
fused features to six part classes. Trained on a small self-annotated corpus (25 pairs at desk
scale), it supplies the soft masks for the alignment loss and the pixel
masks that gate the image-space losses.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn
from PIL import Image

from .errors import DataError, FeatureError, ParameterError
from .mesh import DEFAULT_DTYPE

MASK_CLASSES = ("eyes", "nose", "ears", "mouth", "face", "outer")

# fixed palette for indexed-PNG annotations (class id = palette index)
PALETTE = (
    (220, 80, 80),   # eyes
    (80, 200, 80),   # nose
    (220, 200, 80),  # ears
    (80, 120, 220),  # mouth
    (230, 190, 160), # face
    (40, 40, 40),    # outer
)


class MockFeatureProvider:
    """Deterministic fused features: the image itself, three blurred pyramid
    scales, and a fixed random convolution. Stride 1, translation invariant:
    a constant image yields spatially constant features."""

    PYRAMID_SCALES = (2, 4, 8, 16)

    def __init__(self, conv_channels: int = 8, seed: int = 400, dtype=DEFAULT_DTYPE):
        g = torch.Generator().manual_seed(seed)
        self.weight = torch.randn(conv_channels, 3, 5, 5, generator=g, dtype=dtype) * 0.2
        self.stride = 1

    @property
    def channels(self) -> int:
        return 3 * (1 + len(self.PYRAMID_SCALES)) + self.weight.shape[0]

    def features(self, image: Tensor, sample_id=None) -> Tensor:
        if image.dim() != 3 or image.shape[-1] != 3:
            raise FeatureError(sample_id, f"expected (H, W, 3) image, got {tuple(image.shape)}")
        h, w = image.shape[:2]
        x = image.permute(2, 0, 1).unsqueeze(0)
        pyramid = [x]
        for k in self.PYRAMID_SCALES:
            down = torch.nn.functional.avg_pool2d(x, k, ceil_mode=True)
            pyramid.append(torch.nn.functional.interpolate(down, size=(h, w), mode="nearest"))
        # replicate padding keeps constant inputs constant at the borders
        padded = torch.nn.functional.pad(x, (2, 2, 2, 2), mode="replicate")
        conv = torch.tanh(torch.nn.functional.conv2d(padded, self.weight))
        return torch.cat(pyramid + [conv], dim=1)[0]


def extract_fused_features(image: Tensor, provider: MockFeatureProvider | None = None,
                           sample_id=None) -> Tensor:
    """(C, H', W') feature map, deterministic per image."""
    provider = provider or MockFeatureProvider()
    return provider.features(image, sample_id=sample_id)


class MaskNet(nn.Module):
    """Per-pixel six-class decoder over fused features.

    The logit head is a zero-initialized residual branch, so a fresh network
    predicts exactly the uniform class distribution everywhere.
    """

    def __init__(self, provider: MockFeatureProvider | None = None, hidden: int = 48,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.provider = provider or MockFeatureProvider()
        c = self.provider.channels
        self.body = nn.Sequential(
            nn.Conv2d(c, hidden, 1, dtype=dtype),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1, padding_mode="replicate", dtype=dtype),
            nn.SiLU(),
            # dilated layer widens context enough to tell the small parts apart
            nn.Conv2d(hidden, hidden, 3, padding=2, dilation=2, padding_mode="replicate",
                      dtype=dtype),
            nn.SiLU(),
        )
        self.head = nn.Conv2d(hidden, len(MASK_CLASSES), 1, dtype=dtype)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def logits_from_features(self, feats: Tensor) -> Tensor:
        return self.head(self.body(feats.unsqueeze(0)))[0]  # (6, H, W)

    def logits(self, image: Tensor) -> Tensor:
        return self.logits_from_features(self.provider.features(image))


def masknet_loss(net: MaskNet, image: Tensor, labels: Tensor) -> Tensor:
    """Mean cross-entropy over labeled pixels."""
    logits = net.logits(image)
    return torch.nn.functional.cross_entropy(
        logits.unsqueeze(0), labels.unsqueeze(0).to(torch.long)
    )


def train_mask_net(pairs: list[tuple[Tensor, Tensor]], steps: int = 450, lr: float = 1e-2,
                   seed: int = 0, provider: MockFeatureProvider | None = None,
                   net: MaskNet | None = None,
                   class_weight_power: float = 0.3) -> tuple[MaskNet, list[float]]:
    """Fit the decoder to (image, label map) pairs; deterministic given seed.

    Labels must lie in [0, 6); anything else is a data error naming the pair.
    Cross-entropy is class-weighted by count^(-class_weight_power) so the
    few-pixel parts (eyes, ears, mouth) are not drowned out by face and
    background. At initialization every per-pixel loss is ln(6), so the
    weighted mean is still exactly ln(6). Returns the trained network and the
    per-step loss history (full-batch).
    """
    if not pairs:
        raise ParameterError("no training pairs")
    for i, (img, lab) in enumerate(pairs):
        if lab.shape != img.shape[:2]:
            raise DataError(f"pair {i}: label map shape {tuple(lab.shape)} does not match image")
        if int(lab.min()) < 0 or int(lab.max()) >= len(MASK_CLASSES):
            raise DataError(f"pair {i}: labels outside the {len(MASK_CLASSES)}-class set")
    torch.manual_seed(seed)
    if net is None:
        net = MaskNet(provider=provider)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    feats = torch.stack([net.provider.features(img) for img, _ in pairs])
    labels = torch.stack([lab.to(torch.long) for _, lab in pairs])
    counts = torch.bincount(labels.flatten(), minlength=len(MASK_CLASSES)).double().clamp_min(1)
    weight = counts.pow(-class_weight_power)
    weight = weight / weight.sum() * len(MASK_CLASSES)
    history = []
    for _ in range(steps):
        logits = net.head(net.body(feats))
        loss = torch.nn.functional.cross_entropy(logits, labels, weight=weight)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    return net, history


def segment(net: MaskNet, image: Tensor, expected_size: tuple[int, int] | None = None):
    """Argmax labels (ties break to the lowest class index) and per-pixel
    soft masks that sum to one."""
    if image.dim() != 3 or image.shape[-1] != 3:
        raise ParameterError(f"expected (H, W, 3) image, got {tuple(image.shape)}")
    if expected_size is not None and tuple(image.shape[:2]) != tuple(expected_size):
        raise ParameterError(
            f"image size {tuple(image.shape[:2])} does not match expected {tuple(expected_size)}"
        )
    with torch.no_grad():
        logits = net.logits(image)
        soft = torch.softmax(logits, dim=0)
    # numpy argmax documents first-maximum tie-breaking
    labels = torch.from_numpy(np.argmax(soft.numpy(), axis=0))
    masks = {c: soft[i] for i, c in enumerate(MASK_CLASSES)}
    return labels, masks


def pixel_accuracy(net: MaskNet, pairs: list[tuple[Tensor, Tensor]]) -> float:
    correct = total = 0
    for img, lab in pairs:
        labels, _ = segment(net, img)
        correct += int((labels == lab).sum())
        total += lab.numel()
    return correct / total


def seg_class_masks(soft_masks: dict[str, Tensor]) -> dict[str, Tensor]:
    """Regroup the six predicted classes into the four alignment-loss classes
    (eyes, nose, ears, background); mouth and face are not aligned and the
    outer class plays the background role."""
    return {
        "eyes": soft_masks["eyes"],
        "nose": soft_masks["nose"],
        "ears": soft_masks["ears"],
        "background": soft_masks["outer"],
    }


def loss_pixel_mask(labels: Tensor) -> Tensor:
    """Pixels where image-space losses apply: face, nose and ears. Eyes, the
    mouth interior and the outer region are excluded."""
    keep = (MASK_CLASSES.index("nose"), MASK_CLASSES.index("ears"), MASK_CLASSES.index("face"))
    mask = torch.zeros(labels.shape, dtype=torch.bool)
    for k in keep:
        mask |= labels == k
    return mask


def labels_from_part_masks(masks: dict[str, Tensor]) -> Tensor:
    """Rendered hard part masks -> six-class label map (background -> outer)."""
    name_of = {"background": "outer"}
    first = next(iter(masks.values()))
    labels = torch.full(first.shape, MASK_CLASSES.index("outer"), dtype=torch.long)
    for part, mask in masks.items():
        cls = name_of.get(part, part)
        labels[mask] = MASK_CLASSES.index(cls)
    return labels


def build_self_annotated_corpus(template, basis, style_spec, n: int = 25, size: int = 32,
                                seed: int = 77) -> list[tuple[Tensor, Tensor]]:
    """Desk training corpus: mock-stylized renders labeled by projecting the
    template's UV part regions through the same camera (self-annotating)."""
    from .camera import make_frontal_camera
    from .mesh import MorphParams, morph
    from .render import render_part_masks
    from .stylize import mock_stylize
    from .trainer import procedural_face_texture

    g = torch.Generator().manual_seed(seed)
    cam = make_frontal_camera(size)
    pairs = []
    for _ in range(n):
        beta = torch.randn(basis.k_shape, generator=g)
        psi = torch.randn(basis.k_expr, generator=g)
        z = torch.randn(64, generator=g)
        mesh = morph(basis, MorphParams(beta=beta, psi=psi))
        tex = procedural_face_texture(z, 64)
        styled = mock_stylize(mesh, tex, cam, style_spec,
                              template_vertices=template.mesh.vertices)
        # label the geometry actually shown: the style-displaced mesh
        styled_mesh = mesh.with_vertices(
            style_spec.deform_vertices(mesh, template.mesh.vertices)
        )
        labels = labels_from_part_masks(render_part_masks(styled_mesh, cam))
        pairs.append((styled, labels))
    return pairs


# ---------------------------------------------------------------------------
# Annotation I/O: indexed PNG + JSON palette
# ---------------------------------------------------------------------------


def save_annotation(labels: Tensor, png_path: str | Path, palette_path: str | Path | None = None):
    arr = labels.numpy().astype(np.uint8)
    img = Image.fromarray(arr, mode="P")
    flat = []
    for rgb in PALETTE:
        flat.extend(rgb)
    img.putpalette(flat)
    img.save(png_path)
    if palette_path is not None:
        with open(palette_path, "w") as fh:
            json.dump({str(i): {"class": c, "rgb": list(PALETTE[i])}
                       for i, c in enumerate(MASK_CLASSES)}, fh, indent=2)


def load_annotation(png_path: str | Path) -> Tensor:
    img = Image.open(png_path)
    if img.mode != "P":
        raise DataError(f"{png_path}: annotation must be an indexed PNG")
    arr = np.asarray(img)
    if arr.max() >= len(MASK_CLASSES):
        raise DataError(f"{png_path}: label index outside the class set")
    return torch.from_numpy(arr.astype(np.int64))
