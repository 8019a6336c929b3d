"""Frozen VGG19 feature extractor for content features and Gram-style statistics.

Weights are loaded from a local file whose SHA-256 is checked against a
recorded value; the extractor is never trained. Callers always pass images in
[0, 1] RGB; the ImageNet channel normalization is applied internally.
"""

import hashlib
from dataclasses import dataclass

import torch
import torch.nn as nn
from torchvision.models import vgg19

CONTENT_LAYER = "conv2_2"
STYLE_LAYERS = ("conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1")

# Index of each conv layer inside torchvision's vgg19().features; activations
# are taken after the ReLU that follows the conv.
_VGG19_CONV_INDEX = {
    "conv1_1": 0, "conv1_2": 2,
    "conv2_1": 5, "conv2_2": 7,
    "conv3_1": 10, "conv3_2": 12, "conv3_3": 14, "conv3_4": 16,
    "conv4_1": 19, "conv4_2": 21, "conv4_3": 23, "conv4_4": 25,
    "conv5_1": 28, "conv5_2": 30, "conv5_3": 32, "conv5_4": 34,
}
_MAX_FEATURE_INDEX = _VGG19_CONV_INDEX["conv5_1"] + 2  # keep through conv5_1's ReLU
_AVAILABLE_LAYERS = tuple(
    name for name, idx in _VGG19_CONV_INDEX.items() if idx + 1 < _MAX_FEATURE_INDEX
)

# torchvision's ImageNet-trained VGG19 checkpoint; file names carry the leading
# hex of the SHA-256 digest.
IMAGENET_VGG19_SHA256_PREFIX = "dcbb9e9d"

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class BackboneWeightsError(RuntimeError):
    pass


@dataclass
class FeatureStack:
    """Per-layer activations, each flattened to (batch, n_maps, spatial_size)."""

    layers: dict

    def single(self, layer_name):
        """Activation of `layer_name` for a batch of one, shape (n_maps, spatial_size)."""
        feats = self.layers[layer_name]
        if feats.shape[0] != 1:
            raise ValueError(f"expected batch of 1, got {feats.shape[0]}")
        return feats[0]


@dataclass
class Gram:
    """Second-order feature statistics F @ F.T for one layer (no normalization)."""

    values: torch.Tensor
    layer_name: str
    n_maps: int
    spatial_size: int


def gram(features, layer_name="unnamed"):
    """Gram matrix of one layer's activations, shape (N, M) -> (N, N).

    This is the plain inner-product matrix; the 1/(N*M) normalization belongs
    to the style loss, not here.
    """
    if features.dim() != 2:
        raise ValueError(f"expected (n_maps, spatial_size) activation, got {tuple(features.shape)}")
    if not torch.isfinite(features).all():
        raise ValueError("non-finite activations")
    n, m = features.shape
    return Gram(values=features @ features.T, layer_name=layer_name, n_maps=n, spatial_size=m)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_random_weights(path, seed=0):
    """Write a seeded, randomly initialized VGG19 state dict to `path`.

    A stand-in for environments without the ImageNet checkpoint: the layer
    shapes (and thus every shape contract) are identical, only the learned
    filters differ. Written in the deterministic checkpoint format, so the same
    seed always produces the same bytes. Returns the file's SHA-256.
    """
    from . import checkpoint as ckpt

    torch.manual_seed(seed)
    net = vgg19(weights=None)
    ckpt.save_tensors(path, net.state_dict(), meta={"kind": "vgg19_weights", "seed": seed})
    return file_sha256(path)


def _load_state_dict(path):
    """Load a VGG19 state dict from a torch .pth file or a stainforge checkpoint."""
    from . import checkpoint as ckpt

    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == ckpt.MAGIC:
        tensors, _ = ckpt.load_tensors(path)
        return tensors
    return torch.load(path, map_location="cpu", weights_only=True)


class PerceptualBackbone(nn.Module):
    """VGG19 up to conv5_1, frozen, with named post-ReLU taps.

    Gradients flow through to the input image but never into the weights.
    """

    content_layer = CONTENT_LAYER
    style_layers = STYLE_LAYERS

    def __init__(self, weights_path, expected_sha256=None, dtype=torch.float32):
        super().__init__()
        try:
            state = _load_state_dict(weights_path)
        except FileNotFoundError as e:
            raise BackboneWeightsError(
                f"backbone weight file not found: {weights_path} "
                f"(expected SHA-256 {expected_sha256 or IMAGENET_VGG19_SHA256_PREFIX + '...'})"
            ) from e
        if expected_sha256 is not None:
            digest = file_sha256(weights_path)
            if not digest.startswith(expected_sha256.lower()):
                raise BackboneWeightsError(
                    f"weight file {weights_path} hash mismatch: "
                    f"got {digest}, expected {expected_sha256}"
                )
        net = vgg19(weights=None)
        net.load_state_dict(state)
        self.features = net.features[:_MAX_FEATURE_INDEX].to(dtype)
        self.features.eval()
        for p in self.features.parameters():
            p.requires_grad_(False)
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN, dtype=dtype).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD, dtype=dtype).view(1, 3, 1, 1))
        self._dtype = dtype

    def extract_features(self, x, layer_names):
        """Run a (B, 3, H, W) image batch in [0, 1] and tap the named layers.

        Returns a FeatureStack of flattened (B, N_l, M_l) activations.
        """
        for name in layer_names:
            if name not in _AVAILABLE_LAYERS:
                raise KeyError(
                    f"unknown layer {name!r}; valid layers: {sorted(_AVAILABLE_LAYERS)}"
                )
        wanted = {_VGG19_CONV_INDEX[name] + 1: name for name in layer_names}
        x = x.to(self._dtype)
        h = (x - self.mean) / self.std
        out = {}
        last = max(wanted)
        for idx, layer in enumerate(self.features):
            h = layer(h)
            if idx in wanted:
                b, c = h.shape[0], h.shape[1]
                out[wanted[idx]] = h.reshape(b, c, -1)
            if idx == last:
                break
        # preserve the caller's layer order
        return FeatureStack(layers={name: out[name] for name in layer_names})


def module_checksum(module):
    """SHA-256 over all parameters and buffers; used to assert freeze discipline."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
