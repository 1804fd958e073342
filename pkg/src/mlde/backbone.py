"""Per-branch classifier networks and the layer-wise fine-tuning schedule.

Two interchangeable backbones sit behind the same interface (224 x 224 x 3 in,
2 logits out; named parameter groups ordered input-to-output with ``head``
last):

* ``resnet50_pretrained`` — the standard ResNet-50 (7x7 stem conv producing 64
  maps, 3x3 max pool, four bottleneck block groups, average pooling), loaded
  from a local weight file and re-headed with a freshly initialized 2-output
  fully connected layer. The toolkit never downloads weights; the file is
  referenced by path plus optional sha256 in the config.
* ``tiny_test`` — three small convolution+downsample groups plus the same
  2-output head. It exists so that training, freezing, checkpointing and
  gradient checks run at desk scale; every downstream test uses it.

The fine-tuning schedule starts with only the head trainable and unfreezes
one group per stage from the output backward.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .errors import DataError, MldeError

HEAD_OUTPUTS = 2
GROUPS_RESNET50 = ("stem", "block1", "block2", "block3", "block4", "head")
GROUPS_TINY = ("stem", "block1", "block2", "head")

KIND_TINY = "tiny_test"
KIND_RESNET50 = "resnet50_pretrained"
BACKBONE_KINDS = (KIND_TINY, KIND_RESNET50)


@dataclass(frozen=True)
class BackboneSpec:
    kind: str
    feature_dim: int
    layer_groups: tuple[str, ...]
    head_outputs: int = HEAD_OUTPUTS
    weights_path: Optional[str] = None
    weights_sha256: Optional[str] = None

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise MldeError(f"unknown backbone kind {self.kind!r}")
        if self.head_outputs != HEAD_OUTPUTS:
            raise MldeError(f"head_outputs is fixed at {HEAD_OUTPUTS}")
        if not self.layer_groups or self.layer_groups[-1] != "head":
            raise MldeError("layer_groups must be ordered input-to-output ending in 'head'")

    @classmethod
    def tiny(cls) -> "BackboneSpec":
        return cls(kind=KIND_TINY, feature_dim=32, layer_groups=GROUPS_TINY)

    @classmethod
    def resnet50(cls, weights_path: str, weights_sha256: Optional[str] = None) -> "BackboneSpec":
        return cls(
            kind=KIND_RESNET50,
            feature_dim=2048,
            layer_groups=GROUPS_RESNET50,
            weights_path=weights_path,
            weights_sha256=weights_sha256,
        )

    @classmethod
    def for_kind(cls, kind: str, weights_path=None, weights_sha256=None) -> "BackboneSpec":
        if kind == KIND_TINY:
            return cls.tiny()
        if kind == KIND_RESNET50:
            if not weights_path:
                raise MldeError("resnet50_pretrained requires a local weights_path")
            return cls.resnet50(weights_path, weights_sha256)
        raise MldeError(f"unknown backbone kind {kind!r}")


def xavier_init(fan_in: int, fan_out: int, rng: np.random.Generator,
                distribution: str = "uniform") -> np.ndarray:
    """Draw a (fan_out, fan_in) weight matrix with Xavier scaling.

    uniform: i.i.d. on [-a, a] with a = sqrt(6 / (fan_in + fan_out)), giving
    variance 2 / (fan_in + fan_out); normal: same variance, Gaussian draws.
    """
    if fan_in < 1 or fan_out < 1:
        raise MldeError(f"fan_in/fan_out must be >= 1, got {fan_in}/{fan_out}")
    if distribution == "uniform":
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-a, a, size=(fan_out, fan_in))
    elif distribution == "normal":
        std = np.sqrt(2.0 / (fan_in + fan_out))
        w = rng.normal(0.0, std, size=(fan_out, fan_in))
    else:
        raise MldeError(f"unknown xavier distribution {distribution!r}")
    return w.astype(np.float32)


def _xavier_conv_(conv: nn.Conv2d, rng: np.random.Generator) -> None:
    out_ch, in_ch, kh, kw = conv.weight.shape
    fan_in, fan_out = in_ch * kh * kw, out_ch * kh * kw
    flat = xavier_init(fan_in, fan_out, rng)[:out_ch, :]
    with torch.no_grad():
        conv.weight.copy_(torch.from_numpy(flat.reshape(out_ch, in_ch, kh, kw)))
        if conv.bias is not None:
            conv.bias.zero_()


class TinyBranch(nn.Module):
    """Small deterministic stand-in with the same named-group protocol."""

    kind = KIND_TINY
    feature_dim = 32
    group_names = GROUPS_TINY

    def __init__(self, rng: Optional[np.random.Generator] = None,
                 distribution: str = "uniform"):
        super().__init__()
        self.stem = nn.Conv2d(3, 8, kernel_size=8, stride=8)
        self.block1 = nn.Conv2d(8, 16, kernel_size=3, stride=2, padding=1)
        self.block2 = nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1)
        self.head = nn.Linear(self.feature_dim, HEAD_OUTPUTS)
        if rng is None:
            rng = np.random.default_rng(0)
        for conv in (self.stem, self.block1, self.block2):
            _xavier_conv_(conv, rng)
        _init_head(self.head, rng, distribution)

    def group_modules(self) -> dict[str, nn.Module]:
        return {"stem": self.stem, "block1": self.block1,
                "block2": self.block2, "head": self.head}

    def set_head(self, head: nn.Linear) -> None:
        self.head = head

    def features(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.relu(self.stem(x))
        x = torch.relu(self.block1(x))
        x = torch.relu(self.block2(x))
        return x.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class ResNet50Branch(nn.Module):
    """ResNet-50 wrapped with the named-group protocol (stem, block1..4, head)."""

    kind = KIND_RESNET50
    feature_dim = 2048
    group_names = GROUPS_RESNET50

    def __init__(self, model: nn.Module):
        super().__init__()
        self.model = model

    def group_modules(self) -> dict[str, nn.Module]:
        m = self.model
        return {
            "stem": nn.ModuleList([m.conv1, m.bn1]),
            "block1": m.layer1,
            "block2": m.layer2,
            "block3": m.layer3,
            "block4": m.layer4,
            "head": m.fc,
        }

    def set_head(self, head: nn.Linear) -> None:
        self.model.fc = head

    @property
    def head(self) -> nn.Linear:
        return self.model.fc

    def features(self, x: torch.Tensor) -> torch.Tensor:
        m = self.model
        x = m.maxpool(m.relu(m.bn1(m.conv1(x))))
        x = m.layer4(m.layer3(m.layer2(m.layer1(x))))
        return torch.flatten(m.avgpool(x), 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)


def _init_head(head: nn.Linear, rng: np.random.Generator, distribution="uniform") -> None:
    w = xavier_init(head.in_features, head.out_features, rng, distribution)
    with torch.no_grad():
        head.weight.copy_(torch.from_numpy(w))
        head.bias.zero_()


def replace_head(net: nn.Module, rng_seed: int, distribution: str = "uniform") -> nn.Module:
    """Swap in a fresh Xavier-initialized 2-output head; body is untouched.

    Re-replacement is permitted and simply re-randomizes the head.
    """
    rng = np.random.default_rng(rng_seed)
    head = nn.Linear(net.feature_dim, HEAD_OUTPUTS)
    _init_head(head, rng, distribution)
    head.to(dtype=next(net.parameters()).dtype)
    net.set_head(head)
    return net


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _load_resnet50_pretrained(spec: BackboneSpec) -> nn.Module:
    from torchvision.models import resnet50  # deferred: torchvision import is slow

    path = Path(spec.weights_path)
    if not path.is_file():
        raise DataError(f"pretrained weight file not found: {path}")
    if spec.weights_sha256:
        actual = sha256_file(path)
        if actual != spec.weights_sha256.lower():
            raise DataError(
                f"weight file checksum mismatch for {path}: "
                f"expected {spec.weights_sha256}, got {actual}"
            )
    model = resnet50(weights=None)
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise DataError(f"cannot read pretrained weights {path}: {exc}") from exc
    expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
    got = {k: tuple(v.shape) for k, v in state.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))[:3]
        extra = sorted(set(got) - set(expected))[:3]
        wrong = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])[:3]
        raise DataError(
            f"weight file {path} does not match the ResNet-50 shape manifest "
            f"(missing={missing}, unexpected={extra}, wrong_shape={wrong})"
        )
    model.load_state_dict(state)
    return model


def build_backbone(spec: BackboneSpec, rng_seed: int,
                   distribution: str = "uniform") -> nn.Module:
    """Construct one branch network per the spec, seeded and re-headed.

    tiny_test bodies are drawn from the seed; resnet50_pretrained bodies carry
    the values from the (checksum-verified) local weight file. In both cases
    the head is freshly Xavier-initialized with zero bias.
    """
    if spec.kind == KIND_TINY:
        return TinyBranch(np.random.default_rng(rng_seed), distribution)
    net = ResNet50Branch(_load_resnet50_pretrained(spec))
    return replace_head(net, rng_seed, distribution)


def build_architecture(spec: BackboneSpec) -> nn.Module:
    """Bare network structure with arbitrary parameter values.

    Used when every parameter is about to be overwritten (checkpoint load),
    so no weight file is required for resnet50_pretrained.
    """
    if spec.kind == KIND_TINY:
        return TinyBranch(np.random.default_rng(0))
    from torchvision.models import resnet50

    net = ResNet50Branch(resnet50(weights=None))
    net.set_head(nn.Linear(net.feature_dim, HEAD_OUTPUTS))
    return net


@dataclass(frozen=True)
class FineTuneStage:
    stage_index: int
    trainable_groups: frozenset[str] = field(default_factory=frozenset)


def freeze_schedule(total_stages: int,
                    group_names: tuple[str, ...] = GROUPS_RESNET50) -> tuple[FineTuneStage, ...]:
    """Stage 0 trains only the head; each later stage unfreezes the next-deepest
    group. Stages beyond full coverage clamp to everything trainable.
    """
    if total_stages < 1:
        raise MldeError(f"total_stages must be >= 1, got {total_stages}")
    if not group_names or group_names[-1] != "head":
        raise MldeError("group_names must end with 'head'")
    unfreeze_order = tuple(reversed(group_names[:-1]))
    stages = []
    for k in range(total_stages):
        opened = unfreeze_order[:min(k, len(unfreeze_order))]
        stages.append(FineTuneStage(k, frozenset(("head",) + opened)))
    return tuple(stages)


def apply_stage(net: nn.Module, stage: FineTuneStage) -> None:
    """Set requires_grad per group; frozen groups also go to eval mode so
    normalization layers stop updating running statistics."""
    for name, module in net.group_modules().items():
        trainable = name in stage.trainable_groups
        for p in module.parameters():
            p.requires_grad_(trainable)
        module.train(trainable)


def trainable_parameters(net: nn.Module, stage: FineTuneStage):
    for name, module in net.group_modules().items():
        if name in stage.trainable_groups:
            yield from module.parameters()


def describe_structure(net: nn.Module, input_size: int = 224) -> list[dict]:
    """Probe forward recording (channels, spatial size) after each block group."""
    rows = []
    hooks = []
    groups = net.group_modules()

    def make_hook(name):
        def hook(_module, _inp, out):
            if isinstance(out, torch.Tensor) and out.ndim == 4:
                rows.append({"group": name, "channels": out.shape[1],
                             "spatial": out.shape[2]})
        return hook

    for name in net.group_names:
        if name.startswith("block"):
            hooks.append(groups[name].register_forward_hook(make_hook(name)))
    try:
        with torch.no_grad():
            net(torch.zeros(1, 3, input_size, input_size,
                            dtype=next(net.parameters()).dtype))
    finally:
        for h in hooks:
            h.remove()
    return rows
