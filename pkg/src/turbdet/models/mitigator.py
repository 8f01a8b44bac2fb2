"""Registration followed by enhancement, with a stable layer ordering for partial freezing."""
import hashlib
from dataclasses import dataclass
from typing import List

import torch
import torch.nn as nn

from .enhancement import EnhancementConfig, EnhancementNet
from .registration import RegistrationConfig, RegistrationNet


@dataclass
class MitigatorOutput:
    mitigated: torch.Tensor  # (N, 3, H, W)
    fields: List[torch.Tensor]
    registered: torch.Tensor
    pyramid: List[torch.Tensor]
    reg_features: torch.Tensor  # (N, w0, H, W), forwarded to the detector


class Mitigator(nn.Module):
    def __init__(self, reg_config=RegistrationConfig(), enh_config=None):
        super().__init__()
        if enh_config is None:
            enh_config = EnhancementConfig(reg_channels=reg_config.channels[0], window=reg_config.window)
        if enh_config.reg_channels != reg_config.channels[0] or enh_config.window != reg_config.window:
            raise ValueError("enhancement config must match registration level-0 width and window")
        self.registration = RegistrationNet(reg_config)
        self.enhancement = EnhancementNet(enh_config)

    @classmethod
    def toy(cls, window=10):
        reg = RegistrationConfig.toy(window)
        return cls(reg, EnhancementConfig.toy(reg.channels[0], window))

    @property
    def window(self):
        return self.registration.config.window

    def fingerprint(self):
        key = self.registration.config.fingerprint() + self.enhancement.config.fingerprint()
        return hashlib.sha1(key.encode()).hexdigest()[:12]

    def layer_order(self):
        """Names of modules owning parameters directly, in definition order."""
        return [name for name, m in self.named_modules() if any(True for _ in m.parameters(recurse=False))]

    def tail_layers(self, n=10):
        names = self.layer_order()
        if n > len(names):
            raise ValueError(f"cannot unfreeze {n} layers; mitigator has {len(names)}")
        return names[len(names) - n:]

    def forward(self, window) -> MitigatorOutput:
        reg = self.registration(window)
        enh = self.enhancement(reg.registered, reg.features)
        return MitigatorOutput(enh.mitigated, reg.fields, reg.registered, enh.pyramid, enh.stem_features)
