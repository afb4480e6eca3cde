"""SuperPoint-style keypoint network, loaded from a weights file.

The layer names follow the widely distributed ``superpoint_v1.pth`` state
dict, so that file loads as is. Inference only; no training code.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import WeightsError
from .keypoints import DetectorConfig, KeypointSet, greedy_nms


class SuperPointNet(nn.Module):
    def __init__(self):
        super().__init__()
        c1, c2, c3, c4, c5, d1 = 64, 64, 128, 128, 256, 256
        conv = lambda i, o, k=3: nn.Conv2d(i, o, k, padding=k // 2)  # noqa: E731
        self.conv1a, self.conv1b = conv(1, c1), conv(c1, c1)
        self.conv2a, self.conv2b = conv(c1, c2), conv(c2, c2)
        self.conv3a, self.conv3b = conv(c2, c3), conv(c3, c3)
        self.conv4a, self.conv4b = conv(c3, c4), conv(c4, c4)
        self.convPa, self.convPb = conv(c4, c5), conv(c5, 65, 1)
        self.convDa, self.convDb = conv(c4, c5), conv(c5, d1, 1)
        self.pool = nn.MaxPool2d(2, 2)

    def forward(self, x):
        r = F.relu
        x = r(self.conv1b(r(self.conv1a(x))))
        x = self.pool(x)
        x = r(self.conv2b(r(self.conv2a(x))))
        x = self.pool(x)
        x = r(self.conv3b(r(self.conv3a(x))))
        x = self.pool(x)
        x = r(self.conv4b(r(self.conv4a(x))))
        semi = self.convPb(r(self.convPa(x)))
        desc = self.convDb(r(self.convDa(x)))
        return semi, F.normalize(desc, dim=1)


class SuperPointDetector:
    def __init__(self, net: SuperPointNet):
        self.net = net.eval()

    @classmethod
    def from_file(cls, path) -> "SuperPointDetector":
        path = Path(path)
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as e:  # corrupt or foreign pickle
            raise WeightsError(f"cannot read keypoint weights {path}: {e}") from None
        state = state.get("state_dict", state) if isinstance(state, dict) else state
        net = SuperPointNet()
        try:
            net.load_state_dict({k.replace("module.", ""): v for k, v in state.items()})
        except RuntimeError as e:
            raise WeightsError(f"{path} is not a compatible keypoint network: {e}") from None
        return cls(net)

    @torch.no_grad()
    def __call__(self, arr: np.ndarray, cfg: DetectorConfig) -> KeypointSet:
        h, w = arr.shape
        x = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None, None]
        semi, coarse = self.net(x)
        prob = torch.softmax(semi, dim=1)[:, :-1]
        hc, wc = prob.shape[-2:]
        heat = prob.permute(0, 2, 3, 1).reshape(hc, wc, 8, 8).permute(0, 2, 1, 3).reshape(hc * 8, wc * 8)
        heat = heat[:h, :w].numpy().astype(np.float64)
        ys, xs = np.nonzero(heat >= cfg.score_threshold)
        b = cfg.border
        keep = (xs >= b) & (xs < w - b) & (ys >= b) & (ys < h - b)
        xs, ys = xs[keep], ys[keep]
        if len(xs) == 0:
            return KeypointSet.empty(coarse.shape[1])
        xy = np.stack([xs, ys], axis=1).astype(np.float64)
        sc = heat[ys, xs]
        order = greedy_nms(xy, sc, cfg.nms_radius)
        if cfg.max_keypoints is not None:
            order = order[: cfg.max_keypoints]
        xy, sc = xy[order], sc[order]
        # Bilinear descriptor lookup in the 1/8-resolution map (cell centres at 8k + 3.5).
        gx = (xy[:, 0] - 3.5) / (wc * 8 - 8) * 2 - 1 if wc > 1 else np.zeros(len(xy))
        gy = (xy[:, 1] - 3.5) / (hc * 8 - 8) * 2 - 1 if hc > 1 else np.zeros(len(xy))
        grid = torch.from_numpy(np.stack([gx, gy], 1).astype(np.float32))[None, None]
        d = F.grid_sample(coarse, grid, mode="bilinear", align_corners=True)[0, :, 0].T
        d = F.normalize(d, dim=1).numpy().astype(np.float64)
        return KeypointSet(xy, d, sc)
