"""U-net corrector, a plain Adam optimizer and finite-difference gradient checks.

Reverse-mode differentiation is delegated to torch autograd; this module
pins down the architecture, initialization and optimizer semantics the
reconstruction pipelines rely on.
"""

from contextlib import contextmanager
import json
import math
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .exceptions import DimensionError, StateError, TrainingFault

LEAKY_SLOPE = 0.1


def _init_hidden(conv):
    nn.init.kaiming_uniform_(conv.weight, a=LEAKY_SLOPE, nonlinearity="leaky_relu")
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)
    return conv


def _conv(cin, cout, stride=1):
    return _init_hidden(nn.Conv2d(cin, cout, 3, stride=stride, padding=1))


class _DoubleConv(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = _conv(cin, cout)
        self.conv2 = _conv(cout, cout)

    def forward(self, x):
        x = F.leaky_relu(self.conv1(x), LEAKY_SLOPE)
        return F.leaky_relu(self.conv2(x), LEAKY_SLOPE)


def _upsample(h):
    return F.interpolate(h, scale_factor=2, mode="nearest")


def _merge(up, h, skip):
    return torch.cat([F.leaky_relu(up(h), LEAKY_SLOPE), skip], dim=1)


class SmallUNet(nn.Module):
    """Compact U-net with one or two output branches.

    Downsampling by stride-2 convolutions, upsampling by nearest-neighbour
    interpolation followed by a convolution, skip connections by channel
    concatenation. Output heads are bias-free 3x3 convolutions initialized to
    zero, so a fresh network outputs exactly zero.

    With ``heads=2`` the encoder and all but the last decoder level are shared.
    The last level (upsampling conv, skip concatenation, double conv) is
    duplicated, and the copy feeds a second head that returns a log-scale map.
    """

    def __init__(self, in_channels=1, out_channels=None, base_channels=16, depth=3, heads=1):
        super().__init__()
        if depth not in (2, 3):
            raise ValueError("depth must be 2 or 3")
        if heads not in (1, 2):
            raise ValueError("heads must be 1 or 2")
        out_channels = out_channels or in_channels
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.base_channels = base_channels
        self.depth = depth
        self.heads = heads

        widths = [base_channels * 2**k for k in range(depth)]
        self.inc = _DoubleConv(in_channels, widths[0])
        self.down = nn.ModuleList(_conv(widths[k], widths[k], stride=2) for k in range(depth - 1))
        self.enc = nn.ModuleList(_DoubleConv(widths[k], widths[k + 1]) for k in range(depth - 1))
        self.up = nn.ModuleList(_conv(widths[k + 1], widths[k]) for k in reversed(range(depth - 1)))
        self.dec = nn.ModuleList(_DoubleConv(2 * widths[k], widths[k]) for k in reversed(range(depth - 1)))
        self.head = nn.Conv2d(widths[0], out_channels, 3, padding=1, bias=False)
        nn.init.zeros_(self.head.weight)
        if heads == 2:
            # created last so the reconstruction branch draws the same init as heads=1
            self.scale_up = _conv(widths[1], widths[0])
            self.scale_dec = _DoubleConv(2 * widths[0], widths[0])
            self.scale_head = nn.Conv2d(widths[0], out_channels, 3, padding=1, bias=False)
            nn.init.zeros_(self.scale_head.weight)

    def architecture(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "base_channels": self.base_channels, "depth": self.depth, "heads": self.heads}

    def trunk(self, x):
        """Shared features: input to the last decoder level and its skip tensor."""
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"expected input (batch, {self.in_channels}, h, w), got {tuple(x.shape)}")
        factor = 2 ** (self.depth - 1)
        if x.shape[2] % factor or x.shape[3] % factor:
            raise DimensionError(f"spatial size must be divisible by {factor}")
        h = self.inc(x)
        skips = [h]
        for down, enc in zip(self.down, self.enc):
            h = enc(F.leaky_relu(down(h), LEAKY_SLOPE))
            skips.append(h)
        skips.pop()
        for up, dec in zip(self.up[:-1], self.dec[:-1]):
            h = dec(_merge(up, _upsample(h), skips.pop()))
        return _upsample(h), skips.pop()

    def forward(self, x):
        h, skip = self.trunk(x)
        rec = self.head(self.dec[-1](_merge(self.up[-1], h, skip)))
        if self.heads == 1:
            return rec
        return rec, self.scale_head(self.scale_dec(_merge(self.scale_up, h, skip)))


def forward(net, x):
    """Run ``net`` on a numpy or torch batch, checking the channel count."""
    if not torch.is_tensor(x):
        x = torch.as_tensor(np.asarray(x), dtype=next(net.parameters()).dtype)
    return net(x)


def backward(loss):
    """Accumulate gradients of a scalar loss into every reachable parameter."""
    if not torch.is_tensor(loss) or loss.grad_fn is None:
        raise StateError("loss has no recorded computation graph")
    if loss.numel() != 1:
        raise DimensionError("backward requires a scalar loss")
    if not torch.isfinite(loss):
        raise TrainingFault(f"non-finite loss {loss.item()}")
    loss.backward()


def named_parameters(nets):
    """Flatten parameters of a list of networks with unique ``block{i}.`` prefixes."""
    out = []
    for i, net in enumerate(nets):
        for name, p in net.named_parameters():
            out.append((f"block{i}.{name}", p))
    return out


class Adam:
    """Adam with bias correction; zeroes gradients after each step.

    Parameters without a gradient are skipped, which leaves their moments
    untouched.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1**t
        c2 = 1 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            denom = (v / c2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-self.lr / c1)
        self.zero_grad()

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_step(params, state):
    """Functional alias: ``state`` is an :class:`Adam` built over ``params``."""
    if list(params) != state.params:
        raise ValueError("optimizer state was built for a different parameter list")
    state.step()
    return state.params


def gradient_check(params, loss_fn, samples=50, h=1e-3, seed=0, kink_fn=None):
    """Max relative error between autograd and a fourth-order central difference.

    ``loss_fn()`` recomputes the scalar loss from the current parameter values.
    ``kink_fn()`` may return a tensor whose sign pattern marks non-differentiable
    points (e.g. residuals under an absolute value); a sample whose stencil
    changes any of those signs straddles a kink and is redrawn.
    The five-point stencil keeps truncation error at O(h^4), which allows a step
    large enough that rounding in a summed loss does not swamp small gradients.
    """
    params = [p for p in params if p.requires_grad]
    if any(p.dtype != torch.float64 for p in params):
        raise TypeError("gradient checks require float64 parameters")
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    grads = [p.grad.detach().clone() for p in params]
    for p in params:
        p.grad = None

    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    worst = 0.0
    checked = 0
    attempts = 0
    while checked < samples:
        attempts += 1
        if attempts > 20 * samples:
            raise RuntimeError("too many samples rejected at non-differentiable points")
        k = rng.choice(len(params), p=sizes / sizes.sum())
        idx = int(rng.integers(sizes[k]))
        flat = params[k].data.view(-1)
        orig = flat[idx].item()
        values, signs = {}, []
        with torch.no_grad():
            for step in (-2, -1, 1, 2):
                flat[idx] = orig + step * h
                values[step] = loss_fn().item()
                if kink_fn is not None:
                    signs.append(torch.sign(kink_fn()))
            flat[idx] = orig
        if signs and not all(torch.equal(signs[0], s) for s in signs[1:]):
            continue
        fd = (8 * (values[1] - values[-1]) - (values[2] - values[-2])) / (12 * h)
        an = grads[k].view(-1)[idx].item()
        err = abs(an - fd) / max(abs(an), abs(fd), 1e-12)
        worst = max(worst, err)
        checked += 1
    return worst


@contextmanager
def kink_monitor(nets, residual_fn):
    """Yield a ``kink_fn`` covering ``residual_fn()`` and every conv output in ``nets``.

    Leaky ReLU kinks sit at zero conv outputs, so their signs join the residual's.
    """
    outputs = []
    hooks = [m.register_forward_hook(lambda mod, inp, out: outputs.append(out.flatten()))
             for net in nets for m in net.modules() if isinstance(m, nn.Conv2d)]

    def kink_fn():
        outputs.clear()
        residual = residual_fn().flatten()
        return torch.cat([residual, *outputs])

    try:
        yield kink_fn
    finally:
        for hook in hooks:
            hook.remove()


# -- checkpoints -------------------------------------------------------------------

_DTYPES = {"float32": (torch.float32, np.float32), "float64": (torch.float64, np.float64)}


def save_checkpoint(nets, path, extra=None):
    """Write parameters as one flat little-endian blob plus a JSON manifest.

    ``path`` names the blob; the manifest goes to ``path`` with suffix ``.json``.
    """
    path = Path(path)
    entries = []
    offset = 0
    chunks = []
    for i, net in enumerate(nets):
        for name, tensor in net.state_dict().items():
            arr = tensor.detach().cpu().numpy()
            precision = "float64" if arr.dtype == np.float64 else "float32"
            raw = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[precision][1]).newbyteorder("<")).tobytes()
            entries.append({"name": f"block{i}.{name}", "shape": list(arr.shape),
                            "offset": offset, "precision": precision})
            chunks.append(raw)
            offset += len(raw)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    manifest = {"architectures": [net.architecture() for net in nets],
                "parameters": entries, "blob": path.name, "nbytes": offset}
    if extra:
        manifest.update(extra)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path, dtype=torch.float32):
    """Rebuild the networks saved by :func:`save_checkpoint`; returns (nets, manifest)."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = path.read_bytes()
    if len(blob) != manifest["nbytes"]:
        raise ValueError(f"checkpoint blob {path} is truncated")
    nets = [SmallUNet(**arch) for arch in manifest["architectures"]]
    states = [{} for _ in nets]
    for entry in manifest["parameters"]:
        block, name = entry["name"].split(".", 1)
        i = int(block[len("block"):])
        np_dtype = _DTYPES[entry["precision"]][1]
        count = int(math.prod(entry["shape"]))
        arr = np.frombuffer(blob, dtype=np.dtype(np_dtype).newbyteorder("<"),
                            count=count, offset=entry["offset"]).reshape(entry["shape"])
        states[i][name] = torch.from_numpy(arr.astype(np_dtype))
    for net, state in zip(nets, states):
        # cast before loading so 64-bit values are not squeezed through float32
        net.to(dtype)
        net.load_state_dict(state)
    return nets, manifest
