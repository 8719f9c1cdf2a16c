"""Asymmetric mixture-of-experts restoration network at toy scale.

Encoder stages route softly (every expert contributes, weighted by a softmax
router); decoder stages route hard (top-k experts per sample, survivors
renormalized, the rest never evaluated). Experts are residual 3x3-conv blocks
of different hidden widths so that they differ in capacity.

Tensors inside the network are channels-last ``(B, H, W, C)``; ``forward``
takes and returns ``(B, C, H, W)`` batches.
"""

from __future__ import annotations

import struct
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rainmix import autodiff as ad
from rainmix.autodiff import Tensor

CHECKPOINT_MAGIC = b"UNRN"
CHECKPOINT_VERSION = 1


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class RouterParams:
    weight: Tensor  # (channels, num_experts)
    bias: Tensor  # (num_experts,)
    noise_std: float = 0.1

    def __post_init__(self):
        if self.weight.data.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError(
                f"router weight {self.weight.shape} and bias {self.bias.shape} are inconsistent"
            )
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @property
    def num_experts(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def create(cls, channels, num_experts, noise_std=0.1, rng=None, scale=0.1) -> RouterParams:
        rng = _rng(rng)
        w = rng.normal(0.0, scale, (channels, num_experts)) if scale else np.zeros((channels, num_experts))
        return cls(Tensor(w, True), Tensor(np.zeros(num_experts), True), noise_std)


@dataclass
class RouterOutput:
    """Per-sample mixture weights ``(B, N)`` and the matching active-expert mask."""

    weights: Tensor
    active: np.ndarray

    @property
    def num_experts(self) -> int:
        return self.active.shape[1]

    def active_set(self, sample: int = 0) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.active[sample]))


def soft_route(features: Tensor, params: RouterParams, training: bool = False, rng_seed=None) -> RouterOutput:
    """Softmax over an affine projection of globally pooled (noisy) features."""
    if features.data.ndim != 4 or features.shape[-1] != params.weight.shape[0]:
        raise ValueError(
            f"features {features.shape} do not match router with {params.weight.shape[0]} channels"
        )
    pooled = ad.mean(features, axis=(1, 2))
    if training and params.noise_std > 0:
        # GAP(x + eps) = GAP(x) + GAP(eps), and the mean of h*w iid N(0, s^2)
        # draws is exactly N(0, s^2 / (h*w)), so the pooled noise is sampled directly
        n, h, w, c = features.shape
        eps = _rng(rng_seed).normal(0.0, params.noise_std / np.sqrt(h * w), (n, c))
        pooled = pooled + eps.astype(features.data.dtype)
    weights = ad.softmax(ad.affine(pooled, params.weight, params.bias), axis=-1)
    return RouterOutput(weights, np.ones(weights.shape, dtype=bool))


def hard_route(
    features: Tensor, params: RouterParams, k: int, training: bool = False, rng_seed=None
) -> RouterOutput:
    """Top-k of the soft routing weights, survivors renormalized to sum to 1."""
    if not 1 <= k <= params.num_experts:
        raise ValueError(f"k={k} outside [1, {params.num_experts}]")
    soft = soft_route(features, params, training, rng_seed)
    weights, mask = ad.topk_renormalize(soft.weights, k)
    return RouterOutput(weights, mask)


def _sample_weight(router: RouterOutput, i: int, ndim: int) -> Tensor:
    col = ad.getitem(router.weights, (slice(None), i))
    return ad.reshape(col, (-1,) + (1,) * (ndim - 1))


def soft_combine(expert_outputs: Sequence[Tensor], router: RouterOutput) -> Tensor:
    """Sum of expert outputs scaled by their per-sample routing weights."""
    if len(expert_outputs) != router.num_experts:
        raise ValueError(f"{len(expert_outputs)} outputs for {router.num_experts} experts")
    shape = expert_outputs[0].shape
    if any(y.shape != shape for y in expert_outputs):
        raise ValueError(f"expert output shapes differ: {[y.shape for y in expert_outputs]}")
    out = None
    for i, y in enumerate(expert_outputs):
        term = ad.mul(y, _sample_weight(router, i, y.data.ndim))
        out = term if out is None else ad.add(out, term)
    return out


def hard_combine(experts: Sequence[Tensor | Callable[[np.ndarray], Tensor]], router: RouterOutput) -> Tensor:
    """Weighted sum over active experts only.

    Each entry of ``experts`` is either a precomputed output for the whole
    batch or a callable taking the sample indices routed to that expert and
    returning the expert's output for just those samples. Callables for
    experts no sample selected are never invoked.
    """
    if len(experts) != router.num_experts:
        raise ValueError(f"{len(experts)} experts for {router.num_experts} router outputs")
    batch = router.active.shape[0]
    out = None
    shape = None
    for i, expert in enumerate(experts):
        idx = np.flatnonzero(router.active[:, i])
        if idx.size == 0:
            continue
        if isinstance(expert, Tensor):
            y = expert if idx.size == batch else ad.take_rows(expert, idx)
        else:
            y = expert(idx)
        if shape is None:
            shape = y.shape[1:]
        elif y.shape[1:] != shape:
            raise ValueError(f"expert {i} output shape {y.shape[1:]} differs from {shape}")
        w = ad.take_rows(ad.getitem(router.weights, (slice(None), i)), idx)
        term = ad.mul(y, ad.reshape(w, (-1,) + (1,) * (y.data.ndim - 1)))
        if idx.size != batch:
            term = ad.scatter_rows(term, idx, batch)
        out = term if out is None else ad.add(out, term)
    return out


class ConvExpert:
    """Residual block ``x + W2 tanh(conv3x3(x) + b1) + b2`` with hidden width ``width``."""

    def __init__(self, channels: int, width: int, rng=None, identity: bool = False, out_scale: float = 0.1):
        rng = _rng(rng)
        fan_in = 9 * channels
        self.channels = channels
        self.width = width
        self.w1 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, width)), True)
        self.b1 = Tensor(np.zeros(width), True)
        w2 = np.zeros((width, channels)) if identity else rng.normal(0.0, out_scale / np.sqrt(width), (width, channels))
        self.w2 = Tensor(w2, True)
        self.b2 = Tensor(np.zeros(channels), True)
        self.calls = 0
        self.samples_seen = 0

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def __call__(self, x: Tensor, cols: Tensor | None = None) -> Tensor:
        """``x`` is ``(n, H, W, C)``; ``cols`` optionally its precomputed 3x3 patches."""
        self.calls += 1
        self.samples_seen += x.shape[0]
        n, h, w, c = x.shape
        if cols is None:
            cols = ad.im2col3x3(x)
        flat = ad.reshape(cols, (n * h * w, 9 * c))
        hidden = ad.tanh(ad.affine(flat, self.w1, self.b1))
        y = ad.reshape(ad.affine(hidden, self.w2, self.b2), (n, h, w, c))
        return ad.add(x, y)


class MoEStage:
    """One routed block: a router plus ``len(widths)`` experts."""

    def __init__(
        self, channels, widths, routing: str, top_k=None, noise_std=0.1, rng=None, identity=False,
        out_scale=0.1, router_scale=0.1,
    ):
        if routing not in ("soft", "hard"):
            raise ValueError(f"routing must be 'soft' or 'hard', got {routing!r}")
        rng = _rng(rng)
        self.routing = routing
        self.top_k = top_k if routing == "hard" else len(widths)
        if routing == "hard" and not 1 <= self.top_k <= len(widths):
            raise ValueError(f"top_k={top_k} outside [1, {len(widths)}]")
        self.router = RouterParams.create(channels, len(widths), noise_std, rng, scale=router_scale)
        self.experts = [ConvExpert(channels, w, rng, identity, out_scale) for w in widths]

    def parameters(self) -> dict[str, Tensor]:
        params = {"router.weight": self.router.weight, "router.bias": self.router.bias}
        for i, e in enumerate(self.experts):
            params.update({f"expert{i}.{k}": v for k, v in e.parameters().items()})
        return params

    def __call__(self, x: Tensor, training: bool, rng) -> tuple[Tensor, RouterOutput]:
        cols = ad.im2col3x3(x)
        if self.routing == "soft":
            route = soft_route(x, self.router, training, rng)
            return soft_combine([e(x, cols) for e in self.experts], route), route

        route = hard_route(x, self.router, self.top_k, training, rng)
        full = x.shape[0]

        def lazy(expert):
            def run(idx):
                if idx.size == full:
                    return expert(x, cols)
                return expert(ad.take_rows(x, idx), ad.take_rows(cols, idx))

            return run

        return hard_combine([lazy(e) for e in self.experts], route), route


@dataclass
class ToyModelConfig:
    channels: int = 3
    expert_widths: tuple[int, ...] = (8, 16, 24, 32)
    encoder_stages: int = 2
    decoder_stages: int = 2
    top_k: int = 2
    noise_std: float = 0.1
    encoder_routing: str = "soft"
    decoder_routing: str = "hard"
    expert_out_scale: float = 0.1
    router_init_scale: float = 0.1

    def __post_init__(self):
        self.expert_widths = tuple(int(w) for w in self.expert_widths)
        if not self.expert_widths or min(self.expert_widths) < 1:
            raise ValueError("expert_widths must be a non-empty list of positive widths")
        if not 1 <= self.top_k <= len(self.expert_widths):
            raise ValueError(f"top_k={self.top_k} outside [1, {len(self.expert_widths)}]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        for r in (self.encoder_routing, self.decoder_routing):
            if r not in ("soft", "hard"):
                raise ValueError(f"routing must be 'soft' or 'hard', got {r!r}")


class ToyModel:
    """Soft-routed encoder stages followed by hard-routed decoder stages."""

    def __init__(self, config: ToyModelConfig | None = None, seed=0, identity: bool = False, dtype=np.float64):
        config = config or ToyModelConfig()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = _rng(seed)
        c = config
        self.encoder = [
            MoEStage(c.channels, c.expert_widths, c.encoder_routing, c.top_k, c.noise_std, rng, identity,
                     c.expert_out_scale, c.router_init_scale)
            for _ in range(c.encoder_stages)
        ]
        self.decoder = [
            MoEStage(c.channels, c.expert_widths, c.decoder_routing, c.top_k, c.noise_std, rng, identity,
                     c.expert_out_scale, c.router_init_scale)
            for _ in range(c.decoder_stages)
        ]
        self.last_routes: list[RouterOutput] = []
        for p in self.parameters().values():
            p.data = p.data.astype(self.dtype)

    @property
    def stages(self) -> list[MoEStage]:
        return self.encoder + self.decoder

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for prefix, stages in (("encoder", self.encoder), ("decoder", self.decoder)):
            for s, stage in enumerate(stages):
                params.update({f"{prefix}{s}.{k}": v for k, v in stage.parameters().items()})
        return params

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def forward(self, batch, training: bool = False, rng_seed=None) -> Tensor:
        """Restore a ``(B, C, H, W)`` batch; returns the same layout."""
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.dtype))
        if x.data.ndim != 4 or x.shape[1] != self.config.channels:
            raise ValueError(f"expected (B, {self.config.channels}, H, W) batch, got {x.shape}")
        rng = _rng(rng_seed) if training else None
        h = ad.transpose(x, (0, 2, 3, 1))
        self.last_routes = []
        for stage in self.stages:
            h, route = stage(h, training, rng)
            self.last_routes.append(route)
        return ad.transpose(h, (0, 3, 1, 2))

    __call__ = forward


def backward(model: ToyModel, loss_node: Tensor) -> dict[str, np.ndarray]:
    """Run reverse mode from ``loss_node`` and return gradients by parameter name.

    Parameters the loss does not depend on (e.g. unselected experts) get zeros.
    """
    model.zero_grad()
    loss_node.backward()
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in model.parameters().items()
    }


def save_checkpoint(model: ToyModel, path) -> None:
    """Binary layout: ``UNRN``, u16 version, then per parameter
    u32 name length, name bytes, u32 rank, u32 dims, f32 data (all little-endian)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    for name, p in model.parameters().items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{p.data.ndim}I", p.data.ndim, *p.shape))
        chunks.append(p.data.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 6
    out = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint") from exc
    return out


def load_checkpoint(model: ToyModel, path) -> None:
    stored = read_checkpoint(path)
    params = model.parameters()
    if set(stored) != set(params):
        raise ValueError(f"{path}: parameter names do not match the model")
    for name, p in params.items():
        if stored[name].shape != p.shape:
            raise ValueError(f"{path}: {name} has shape {stored[name].shape}, model expects {p.shape}")
        p.data = stored[name].astype(model.dtype)
