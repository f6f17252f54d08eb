"""Semi-orthogonal linear measurement operators.

Every operator is a triple ``measure`` (M^T), ``lift`` (M) and ``project``
(M M^T) with ``measure(lift(v)) == v``.  Images are tensors whose trailing
three dimensions are ``(channels, height, width)``; measurement vectors have
a single trailing dimension of length ``measurement_dim``.  Any leading
dimensions are treated as a batch.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import torch

KINDS = ("sr2", "inpaint_block", "random_mask", "bayer", "freq_lowpass", "random_basis")

# Allowed parameters per kind and their defaults.  ``subspace_dim`` of None
# means round(H*W/5).
_DEFAULT_PARAMS: dict[str, dict[str, Any]] = {
    "sr2": {},
    "inpaint_block": {"block_size": 16},
    "random_mask": {"keep_fraction": 0.10},
    "bayer": {},
    "freq_lowpass": {"drop_fraction": 0.20},
    "random_basis": {"subspace_dim": None},
}

MAX_DENSE_SIZE = 4096


class DescriptorError(ValueError):
    """Raised for an operator descriptor that cannot define an operator."""


class DimensionError(ValueError):
    """Raised when a tensor does not match the operator's dimensions."""


@dataclass(frozen=True)
class OperatorDescriptor:
    """Serializable recipe that fully determines a measurement operator."""

    kind: str
    image_dims: tuple[int, int, int]
    params: dict[str, Any] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_dims", tuple(int(d) for d in self.image_dims))
        merged = dict(_DEFAULT_PARAMS.get(self.kind, {}))
        merged.update(self.params)
        object.__setattr__(self, "params", merged)
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise DescriptorError(f"unknown operator kind {self.kind!r}")
        if len(self.image_dims) != 3 or min(self.image_dims) < 1:
            raise DescriptorError(f"image_dims must be three positive ints, got {self.image_dims}")
        unknown = set(self.params) - set(_DEFAULT_PARAMS[self.kind])
        if unknown:
            raise DescriptorError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        if not 0 <= int(self.seed) < 2**64:
            raise DescriptorError("seed must be a 64-bit unsigned integer")
        c, h, w = self.image_dims
        if self.kind in ("sr2", "bayer") and (h % 2 or w % 2):
            raise DescriptorError(f"{self.kind} needs even height and width, got {h}x{w}")
        if self.kind == "bayer" and c != 3:
            raise DescriptorError("bayer needs 3 channels")
        if self.kind == "inpaint_block":
            bs = self.params["block_size"]
            if int(bs) != bs or bs < 1:
                raise DescriptorError("block_size must be a positive integer")
            if bs > h or bs > w:
                raise DescriptorError(f"block of {bs} pixels does not fit a {h}x{w} image")
            if bs * bs == h * w:
                raise DescriptorError("block covers the whole image, leaving no measurements")
        if self.kind == "random_mask":
            kf = self.params["keep_fraction"]
            if not 0 < kf <= 1:
                raise DescriptorError(f"keep_fraction must lie in (0, 1], got {kf}")
        if self.kind == "freq_lowpass":
            df = self.params["drop_fraction"]
            if not 0 <= df < 1:
                raise DescriptorError(f"drop_fraction must lie in [0, 1), got {df}")
        if self.kind == "random_basis":
            k = self.subspace_dim()
            if not 1 <= k <= h * w:
                raise DescriptorError(f"subspace_dim {k} must lie in [1, {h * w}]")

    def subspace_dim(self) -> int:
        k = self.params.get("subspace_dim")
        c, h, w = self.image_dims
        return max(1, round(h * w / 5)) if k is None else int(k)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "image_dims": list(self.image_dims),
            "params": dict(self.params),
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, record: dict[str, Any]) -> "OperatorDescriptor":
        missing = {"kind", "image_dims"} - set(record)
        if missing:
            raise DescriptorError(f"descriptor record lacks {sorted(missing)}")
        extra = set(record) - {"kind", "image_dims", "params", "seed"}
        if extra:
            raise DescriptorError(f"unexpected descriptor fields {sorted(extra)}")
        return cls(record["kind"], tuple(record["image_dims"]), dict(record.get("params", {})),
                   int(record.get("seed", 0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "OperatorDescriptor":
        return cls.from_dict(json.loads(text))


class LinearMeasurement:
    """Base class: subclasses implement ``_measure`` and ``_lift`` on flat batches."""

    def __init__(self, descriptor: OperatorDescriptor, measurement_dim: int):
        self.descriptor = descriptor
        self.image_dims = descriptor.image_dims
        self.measurement_dim = int(measurement_dim)
        self._cache: dict[tuple, torch.Tensor] = {}

    @property
    def n_pixels(self) -> int:
        return math.prod(self.image_dims)

    def __repr__(self):
        return f"{type(self).__name__}({self.descriptor.kind}, dims={self.image_dims}, K={self.measurement_dim})"

    def _buffer(self, name: str, array: np.ndarray, like: torch.Tensor) -> torch.Tensor:
        key = (name, like.dtype, like.device)
        buf = self._cache.get(key)
        if buf is None:
            buf = torch.as_tensor(array, device=like.device)
            if buf.is_floating_point():
                buf = buf.to(like.dtype)
            self._cache[key] = buf
        return buf

    def _check_image(self, x: torch.Tensor) -> None:
        if tuple(x.shape[-3:]) != self.image_dims or x.dim() < 3:
            raise DimensionError(f"expected image dims {self.image_dims}, got {tuple(x.shape)}")

    def _check_vector(self, v: torch.Tensor) -> None:
        if v.dim() < 1 or v.shape[-1] != self.measurement_dim:
            raise DimensionError(f"expected measurement length {self.measurement_dim}, got {tuple(v.shape)}")

    def measure(self, x: torch.Tensor) -> torch.Tensor:
        self._check_image(x)
        return self._measure(x)

    def lift(self, v: torch.Tensor) -> torch.Tensor:
        self._check_vector(v)
        return self._lift(v)

    def project(self, x: torch.Tensor) -> torch.Tensor:
        self._check_image(x)
        return self._project(x)

    def _project(self, x: torch.Tensor) -> torch.Tensor:
        return self._lift(self._measure(x))

    def to_dense(self) -> np.ndarray:
        """Explicit K x (C*H*W) matrix; only for small instances."""
        n = self.n_pixels
        if n > MAX_DENSE_SIZE:
            raise ValueError(f"to_dense is limited to {MAX_DENSE_SIZE} entries, operator has {n}")
        eye = torch.eye(n, dtype=torch.float64).reshape(n, *self.image_dims)
        return self.measure(eye).T.contiguous().numpy()


class BlockAverage(LinearMeasurement):
    """2x downsampling by non-overlapping 2x2 blocks, orthonormal convention.

    Each measurement is half the block sum (twice the block mean), so the rows
    of M^T have unit norm.  ``low_res`` returns the conventional block means.
    """

    def __init__(self, descriptor):
        c, h, w = descriptor.image_dims
        super().__init__(descriptor, c * (h // 2) * (w // 2))

    def _measure(self, x):
        c, h, w = self.image_dims
        blocks = x.reshape(*x.shape[:-3], c, h // 2, 2, w // 2, 2)
        return 0.5 * blocks.sum(dim=(-1, -3)).flatten(-3)

    def _lift(self, v):
        c, h, w = self.image_dims
        small = 0.5 * v.reshape(*v.shape[:-1], c, h // 2, w // 2)
        return small.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)

    def low_res(self, v: torch.Tensor) -> torch.Tensor:
        c, h, w = self.image_dims
        return 0.5 * v.reshape(*v.shape[:-1], c, h // 2, w // 2)


class Selection(LinearMeasurement):
    """Keeps a fixed subset of entries of the flattened (C, H, W) image."""

    def __init__(self, descriptor, kept: np.ndarray):
        kept = np.sort(np.asarray(kept, dtype=np.int64))
        super().__init__(descriptor, kept.size)
        self.kept = kept
        mask = np.zeros(self.n_pixels)
        mask[kept] = 1.0
        self.mask = mask.reshape(self.image_dims)

    def _measure(self, x):
        idx = self._buffer("kept", self.kept, x)
        return x.flatten(-3)[..., idx]

    def _lift(self, v):
        idx = self._buffer("kept", self.kept, v)
        out = v.new_zeros(*v.shape[:-1], self.n_pixels)
        out[..., idx] = v
        return out.reshape(*v.shape[:-1], *self.image_dims)

    def _project(self, x):
        return x * self._buffer("mask", self.mask, x)


class FourierLowpass(LinearMeasurement):
    """Orthonormal 2D DFT restricted to a conjugate-symmetric low-frequency set.

    The measurement vector is real: self-conjugate frequencies contribute
    their real part, each conjugate pair contributes sqrt(2) times the real
    and imaginary parts of one representative.
    """

    def __init__(self, descriptor):
        c, h, w = descriptor.image_dims
        self_conj, pairs = _lowpass_sets(h, w, descriptor.params["drop_fraction"])
        self.self_conj = self_conj
        self.pairs = pairs
        self.partners = _partner_index(pairs, h, w)
        self.per_channel = self_conj.size + 2 * pairs.size
        super().__init__(descriptor, c * self.per_channel)

    def kept_frequencies(self) -> np.ndarray:
        return np.sort(np.concatenate([self.self_conj, self.pairs, self.partners]))

    def _measure(self, x):
        c, h, w = self.image_dims
        spec = torch.fft.fft2(x, norm="ortho").flatten(-2)
        s = spec[..., self._buffer("self", self.self_conj, x)].real
        p = spec[..., self._buffer("pairs", self.pairs, x)]
        root2 = math.sqrt(2.0)
        out = torch.cat([s, root2 * p.real, root2 * p.imag], dim=-1)
        return out.flatten(-2)

    def _lift(self, v):
        c, h, w = self.image_dims
        v = v.reshape(*v.shape[:-1], c, self.per_channel)
        ns, npair = self.self_conj.size, self.pairs.size
        a = v[..., :ns]
        b = v[..., ns:ns + npair] / math.sqrt(2.0)
        im = v[..., ns + npair:] / math.sqrt(2.0)
        ctype = torch.complex128 if v.dtype == torch.float64 else torch.complex64
        spec = torch.zeros(*v.shape[:-1], h * w, dtype=ctype, device=v.device)
        spec[..., self._buffer("self", self.self_conj, v)] = a.to(ctype)
        spec[..., self._buffer("pairs", self.pairs, v)] = torch.complex(b, im)
        spec[..., self._buffer("partners", self.partners, v)] = torch.complex(b, -im)
        img = torch.fft.ifft2(spec.reshape(*spec.shape[:-1], h, w), norm="ortho")
        return img.real


def _signed_freq(n: int) -> np.ndarray:
    return np.rint(np.fft.fftfreq(n) * n).astype(np.int64)


def _partner_index(flat: np.ndarray, h: int, w: int) -> np.ndarray:
    u, v = np.divmod(flat, w)
    return ((-u) % h) * w + ((-v) % w)


def _lowpass_sets(h: int, w: int, drop_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Split the kept frequency set into self-conjugate indices and pair representatives.

    Frequencies are ranked by ring distance max(|u|, |v|) on the centred
    spectrum, then squared radius, then flat index; conjugate partners are
    admitted together until at least round((1 - drop_fraction) * H * W) are kept.
    """
    fu, fv = np.meshgrid(_signed_freq(h), _signed_freq(w), indexing="ij")
    ring = np.maximum(np.abs(fu), np.abs(fv)).ravel()
    radius = (fu**2 + fv**2).ravel()
    flat = np.arange(h * w)
    partner = _partner_index(flat, h, w)
    canonical = flat <= partner
    reps = flat[canonical]
    order = np.lexsort((reps, radius[reps], ring[reps]))
    reps = reps[order]
    sizes = np.where(partner[reps] == reps, 1, 2)
    target = max(1, round((1.0 - drop_fraction) * h * w))
    n_groups = int(np.searchsorted(np.cumsum(sizes), target) + 1)
    chosen = reps[:n_groups]
    is_self = partner[chosen] == chosen
    return np.sort(chosen[is_self]), np.sort(chosen[~is_self])


class RandomBasis(LinearMeasurement):
    """K orthonormal random rows shared by every channel."""

    def __init__(self, descriptor):
        c, h, w = descriptor.image_dims
        k = descriptor.subspace_dim()
        rng = np.random.default_rng(descriptor.seed)
        gauss = rng.standard_normal((h * w, k))
        q, r = np.linalg.qr(gauss)
        # fix the QR sign ambiguity so the basis depends only on the seed
        q *= np.where(np.diag(r) < 0, -1.0, 1.0)
        self.basis = np.ascontiguousarray(q.T)
        self.subspace_dim = k
        super().__init__(descriptor, c * k)

    def _measure(self, x):
        basis = self._buffer("basis", self.basis, x)
        return (x.flatten(-2) @ basis.T).flatten(-2)

    def _lift(self, v):
        c, h, w = self.image_dims
        basis = self._buffer("basis", self.basis, v)
        coeffs = v.reshape(*v.shape[:-1], c, self.subspace_dim)
        return (coeffs @ basis).reshape(*v.shape[:-1], c, h, w)


def _random_mask_indices(desc: OperatorDescriptor) -> np.ndarray:
    c, h, w = desc.image_dims
    n_keep = max(1, round(desc.params["keep_fraction"] * h * w))
    rng = np.random.default_rng(desc.seed)
    pixels = np.sort(rng.permutation(h * w)[:n_keep])
    return (np.arange(c)[:, None] * h * w + pixels[None, :]).ravel()


def _inpaint_indices(desc: OperatorDescriptor) -> np.ndarray:
    c, h, w = desc.image_dims
    bs = int(desc.params["block_size"])
    rng = np.random.default_rng(desc.seed)
    top = int(rng.integers(0, h - bs + 1))
    left = int(rng.integers(0, w - bs + 1))
    keep = np.ones((c, h, w), dtype=bool)
    keep[:, top:top + bs, left:left + bs] = False
    return np.flatnonzero(keep)


def _bayer_indices(desc: OperatorDescriptor) -> np.ndarray:
    # RGGB: R at (0, 0), G at (0, 1) and (1, 0), B at (1, 1) of every 2x2 block
    c, h, w = desc.image_dims
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    channel = np.where((rows % 2) + (cols % 2) == 1, 1, np.where(rows % 2 == 0, 0, 2))
    keep = np.zeros((c, h, w), dtype=bool)
    for ch in range(3):
        keep[ch] = channel == ch
    return np.flatnonzero(keep)


def make_operator(descriptor: OperatorDescriptor) -> LinearMeasurement:
    kind = descriptor.kind
    if kind == "sr2":
        return BlockAverage(descriptor)
    if kind == "inpaint_block":
        return Selection(descriptor, _inpaint_indices(descriptor))
    if kind == "random_mask":
        return Selection(descriptor, _random_mask_indices(descriptor))
    if kind == "bayer":
        return Selection(descriptor, _bayer_indices(descriptor))
    if kind == "freq_lowpass":
        return FourierLowpass(descriptor)
    if kind == "random_basis":
        return RandomBasis(descriptor)
    raise DescriptorError(f"unknown operator kind {kind!r}")


class OperatorStack(LinearMeasurement):
    """One operator per batch element, applied along the leading dimension.

    Used during training where each image in a minibatch gets a freshly
    drawn mask or basis.  All members must share image dims and K.
    """

    def __init__(self, operators: Sequence[LinearMeasurement]):
        if not operators:
            raise ValueError("empty operator stack")
        first = operators[0]
        for op in operators[1:]:
            if op.image_dims != first.image_dims or op.measurement_dim != first.measurement_dim:
                raise DimensionError("stacked operators must share image dims and measurement size")
        self.operators = list(operators)
        self.descriptor = first.descriptor
        self.image_dims = first.image_dims
        self.measurement_dim = first.measurement_dim
        self._cache = {}

    def _split(self, t: torch.Tensor, trailing: int) -> torch.Tensor:
        if t.dim() != trailing + 1 or t.shape[0] != len(self.operators):
            raise DimensionError(f"stack of {len(self.operators)} needs a matching leading batch dimension")
        return t

    def _measure(self, x):
        self._split(x, 3)
        return torch.stack([op._measure(xi) for op, xi in zip(self.operators, x)])

    def _lift(self, v):
        self._split(v, 1)
        return torch.stack([op._lift(vi) for op, vi in zip(self.operators, v)])

    def _project(self, x):
        self._split(x, 3)
        return torch.stack([op._project(xi) for op, xi in zip(self.operators, x)])

    def to_dense(self):
        raise NotImplementedError("dense form is defined per member operator")
