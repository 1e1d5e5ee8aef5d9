"""Monte Carlo prediction stacks and the predictive / aleatoric / epistemic split.

Exported maps are entropies in bits (nats divided by ln 2), so they lie in [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InvalidInputError
from .kernels import LN2, entropy_maps

EPS = 1e-7
DEFAULT_SAMPLES = 16
UNCERTAINTY_KINDS = ("predictive", "aleatoric", "epistemic")


@dataclass
class UncertaintyTriple:
    predictive: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in UNCERTAINTY_KINDS}


def binary_entropy(p, normalized: bool = True, eps: float = EPS) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    h = -(p * np.log(p) + (1.0 - p) * np.log1p(-p))
    return h / LN2 if normalized else h


def decompose(stack) -> UncertaintyTriple:
    """Split a stack of S probability maps (axis 0) into the three uncertainty maps."""
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim < 1 or stack.shape[0] < 1:
        raise InvalidInputError("need at least one prediction to decompose")
    up, ua = entropy_maps(stack, EPS)
    return UncertaintyTriple(up, ua, up - ua)


def gt_predictive_uncertainty(annotations) -> np.ndarray:
    """Normalized entropy of the mean annotation."""
    a = np.asarray(annotations, dtype=np.float64)
    if a.ndim != 3 or a.shape[0] < 1:
        raise InvalidInputError("expected (M, H, W) annotations with M >= 1")
    return binary_entropy(a.mean(axis=0))


@torch.no_grad()
def mc_predict(image: torch.Tensor, model, framework: str, num_samples: int, rng: torch.Generator) -> np.ndarray:
    """Sampled probability maps, shape (B, S, H, W).

    The ensemble returns its M+1 decoder outputs whatever ``num_samples`` is.
    CVAE draws z from the learned prior; GAN and ABP from N(0, I).
    """
    if num_samples < 1:
        raise InvalidInputError("num_samples must be >= 1")
    if framework != model.framework:
        raise InvalidInputError(f"model framework {model.framework!r} != requested {framework!r}")
    model.eval()
    pyr = model.encode_backbone(image)
    if framework == "ensemble":
        preds = [torch.sigmoid(model.decode_deterministic(pyr, j)) for j in range(len(model.decoders))]
    else:
        b = image.shape[0]
        prior = model.encode_prior(image) if framework == "cvae" else None
        preds = []
        for _ in range(num_samples):
            eps = torch.randn(b, model.latent_dim, generator=rng)
            z = prior.mu + prior.sigma * eps if prior is not None else eps
            preds.append(torch.sigmoid(model.decode_stochastic(pyr, z)))
    return torch.cat(preds, dim=1).double().numpy()


# --------------------------------------------------------------------------
# lossless tensor container
#
#   magic   4 bytes  b"DSTN"
#   version u8       1
#   dtype   u8       1 = float32, 2 = float64, 3 = uint8
#   ndim    u8
#   pad     u8       0
#   shape   ndim x u64 little-endian
#   payload row-major little-endian
# --------------------------------------------------------------------------

TENSOR_MAGIC = b"DSTN"
TENSOR_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("u1"): 3}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def write_tensor(path, array):
    arr = np.asarray(array)
    dtype = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    if dtype not in _DTYPE_TAGS:
        raise InvalidInputError(f"unsupported dtype {arr.dtype}")
    header = TENSOR_MAGIC + struct.pack("<BBBB", TENSOR_VERSION, _DTYPE_TAGS[dtype], arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise InvalidInputError(f"{path}: bad magic bytes")
    version, tag, ndim, _ = struct.unpack_from("<BBBB", raw, 4)
    if version != TENSOR_VERSION or tag not in _TAG_DTYPES:
        raise InvalidInputError(f"{path}: unsupported version {version} or dtype tag {tag}")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 8)
    offset = 8 + 8 * ndim
    dtype = _TAG_DTYPES[tag]
    count = int(np.prod(shape)) if ndim else 1
    if len(raw) - offset != count * dtype.itemsize:
        raise InvalidInputError(f"{path}: payload size does not match header")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape).copy()


def save_uncertainty(out_dir, sample_id: str, triple: UncertaintyTriple):
    """Write ``<id>_<kind>.dstn`` (lossless) and ``<id>_<kind>.png`` (inspection) per map."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for kind, arr in triple.as_dict().items():
        write_tensor(out_dir / f"{sample_id}_{kind}.dstn", arr.astype(np.float64))
        png = np.clip(np.rint(np.clip(arr, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(png).save(out_dir / f"{sample_id}_{kind}.png")


def load_uncertainty(out_dir, sample_id: str, kind: str = "predictive") -> np.ndarray:
    return read_tensor(Path(out_dir) / f"{sample_id}_{kind}.dstn")
