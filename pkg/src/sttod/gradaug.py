"""Gradient-guided masked-reconstruction augmentation.

For a labeled input, token importance is the summed gradient of the teacher's
label score w.r.t. that token's embedding, optionally averaged over Gaussian
perturbations of the whole embedding matrix. Tokens are masked with
probability inversely related to importance, and the masked positions are
refilled by sampling the masked-token model's top-k predictions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .corpus import Example
from .mlm import MASK_ID, MlmModel, mask_count, mlm_sample_reconstruction
from .numeric import DegenerateInputError, InvalidInputError, rng_for

log = logging.getLogger(__name__)

SALIENCY_MODES = ("smooth", "vanilla", "random")


@dataclass(frozen=True)
class GradAugConfig:
    q: int = 3
    beta: float = 1.0
    noise_count: int = 20
    noise_variance: float = 1e-4
    mask_ratio: float = 0.15
    importance_floor: float = 1e-6
    top_k: int = 10
    # "vanilla" skips the noise averaging; "random" masks uniformly.
    saliency: str = "smooth"
    seed: int = 0

    def __post_init__(self):
        if self.q < 1 or self.noise_count < 1:
            raise ValueError("q and noise_count must be at least 1")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")
        if self.saliency not in SALIENCY_MODES:
            raise ValueError(f"saliency mode must be one of {SALIENCY_MODES}")


@dataclass
class SaliencyProfile:
    m_raw: np.ndarray | None
    m_smooth: np.ndarray | None
    p: np.ndarray


def _row_saliency(gX: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = gX.sum(axis=-1)
    if not np.all(np.isfinite(out[mask])):
        raise InvalidInputError("non-finite saliency")
    return out


def saliency(teacher, x: Example, pool=None) -> np.ndarray:
    """Per-token summed gradient of the teacher's score for ``x.label``."""
    X = teacher.embed(x.tokens)
    if pool is None:
        pool = teacher.scoring_pool(x)
    _, gX = teacher.score_and_grad_batch(X[None], np.ones((1, len(x.tokens)), dtype=bool), [x.label],
                                         None if pool is None else [pool])
    return _row_saliency(gX[0], np.ones(len(x.tokens), dtype=bool))


def smooth_saliency(teacher, x: Example, config: GradAugConfig = GradAugConfig(),
                    rng: np.random.Generator | None = None, pool=None) -> np.ndarray:
    """Saliency averaged over ``noise_count`` noisy copies of the embedding matrix."""
    if config.noise_variance < 0:
        raise InvalidInputError("negative noise variance")
    if rng is None:
        rng = rng_for(config.seed, "smooth-saliency", x.id)
    if pool is None:
        pool = teacher.scoring_pool(x)
    X = teacher.embed(x.tokens)
    m = config.noise_count
    if config.noise_variance == 0:
        noisy = np.broadcast_to(X, (m,) + X.shape).copy()
    else:
        noisy = X[None] + rng.normal(0.0, np.sqrt(config.noise_variance), size=(m,) + X.shape)
    mask = np.ones((m, X.shape[0]), dtype=bool)
    _, gX = teacher.score_and_grad_batch(noisy, mask, [x.label] * m, None if pool is None else [pool] * m)
    return _row_saliency(gX, mask).mean(axis=0)


def masking_probability(m_smooth, beta: float = 1.0, floor: float = 1e-6) -> np.ndarray:
    """Masking distribution with ``p_i`` proportional to ``importance_i ** -beta``.

    Importance is ``|M_i|`` floored at ``floor * max|M|``; all-zero saliency
    gives a uniform distribution.
    """
    m = np.abs(np.asarray(m_smooth, dtype=np.float64))
    if m.size == 0:
        raise InvalidInputError("empty saliency vector")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("non-finite saliency")
    top = m.max()
    if top == 0.0:
        return np.full(m.size, 1.0 / m.size)
    # Scaling by the max leaves p unchanged and keeps the powers in range.
    rel = np.maximum(m / top, floor)
    w = rel ** -beta
    return w / w.sum()


def sample_without_replacement(p, k: int, rng: np.random.Generator) -> list[int]:
    """Sequential weighted draws, removing each pick and renormalizing.

    Once the remaining weight is zero the rest are drawn uniformly.
    """
    w = np.array(p, dtype=np.float64)
    n = w.size
    if not 0 <= k <= n:
        raise ValueError(f"cannot draw {k} of {n}")
    alive = np.ones(n, dtype=bool)
    picks = []
    for _ in range(k):
        weights = np.where(alive, w, 0.0)
        total = weights.sum()
        if total <= 0:
            weights = alive.astype(np.float64)
            total = weights.sum()
        u = rng.random() * total
        i = int(np.searchsorted(np.cumsum(weights), u, side="right"))
        i = min(i, n - 1)
        while not alive[i] or weights[i] == 0:
            # guards the rounding edge where u lands on the cumulative total
            i -= 1
        picks.append(i)
        alive[i] = False
    return picks


def mask_tokens(tokens: Sequence[int], p, mask_ratio: float, rng: np.random.Generator,
                mask_id: int = MASK_ID) -> tuple[tuple[int, ...], list[int]]:
    """Mask ``max(1, round(mask_ratio * n))`` positions drawn by ``p``."""
    n = len(tokens)
    if n < 1:
        raise InvalidInputError("cannot mask an empty sequence")
    positions = sorted(sample_without_replacement(p, mask_count(n, mask_ratio), rng))
    out = list(tokens)
    for i in positions:
        out[i] = mask_id
    return tuple(out), positions


def profile(teacher, x: Example, config: GradAugConfig, rng=None, with_raw: bool = False) -> SaliencyProfile:
    n = len(x.tokens)
    if config.saliency == "random":
        return SaliencyProfile(saliency(teacher, x) if with_raw else None, None, np.full(n, 1.0 / n))
    raw = saliency(teacher, x) if (with_raw or config.saliency == "vanilla") else None
    smooth = smooth_saliency(teacher, x, config, rng) if config.saliency == "smooth" else None
    basis = smooth if smooth is not None else raw
    return SaliencyProfile(raw, smooth, masking_probability(basis, config.beta, config.importance_floor))


def gradaug(labeled: Sequence[Example], teacher, mlm: MlmModel, config: GradAugConfig = GradAugConfig(),
            *, iteration: int = 0, dump: list | None = None, vocab=None) -> list[Example]:
    """Return the originals followed by ``q`` reconstructions of each.

    Augmented copies keep their source's label object. Saliency is computed
    with the given teacher on every call. When ``dump`` is a list, one audit
    record per augmentation is appended to it.
    """
    out = list(labeled)
    for x in labeled:
        try:
            prof = profile(teacher, x, config, rng_for(config.seed, "smooth", iteration, x.id),
                           with_raw=dump is not None)
            augs = []
            for j in range(config.q):
                rng = rng_for(config.seed, "augment", iteration, x.id, j)
                masked, positions = mask_tokens(x.tokens, prof.p, config.mask_ratio, rng)
                rebuilt = mlm_sample_reconstruction(mlm, masked, positions, config.top_k, rng)
                augs.append(replace(x, id=f"{x.id}~aug{j}", tokens=rebuilt))
                if dump is not None:
                    dump.append(_audit_record(x, j, positions, rebuilt, prof, vocab))
        except (DegenerateInputError, InvalidInputError, FloatingPointError) as exc:
            log.warning("gradaug skipped %s: %s", x.id, exc)
            continue
        out.extend(augs)
    return out


def _audit_record(x, j, positions, rebuilt, prof: SaliencyProfile, vocab):
    def words(ids):
        return list(vocab.decode(ids)) if vocab is not None else list(ids)

    def arr(a):
        return None if a is None else [float(v) for v in a]

    return {
        "source": x.id,
        "augmentation": j,
        "tokens": words(x.tokens),
        "masked_positions": positions,
        "replacements": words([rebuilt[i] for i in positions]),
        "saliency": arr(prof.m_raw),
        "smooth_saliency": arr(prof.m_smooth),
        "mask_probability": arr(prof.p),
    }
