"""Random speaker-identity transforms: formant scaling, F0 scaling, random EQ."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .corpus import PhoneInventory, Utterance, random_eq_curve, render_frames

RHO_MAX = 1.4


@dataclass
class TransformParams:
    rho1: float          # formant scale factor
    rho2: float          # F0 scale factor
    eq_curve: np.ndarray

    def inverse(self) -> "TransformParams":
        return TransformParams(1.0 / self.rho1, 1.0 / self.rho2, 1.0 / self.eq_curve)

    def to_dict(self) -> dict:
        return {"rho1": self.rho1, "rho2": self.rho2}


def identity_transform(dim: int) -> TransformParams:
    return TransformParams(1.0, 1.0, np.ones(dim))


def _draw_factor(rng: np.random.Generator) -> float:
    rho = rng.uniform(1.0, RHO_MAX)
    if rng.random() < 0.5:
        rho = 1.0 / rho
    return float(rho)


def sample_transform(rng: np.random.Generator, dim: int = 40) -> TransformParams:
    """rho1, rho2 ~ U[1, 1.4], each independently replaced by its reciprocal w.p. 0.5."""
    rho1 = _draw_factor(rng)
    rho2 = _draw_factor(rng)
    return TransformParams(rho1, rho2, random_eq_curve(rng, dim))


def apply_transform(u: Utterance, p: TransformParams, inventory: PhoneInventory,
                    noise_std: float = 0.0, rng: Optional[np.random.Generator] = None,
                    width: float = 0.03, keep_noise: bool = False) -> Utterance:
    """Re-render ``u`` with the speaker factors moved by ``p``.

    Content (tokens, durations, phone labels) and the speaker id are kept.
    With ``keep_noise`` the recording's own noise (frames minus the clean
    render) is carried over instead of drawing new noise.
    Raises ContractError if a formant centre would leave (0, 1).
    """
    spk = u.speaker.replace(formant_scale=u.speaker.formant_scale * p.rho1,
                            f0_base=u.speaker.f0_base * p.rho2,
                            eq_curve=u.speaker.eq_curve * p.eq_curve)
    if keep_noise:
        residual = u.frames - render_frames(u.tokens, u.durations, u.speaker, inventory,
                                            0.0, None, width)
        clean = render_frames(u.tokens, u.durations, spk, inventory, 0.0, None, width)
        frames = (clean + residual).astype(np.float32)
    else:
        frames = render_frames(u.tokens, u.durations, spk, inventory, noise_std, rng, width)
    return Utterance(u.utt_id, frames, u.tokens, u.durations, spk, u.pair_id,
                     dict(u.meta, transform=p.to_dict()))
