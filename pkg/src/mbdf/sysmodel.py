"""Link-level signal model: constellations, MIMO channels, framing.

Everything downstream (filter design, detection, decoding) works on the model

    r = H s + n,

with ``H`` an (n_rx, n_tx) complex gain matrix, ``s`` a vector of unit-energy
constellation symbols (one per transmit stream) and ``n`` circular white
Gaussian noise of per-entry variance ``noise_variance``.

Conventions used throughout the package:

* Constellation points are indexed by their bit label read MSB-first, and are
  normalized to unit average energy.
* QPSK labels: the first bit selects the sign of the in-phase axis, the
  second the quadrature axis, ``0 -> +``.  Label ``00`` is ``(1+1j)/sqrt(2)``.
* Square 16-QAM labels: bits (0,1) Gray-select the I level, bits (2,3) the Q
  level, with per-axis sequence ``00 -> +3, 01 -> +1, 11 -> -1, 10 -> -3``
  scaled by ``1/sqrt(10)``.  The leading bit of each axis pair is the sign
  bit, consistent with QPSK.
* Bit arrays are 0/1 integer arrays; streams are rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Constellation",
    "ChannelRealization",
    "TimeVaryingChannel",
    "MimoFrame",
    "make_constellation",
    "bit_labels",
    "modulate",
    "demap_hard",
    "slice_to_index",
    "slice_symbols",
    "snr_to_noise_variance",
    "rayleigh_channel",
    "jakes_sequence",
    "transmit",
    "transmit_block",
    "build_frame",
]


# ---------------------------------------------------------------------------
# Constellations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Constellation:
    """A unit-energy complex constellation with Gray bit labels.

    Attributes:
        name: identifier, e.g. ``"qpsk"``.
        points: (M,) complex array; ``points[label]`` is the symbol whose bit
            pattern (MSB first) encodes ``label``.
        bits_per_symbol: number of bits carried by one symbol.
    """

    name: str
    points: np.ndarray
    bits_per_symbol: int

    @property
    def size(self) -> int:
        return self.points.size


def _gray_axis_levels() -> dict[tuple[int, int], int]:
    # Per-axis 2-bit Gray sequence for square 16-QAM, positive to negative.
    return {(0, 0): 3, (0, 1): 1, (1, 1): -1, (1, 0): -3}


def make_constellation(name: str) -> Constellation:
    """Build one of the supported constellations (``"qpsk"``, ``"16qam"``)."""
    key = name.lower().replace("-", "")
    if key == "qpsk":
        pts = np.empty(4, dtype=complex)
        for label in range(4):
            b0, b1 = (label >> 1) & 1, label & 1
            pts[label] = ((1 - 2 * b0) + 1j * (1 - 2 * b1)) / np.sqrt(2.0)
        return Constellation("qpsk", pts, 2)
    if key == "16qam":
        axis = _gray_axis_levels()
        pts = np.empty(16, dtype=complex)
        for label in range(16):
            b = [(label >> k) & 1 for k in (3, 2, 1, 0)]
            i_level = axis[(b[0], b[1])]
            q_level = axis[(b[2], b[3])]
            pts[label] = (i_level + 1j * q_level) / np.sqrt(10.0)
        return Constellation("16qam", pts, 4)
    raise ValueError(f"unsupported constellation {name!r} (use 'qpsk' or '16qam')")


def bit_labels(constellation: Constellation) -> np.ndarray:
    """(M, C) array of the bit pattern of each point, MSB first."""
    c = constellation.bits_per_symbol
    labels = np.arange(constellation.size)
    return (labels[:, None] >> np.arange(c - 1, -1, -1)[None, :]) & 1


def modulate(bits: np.ndarray, constellation: Constellation) -> np.ndarray:
    """Map 0/1 bits to symbols, one stream per row.

    Args:
        bits: (n_streams, n_bits) array; ``n_bits`` must be a multiple of the
            constellation's bits per symbol.  A 1-D array is treated as a
            single stream.

    Returns:
        (n_streams, n_bits / bits_per_symbol) complex symbol array.
    """
    bits = np.asarray(bits)
    squeeze = bits.ndim == 1
    if squeeze:
        bits = bits[None, :]
    c = constellation.bits_per_symbol
    if bits.shape[1] % c:
        raise ValueError(
            f"bit count {bits.shape[1]} is not a multiple of {c} bits/symbol"
        )
    if bits.size and (bits.min() < 0 or bits.max() > 1):
        raise ValueError("bits must be 0/1")
    groups = bits.reshape(bits.shape[0], -1, c)
    weights = 1 << np.arange(c - 1, -1, -1)
    idx = (groups * weights).sum(axis=2)
    sym = constellation.points[idx]
    return sym[0] if squeeze else sym


def slice_to_index(z: np.ndarray, constellation: Constellation) -> np.ndarray:
    """Index of the nearest constellation point (ties -> lowest index)."""
    z = np.asarray(z)
    d = np.abs(z[..., None] - constellation.points)
    return np.argmin(d, axis=-1)


def slice_symbols(z: np.ndarray, constellation: Constellation) -> np.ndarray:
    """Hard decision: nearest constellation point, elementwise."""
    return constellation.points[slice_to_index(z, constellation)]


def demap_hard(symbols: np.ndarray, constellation: Constellation) -> np.ndarray:
    """Nearest-point bits for each symbol; bits of consecutive symbols are
    concatenated along the last axis."""
    idx = slice_to_index(symbols, constellation)
    labels = bit_labels(constellation)[idx]  # shape(idx) + (C,)
    if labels.ndim == 1:
        return labels
    return labels.reshape(labels.shape[:-2] + (-1,))


# ---------------------------------------------------------------------------
# Channels
# ---------------------------------------------------------------------------

@dataclass
class ChannelRealization:
    """One MIMO channel draw plus its operating noise level."""

    gains: np.ndarray  # (n_rx, n_tx) complex
    noise_variance: float = 0.0

    @property
    def n_rx(self) -> int:
        return self.gains.shape[0]

    @property
    def n_tx(self) -> int:
        return self.gains.shape[1]


@dataclass
class TimeVaryingChannel:
    """A per-symbol sequence of channel matrices (shared noise level)."""

    gains: np.ndarray  # (length, n_rx, n_tx)
    noise_variance: float = 0.0

    def __len__(self) -> int:
        return self.gains.shape[0]

    def __getitem__(self, i: int) -> ChannelRealization:
        return ChannelRealization(self.gains[i], self.noise_variance)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def rayleigh_channel(
    n_rx: int, n_tx: int, rng: np.random.Generator, noise_variance: float = 0.0
) -> ChannelRealization:
    """i.i.d. zero-mean unit-variance complex Gaussian gain matrix."""
    g = (rng.standard_normal((n_rx, n_tx)) + 1j * rng.standard_normal((n_rx, n_tx)))
    return ChannelRealization(g / np.sqrt(2.0), noise_variance)


def jakes_sequence(
    n_rx: int,
    n_tx: int,
    doppler_rate: float,
    length: int,
    rng: np.random.Generator,
    noise_variance: float = 0.0,
    oscillators: int = 32,
) -> TimeVaryingChannel:
    """Correlated flat-fading sequence from a sum of sinusoids.

    Each gain entry evolves as ``(1/sqrt(M)) * sum_m exp(j(2 pi f_D T cos(a_m)
    i + phi_m))`` with M equi-spaced arrival angles, a random per-entry angle
    offset and i.i.d. random phases.  The lag-tau autocorrelation approaches
    the zeroth-order Bessel function ``J0(2 pi f_D T tau)`` and distinct
    entries are uncorrelated (distinct Doppler frequencies).

    Args:
        doppler_rate: normalized Doppler ``f_D * T`` (0 freezes the channel).
        oscillators: sinusoids per entry; at least 16.
    """
    if oscillators < 16:
        raise ValueError("need at least 16 oscillators per fading tap")
    if doppler_rate < 0:
        raise ValueError("doppler_rate must be nonnegative")
    m = oscillators
    t = np.arange(length)
    gains = np.empty((length, n_rx, n_tx), dtype=complex)
    for a in range(n_rx):
        for b in range(n_tx):
            offset = rng.uniform(0.0, 1.0)
            angles = 2.0 * np.pi * (np.arange(m) + offset) / m
            phases = rng.uniform(0.0, 2.0 * np.pi, size=m)
            freqs = 2.0 * np.pi * doppler_rate * np.cos(angles)
            osc = np.exp(1j * (np.outer(t, freqs) + phases))
            gains[:, a, b] = osc.sum(axis=1) / np.sqrt(m)
    return TimeVaryingChannel(gains, noise_variance)


def _noise(shape, noise_variance: float, rng: np.random.Generator) -> np.ndarray:
    scale = np.sqrt(noise_variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def transmit(
    channel: ChannelRealization, s: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Push one symbol vector through the channel: ``r = H s + n``."""
    s = np.asarray(s)
    if s.shape != (channel.n_tx,):
        raise ValueError(f"symbol vector shape {s.shape} != ({channel.n_tx},)")
    return channel.gains @ s + _noise(channel.n_rx, channel.noise_variance, rng)


def transmit_block(
    channel: ChannelRealization | TimeVaryingChannel,
    s: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Vectorized transmit of an (n_tx, q) symbol block -> (n_rx, q).

    For a :class:`TimeVaryingChannel` the i-th column uses the i-th gain
    matrix.
    """
    s = np.asarray(s)
    if isinstance(channel, TimeVaryingChannel):
        if s.shape != (channel.gains.shape[2], channel.gains.shape[0]):
            raise ValueError("symbol block shape mismatch with channel sequence")
        clean = np.einsum("qab,bq->aq", channel.gains, s)
        return clean + _noise(clean.shape, channel.noise_variance, rng)
    if s.ndim != 2 or s.shape[0] != channel.n_tx:
        raise ValueError(f"symbol block must be ({channel.n_tx}, q)")
    return channel.gains @ s + _noise((channel.n_rx, s.shape[1]), channel.noise_variance, rng)


# ---------------------------------------------------------------------------
# SNR bookkeeping and framing
# ---------------------------------------------------------------------------

def snr_to_noise_variance(
    snr_db: float,
    n_tx: int,
    bits_per_symbol: int,
    code_rate: float = 1.0,
    symbol_energy: float = 1.0,
) -> float:
    """Noise variance for a target SNR.

    Uses ``SNR = 10 log10(n_tx * symbol_energy / (code_rate * bits_per_symbol
    * noise_variance))``, i.e. total transmit energy over noise energy per
    information bit per receive dimension; coded runs keep the same definition
    with their code rate.
    """
    if n_tx <= 0 or bits_per_symbol <= 0:
        raise ValueError("n_tx and bits_per_symbol must be positive")
    if not 0.0 < code_rate <= 1.0:
        raise ValueError("code_rate must lie in (0, 1]")
    if symbol_energy <= 0:
        raise ValueError("symbol_energy must be positive")
    return n_tx * symbol_energy / (code_rate * bits_per_symbol * 10.0 ** (snr_db / 10.0))


@dataclass
class MimoFrame:
    """A transmitted frame: training prefix plus payload symbols.

    Attributes:
        symbols: (n_tx, q) transmitted symbols including the training prefix.
        payload_bits: (n_tx, (q - training_len) * bits_per_symbol) bits that
            generated the payload columns.
        training_len: number of leading pilot columns (known at the receiver,
            never counted in error rates).
    """

    symbols: np.ndarray
    payload_bits: np.ndarray
    training_len: int = 0

    @property
    def payload_symbols(self) -> np.ndarray:
        return self.symbols[:, self.training_len:]


def build_frame(
    constellation: Constellation,
    n_tx: int,
    n_payload: int,
    training_len: int,
    rng: np.random.Generator,
) -> MimoFrame:
    """Draw a random frame: pilot prefix plus random payload bits."""
    if n_payload < 0 or training_len < 0:
        raise ValueError("frame lengths must be nonnegative")
    c = constellation.bits_per_symbol
    bits = rng.integers(0, 2, size=(n_tx, n_payload * c))
    payload = modulate(bits, constellation) if n_payload else np.empty((n_tx, 0), complex)
    pilots = constellation.points[
        rng.integers(0, constellation.size, size=(n_tx, training_len))
    ]
    return MimoFrame(np.concatenate([pilots, payload], axis=1), bits, training_len)
